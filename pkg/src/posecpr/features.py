"""Encoders, feature mergers and cosine similarity.

Image features come from a file-backed :class:`EmbeddingStore` (the image
encoder is frozen, so its outputs are constants). Text goes through a
signed feature-hashing bag of words followed by a trainable affine
projection. Two mergers combine image and text features: an element-wise
sum and a gated MLP combiner.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import ImageKey, Orientation
from .errors import MissingEmbedding, NumericalError, ParseError, ShapeError

STORE_MAGIC = b"CPRE"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN = re.compile(r"[^\W_]+")


# ---------------------------------------------------------------- store

class EmbeddingStore:
    """Map from ``(image id, orientation)`` to a ``dim``-vector.

    Binary layout: magic ``CPRE``, version u32, dim u32, count u64, then
    ``count`` rows of ``dim`` little-endian float32. The sibling ``.idx``
    file lists one ``id<TAB>orientation`` line per row.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._rows: Dict[ImageKey, int] = {}
        self._keys: List[ImageKey] = []
        self._chunks: List[np.ndarray] = []
        self._matrix: Optional[np.ndarray] = None

    @staticmethod
    def _key(image_id: str, orientation=Orientation.NORMAL) -> ImageKey:
        return (image_id, Orientation(orientation))

    def add(self, image_id: str, vector, orientation=Orientation.NORMAL) -> None:
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ShapeError(f"{image_id}: dim {vec.shape[0]} != store dim {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise NumericalError(f"{image_id}: non-finite embedding")
        key = self._key(image_id, orientation)
        if key in self._rows:
            self._materialize()
            self._matrix[self._rows[key]] = vec
            return
        self._rows[key] = len(self._keys)
        self._keys.append(key)
        self._chunks.append(vec[None, :])
        self._matrix = None

    def add_many(self, ids: Sequence[str], vectors, orientation=Orientation.NORMAL) -> None:
        vectors = np.asarray(vectors, dtype=np.float64)
        for image_id, vec in zip(ids, vectors):
            self.add(image_id, vec, orientation)

    def _materialize(self) -> np.ndarray:
        if self._matrix is None:
            base = [] if not self._chunks else self._chunks
            self._matrix = (
                np.concatenate(base, axis=0) if base else np.zeros((0, self.dim))
            )
            self._chunks = [self._matrix]
        return self._matrix

    def __contains__(self, key) -> bool:
        if isinstance(key, str):
            key = (key, Orientation.NORMAL)
        return self._key(*key) in self._rows

    def __len__(self) -> int:
        return len(self._keys)

    def keys(self) -> List[ImageKey]:
        return list(self._keys)

    def get(self, image_id: str, orientation=Orientation.NORMAL) -> np.ndarray:
        key = self._key(image_id, orientation)
        if key not in self._rows:
            raise MissingEmbedding(key)
        return np.array(self._materialize()[self._rows[key]], dtype=np.float64)

    def matrix(self, keys: Iterable[ImageKey]) -> np.ndarray:
        mat = self._materialize()
        rows = []
        for k in keys:
            k = self._key(*k)
            if k not in self._rows:
                raise MissingEmbedding(k)
            rows.append(self._rows[k])
        return np.array(mat[rows], dtype=np.float64).reshape(len(rows), self.dim)

    @staticmethod
    def index_path(path) -> Path:
        return Path(path).with_suffix(".idx")

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        mat = self._materialize().astype("<f4")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, self.dim, len(self._keys)))
            fh.write(mat.tobytes(order="C"))
        lines = "".join(f"{i}\t{o.value}\n" for i, o in self._keys)
        self.index_path(path).write_text(lines, encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, mmap: bool = True) -> "EmbeddingStore":
        path = Path(path)
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ParseError(0, f"{path}: truncated header")
        magic, version, dim, count = _HEADER.unpack(head)
        if magic != STORE_MAGIC:
            raise ParseError(0, f"{path}: bad magic {magic!r}")
        if version != STORE_VERSION:
            raise ParseError(0, f"{path}: unsupported version {version}")
        expected = _HEADER.size + 4 * dim * count
        if path.stat().st_size != expected:
            raise ParseError(0, f"{path}: size {path.stat().st_size} != expected {expected}")
        if mmap and count:
            mat = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(count, dim))
        else:
            raw = path.read_bytes()[_HEADER.size:]
            mat = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
        keys = []
        for lineno, line in enumerate(cls.index_path(path).read_text(encoding="utf-8").split("\n"), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(lineno, f"{cls.index_path(path).name}: expected 'id<TAB>orientation'")
            keys.append((parts[0], Orientation(parts[1])))
        if len(keys) != count:
            raise ParseError(0, f"index lists {len(keys)} rows, store holds {count}")
        if not np.all(np.isfinite(mat)):
            raise NumericalError(f"{path}: non-finite entries")
        store = cls(dim)
        store._keys = keys
        store._rows = {k: i for i, k in enumerate(keys)}
        store._matrix = mat
        store._chunks = [mat]
        return store


# ---------------------------------------------------------------- text

def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def token_bucket(token: str, d_raw: int) -> Tuple[int, float]:
    h = fnv1a_64(token.encode("utf-8"))
    return h % d_raw, (-1.0 if h >> 63 else 1.0)


def hash_encode_text(text: str, d_raw: int = 1024) -> np.ndarray:
    """Signed hashing bag of words, L2-normalized (empty text stays zero)."""
    vec = np.zeros(d_raw, dtype=np.float64)
    for tok in tokenize(text):
        bucket, sign = token_bucket(tok, d_raw)
        vec[bucket] += sign
    return l2_normalize(vec)


def hash_encode_batch(texts: Sequence[str], d_raw: int = 1024) -> np.ndarray:
    return np.stack([hash_encode_text(t, d_raw) for t in texts]) if texts else np.zeros((0, d_raw))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class TextEncoderParams:
    projection: np.ndarray  # (d_raw, d)
    bias: np.ndarray  # (d,)

    @property
    def d_raw(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def init(cls, d_raw: int, dim: int, rng: np.random.Generator) -> "TextEncoderParams":
        return cls(glorot(rng, d_raw, dim), np.zeros(dim))

    def copy(self) -> "TextEncoderParams":
        return TextEncoderParams(self.projection.copy(), self.bias.copy())

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.projection)) and np.all(np.isfinite(self.bias))):
            raise NumericalError("text encoder parameters are not finite")


def encode_hashed(hashed: np.ndarray, params: TextEncoderParams) -> np.ndarray:
    return hashed @ params.projection + params.bias


def encode_text(text: str, params: TextEncoderParams) -> np.ndarray:
    return encode_hashed(hash_encode_text(text, params.d_raw), params)


# ---------------------------------------------------------------- similarity

def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise unit scaling; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return l2_normalize(a) @ l2_normalize(b).T


# ---------------------------------------------------------------- mergers

SUM = "sum"
COMBINER = "combiner"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class MergerParams:
    kind: str = SUM
    W1: Optional[np.ndarray] = None  # (2d, 2d)
    b1: Optional[np.ndarray] = None  # (2d,)
    W2: Optional[np.ndarray] = None  # (2d, d)
    b2: Optional[np.ndarray] = None  # (d,)
    w_g: Optional[np.ndarray] = None  # (2d,)
    b_g: float = 0.0

    ARRAYS = ("W1", "b1", "W2", "b2", "w_g")

    @classmethod
    def sum(cls) -> "MergerParams":
        return cls(SUM)

    @classmethod
    def combiner(cls, dim: int, rng: np.random.Generator, gate_bias: float = 3.0) -> "MergerParams":
        h = 2 * dim
        return cls(
            COMBINER,
            W1=glorot(rng, h, h),
            b1=np.zeros(h),
            W2=glorot(rng, h, dim),
            b2=np.zeros(dim),
            w_g=glorot(rng, h, 1)[:, 0],
            b_g=float(gate_bias),
        )

    @property
    def dim(self) -> Optional[int]:
        return None if self.kind == SUM else self.W2.shape[1]

    def copy(self) -> "MergerParams":
        if self.kind == SUM:
            return MergerParams(SUM)
        return MergerParams(
            COMBINER, *(getattr(self, n).copy() for n in self.ARRAYS), b_g=float(self.b_g)
        )

    def check_shapes(self) -> None:
        if self.kind == SUM:
            return
        if self.kind != COMBINER:
            raise ShapeError(f"unknown merger kind {self.kind!r}")
        d = self.W2.shape[1]
        h = 2 * d
        want = {"W1": (h, h), "b1": (h,), "W2": (h, d), "b2": (d,), "w_g": (h,)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, want {shape}")


@dataclass
class CombinerCache:
    u: np.ndarray
    t: np.ndarray
    u_hat: np.ndarray
    t_hat: np.ndarray
    z: np.ndarray
    pre: np.ndarray
    h: np.ndarray
    o: np.ndarray
    g: np.ndarray


def merge_forward(U: np.ndarray, T: np.ndarray, params: MergerParams):
    """Batched merge of rows of ``U`` and ``T``; returns ``(out, cache)``."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    if U.shape != T.shape:
        raise ShapeError(f"image features {U.shape} vs text features {T.shape}")
    if params.kind == SUM:
        return U + T, None
    params.check_shapes()
    if U.shape[1] != params.dim:
        raise ShapeError(f"features have dim {U.shape[1]}, combiner expects {params.dim}")
    u_hat, t_hat = l2_normalize(U), l2_normalize(T)
    z = np.concatenate([u_hat, t_hat], axis=1)
    pre = z @ params.W1 + params.b1
    h = np.maximum(pre, 0.0)
    o = h @ params.W2 + params.b2
    g = sigmoid(h @ params.w_g + params.b_g)[:, None]
    out = g * (u_hat + t_hat) + (1.0 - g) * o
    return out, CombinerCache(U, T, u_hat, t_hat, z, pre, h, o, g)


def _normalize_backward(x: np.ndarray, x_hat: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    radial = np.sum(d_hat * x_hat, axis=1, keepdims=True) * x_hat
    return np.divide(d_hat - radial, norm, out=np.zeros_like(d_hat), where=norm > 0)


def merge_backward(d_out: np.ndarray, cache: Optional[CombinerCache], params: MergerParams):
    """Backprop through :func:`merge_forward`.

    Returns ``(dU, dT, param_grads)``; ``param_grads`` is empty for the sum
    merger. The relu derivative at exactly zero is taken as 0.
    """
    if params.kind == SUM:
        return d_out, d_out, {}
    c = cache
    sum_branch = c.u_hat + c.t_hat
    dg = np.sum(d_out * (sum_branch - c.o), axis=1, keepdims=True)
    d_sum = c.g * d_out
    d_o = (1.0 - c.g) * d_out
    d_gate = (dg * c.g * (1.0 - c.g))[:, 0]
    grads = {
        "W2": c.h.T @ d_o,
        "b2": d_o.sum(axis=0),
        "w_g": c.h.T @ d_gate,
        "b_g": float(d_gate.sum()),
    }
    dh = d_o @ params.W2.T + np.outer(d_gate, params.w_g)
    d_pre = dh * (c.pre > 0)
    grads["W1"] = c.z.T @ d_pre
    grads["b1"] = d_pre.sum(axis=0)
    dz = d_pre @ params.W1.T
    d = c.u.shape[1]
    du_hat = d_sum + dz[:, :d]
    dt_hat = d_sum + dz[:, d:]
    dU = _normalize_backward(c.u, c.u_hat, du_hat)
    dT = _normalize_backward(c.t, c.t_hat, dt_hat)
    return dU, dT, grads


def merge(image_feat, text_feat, params: MergerParams) -> np.ndarray:
    image_feat = np.asarray(image_feat, dtype=np.float64)
    text_feat = np.asarray(text_feat, dtype=np.float64)
    if image_feat.shape != text_feat.shape:
        raise ShapeError(f"image feature {image_feat.shape} vs text feature {text_feat.shape}")
    out, _ = merge_forward(image_feat[None, :], text_feat[None, :], params)
    return out[0]
