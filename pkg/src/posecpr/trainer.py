"""Batch-classification and cycle-constraint training of the composed-query model.

For a batch of (reference u, target v, forward text, reverse text):

    psi_i     = merge(u_i, f_T(fwd_i))          composed feature
    psi_hat_i = merge(psi_i, f_T(rev_i))        conjugated composed feature

``loss_bbc`` is the in-batch softmax cross-entropy of ``lam * cos(psi_i, v_j)``
with the diagonal as the positive; ``loss_cycle`` is the same form over
``lam * cos(psi_hat_i, u_j)``. Gradients are backpropagated by hand and flow
through ``psi`` inside the cycle term.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    VARIANTS,
    Manifest,
    TripletRecord,
    VariantKind,
    effective_roles,
    reverse_variant,
)
from .errors import ConfigError, IncompleteRecord, MissingReverse, NumericalError, ParseError
from .features import (
    COMBINER,
    SUM,
    EmbeddingStore,
    MergerParams,
    TextEncoderParams,
    hash_encode_text,
    l2_normalize,
    merge_backward,
    merge_forward,
)

logger = logging.getLogger(__name__)

PHASES = ("text", "merger")


@dataclass
class TrainConfig:
    lam: float = 100.0
    omega: float = 0.5
    batch_size: int = 128
    epochs: int = 50
    learning_rate: float = 2e-6
    seed: int = 0
    phase: str = "text"
    variants: Tuple[VariantKind, ...] = VARIANTS
    cyclic: bool = True
    d_raw: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.lam > 0:
            problems.append(f"lambda must be positive, got {self.lam}")
        if not 0.0 <= self.omega <= 1.0:
            problems.append(f"omega must lie in [0, 1], got {self.omega}")
        if self.batch_size < 1:
            problems.append(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            problems.append(f"learning rate must be positive, got {self.learning_rate}")
        if self.phase not in PHASES:
            problems.append(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.variants:
            problems.append("at least one variant must be enabled")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def snapshot(self) -> dict:
        d = asdict(self)
        d["variants"] = [v.value for v in self.variants]
        return d

    @classmethod
    def from_snapshot(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["variants"] = tuple(VariantKind(v) for v in d.get("variants", [v.value for v in VARIANTS]))
        known = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainBatch:
    """Rows of reference/target features with hashed forward/reverse texts."""

    U: np.ndarray
    V: np.ndarray
    X: np.ndarray  # hashed forward texts (B, d_raw)
    Y: Optional[np.ndarray] = None  # hashed reverse texts (B, d_raw)

    @classmethod
    def from_texts(cls, U, V, forward: Sequence[str], reverse: Optional[Sequence[Optional[str]]], d_raw: int) -> "TrainBatch":
        X = np.stack([hash_encode_text(t, d_raw) for t in forward])
        Y = None
        if reverse is not None:
            if any(r is None for r in reverse):
                raise MissingReverse("reverse text missing for at least one row")
            Y = np.stack([hash_encode_text(t, d_raw) for t in reverse])
        return cls(np.asarray(U, dtype=np.float64), np.asarray(V, dtype=np.float64), X, Y)

    @property
    def size(self) -> int:
        return self.U.shape[0]


@dataclass
class Gradients:
    projection: np.ndarray
    bias: np.ndarray
    merger: Dict[str, object] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, np.ndarray]:
        out = {"projection": self.projection, "bias": self.bias}
        for k, v in self.merger.items():
            out[k] = np.asarray(v, dtype=np.float64)
        return out


# ---------------------------------------------------------------- losses

def _require_finite(*arrays) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericalError("non-finite feature in batch")


def _batch_ce(queries: np.ndarray, candidates: np.ndarray, lam: float):
    """Stabilized in-batch cross-entropy; returns (loss, log-softmax, dL/dqueries)."""
    B = queries.shape[0]
    q_hat = l2_normalize(queries)
    c_hat = l2_normalize(candidates)
    S = lam * (q_hat @ c_hat.T)
    shifted = S - S.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.mean(np.diag(logp))) + 0.0  # + 0.0 turns -0.0 into 0.0
    dS = np.exp(logp)
    dS[np.diag_indices(B)] -= 1.0
    dS /= B
    dq_hat = lam * (dS @ c_hat)
    norm = np.linalg.norm(queries, axis=1, keepdims=True)
    radial = np.sum(dq_hat * q_hat, axis=1, keepdims=True) * q_hat
    dq = np.divide(dq_hat - radial, norm, out=np.zeros_like(dq_hat), where=norm > 0)
    if not (np.isfinite(loss) and np.all(np.isfinite(dq))):
        raise NumericalError("non-finite loss or gradient")
    return loss, logp, dq


def _forward(batch: TrainBatch, text: TextEncoderParams, merger: MergerParams):
    _require_finite(batch.U, batch.V)
    T = batch.X @ text.projection + text.bias
    _require_finite(T)
    psi, cache = merge_forward(batch.U, T, merger)
    return psi, cache


def _conjugate(batch: TrainBatch, psi: np.ndarray, text: TextEncoderParams, merger: MergerParams):
    if batch.Y is None:
        raise MissingReverse("batch carries no reverse texts")
    R = batch.Y @ text.projection + text.bias
    _require_finite(R)
    psi_hat, cache = merge_forward(psi, R, merger)
    return psi_hat, cache


def loss_bbc(batch: TrainBatch, text: TextEncoderParams, merger: MergerParams, lam: float):
    """Return ``(loss, log_softmax_matrix)`` for the composed-vs-target term."""
    psi, _ = _forward(batch, text, merger)
    loss, logp, _ = _batch_ce(psi, batch.V, lam)
    return loss, logp


def loss_cycle(batch: TrainBatch, text: TextEncoderParams, merger: MergerParams, lam: float):
    """Return ``(loss, log_softmax_matrix)`` for the conjugated-vs-reference term."""
    psi, _ = _forward(batch, text, merger)
    psi_hat, _ = _conjugate(batch, psi, text, merger)
    loss, logp, _ = _batch_ce(psi_hat, batch.U, lam)
    return loss, logp


def loss_total(batch: TrainBatch, text: TextEncoderParams, merger: MergerParams, cfg: TrainConfig) -> float:
    """Forward-only ``omega * L_bbc + (1 - omega) * L_cycle``."""
    psi, _ = _forward(batch, text, merger)
    w = cfg.omega if cfg.cyclic else 1.0
    total = w * _batch_ce(psi, batch.V, cfg.lam)[0]
    if cfg.cyclic and w < 1.0:
        psi_hat, _ = _conjugate(batch, psi, text, merger)
        total += (1.0 - w) * _batch_ce(psi_hat, batch.U, cfg.lam)[0]
    return total


def loss_and_gradients(batch: TrainBatch, text: TextEncoderParams, merger: MergerParams, cfg: TrainConfig):
    """Total loss and its exact gradient w.r.t. every trainable parameter."""
    psi, cache1 = _forward(batch, text, merger)
    w = cfg.omega if cfg.cyclic else 1.0
    l_bbc, _, d_psi_bbc = _batch_ce(psi, batch.V, cfg.lam)
    total = w * l_bbc
    d_psi = w * d_psi_bbc
    d_rev = None
    merger_grads: Dict[str, object] = {}
    if cfg.cyclic and w < 1.0:
        psi_hat, cache2 = _conjugate(batch, psi, text, merger)
        l_cyc, _, d_psi_hat = _batch_ce(psi_hat, batch.U, cfg.lam)
        total += (1.0 - w) * l_cyc
        d_psi2, d_rev, merger_grads = merge_backward((1.0 - w) * d_psi_hat, cache2, merger)
        d_psi = d_psi + d_psi2
    _, d_fwd, g1 = merge_backward(d_psi, cache1, merger)
    for k, v in g1.items():
        merger_grads[k] = merger_grads[k] + v if k in merger_grads else v
    d_proj = batch.X.T @ d_fwd
    d_bias = d_fwd.sum(axis=0)
    if d_rev is not None:
        d_proj = d_proj + batch.Y.T @ d_rev
        d_bias = d_bias + d_rev.sum(axis=0)
    grads = Gradients(d_proj, d_bias, merger_grads)
    for g in grads.as_dict().values():
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    return float(total), grads


def gradients(batch: TrainBatch, text: TextEncoderParams, merger: MergerParams, cfg: TrainConfig) -> Gradients:
    return loss_and_gradients(batch, text, merger, cfg)[1]


# ---------------------------------------------------------------- sampling

def sample_description(
    record: TripletRecord, variant: VariantKind, paraphrase_count: int, rng: np.random.Generator
) -> Tuple[str, str]:
    """Draw a forward text at ``variant`` and an independent reverse text."""
    fwd = record.descriptions.get(variant, ())
    rev = record.descriptions.get(reverse_variant(variant), ())
    if len(fwd) < paraphrase_count or len(rev) < paraphrase_count:
        raise IncompleteRecord(f"{record.pair_id}: fewer than {paraphrase_count} descriptions at {variant.value}")
    i = int(rng.integers(paraphrase_count))
    j = int(rng.integers(paraphrase_count))
    return fwd[i], rev[j]


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _merger_arrays(merger: MergerParams) -> Dict[str, np.ndarray]:
    if merger.kind == SUM:
        return {}
    arrays = {n: getattr(merger, n) for n in MergerParams.ARRAYS}
    arrays["b_g"] = np.array([merger.b_g])
    return arrays


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    text: TextEncoderParams
    merger: MergerParams
    loss_curve: List[float]
    config: TrainConfig


def training_samples(manifest: Manifest, variants: Sequence[VariantKind]) -> List[Tuple[TripletRecord, VariantKind]]:
    return [(r, v) for r in manifest.split("train") for v in variants]


def check_store_coverage(samples, store: EmbeddingStore) -> None:
    missing = []
    for rec, v in samples:
        for key in effective_roles(rec, v):
            if key not in store:
                missing.append(f"{key[0]}/{key[1].value}")
    if missing:
        uniq = sorted(set(missing))
        more = f" (+{len(uniq) - 5} more)" if len(uniq) > 5 else ""
        raise ConfigError(f"embeddings missing for enabled variants: {', '.join(uniq[:5])}{more}")


def train(
    manifest: Manifest,
    store: EmbeddingStore,
    cfg: TrainConfig,
    text: Optional[TextEncoderParams] = None,
    merger: Optional[MergerParams] = None,
) -> TrainResult:
    """Optimize the phase's parameters with Adam over (record, variant) samples.

    Phase ``text`` updates the text projection and bias; phase ``merger``
    freezes them and updates the combiner. Every epoch shuffles the samples
    and redraws one forward and one reverse description per sample.
    """
    cfg.validate()
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    rng = np.random.default_rng(data_seq)
    text = text.copy() if text is not None else TextEncoderParams.init(cfg.d_raw, store.dim, init_rng)
    merger = merger.copy() if merger is not None else MergerParams.sum()
    if text.dim != store.dim:
        raise ConfigError(f"text projection dim {text.dim} != store dim {store.dim}")
    if cfg.phase == "merger" and merger.kind != COMBINER:
        raise ConfigError("merger phase needs a combiner merger")
    if merger.kind == COMBINER and merger.dim != store.dim:
        raise ConfigError(f"combiner dim {merger.dim} != store dim {store.dim}")

    samples = training_samples(manifest, cfg.variants)
    curve: List[float] = []
    if cfg.epochs == 0 or not samples:
        return TrainResult(text, merger, curve, cfg)
    check_store_coverage(samples, store)

    P = manifest.paraphrase_count
    keys = sorted({k for rec, v in samples for k in effective_roles(rec, v)})
    row = {k: i for i, k in enumerate(keys)}
    feats = store.matrix(keys)

    # Projection rows for buckets no training text touches get zero gradient,
    # so their Adam moments stay zero and their update is exactly zero. Train
    # on the touched rows only and scatter them back at the end.
    corpus = sorted({
        t for rec, v in samples for var in (v, reverse_variant(v)) for t in rec.descriptions.get(var, ())
    })
    full = {t: hash_encode_text(t, text.d_raw) for t in corpus}
    active = np.array(sorted({int(b) for h in full.values() for b in np.flatnonzero(h)}), dtype=np.int64)
    hashed = {t: h[active] for t, h in full.items()}
    del full
    full_text = text
    text = TextEncoderParams(full_text.projection[active], full_text.bias)

    def hash_of(t: str) -> np.ndarray:
        return hashed[t]

    if cfg.phase == "text":
        params = {"projection": text.projection, "bias": text.bias}
    else:
        params = _merger_arrays(merger)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            q_rows, t_rows, fwd, rev = [], [], [], []
            for i in idx:
                rec, v = samples[i]
                q, tg = effective_roles(rec, v)
                f, r = sample_description(rec, v, P, rng)
                q_rows.append(row[q])
                t_rows.append(row[tg])
                fwd.append(hash_of(f))
                rev.append(hash_of(r))
            batch = TrainBatch(feats[q_rows], feats[t_rows], np.stack(fwd), np.stack(rev))
            loss, grads = loss_and_gradients(batch, text, merger, cfg)
            g = grads.as_dict()
            if cfg.phase == "merger":
                g["b_g"] = np.array([grads.merger["b_g"]])
            opt.step(params, g)
            if cfg.phase == "merger":
                merger.b_g = float(params["b_g"][0])
            total += loss * len(idx)
            count += len(idx)
        curve.append(total / count)
        logger.debug("epoch %d loss %.6f", epoch + 1, curve[-1])
    full_text.projection[active] = text.projection
    full_text.bias = text.bias
    return TrainResult(full_text, merger, curve, cfg)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CPRC"
CKPT_VERSION = 1


def save_checkpoint(path, text: TextEncoderParams, merger: MergerParams, cfg: Optional[TrainConfig] = None) -> Path:
    """Header JSON followed by raw little-endian float64 parameter blocks."""
    blocks = [("projection", text.projection), ("bias", text.bias)]
    blocks += [(k, np.asarray(v, dtype=np.float64).reshape(-1) if k == "b_g" else v)
               for k, v in _merger_arrays(merger).items()]
    header = {
        "version": CKPT_VERSION,
        "d": text.dim,
        "d_raw": text.d_raw,
        "merger": merger.kind,
        "config": cfg.snapshot() if cfg is not None else None,
        "blocks": [{"name": n, "shape": list(np.shape(a))} for n, a in blocks],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(text_params, merger_params, config_or_None)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ParseError(0, f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    if header.get("version") != CKPT_VERSION:
        raise ParseError(0, f"{path}: unsupported checkpoint version")
    offset = 8 + n
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64)
        arrays[block["name"]] = arr.reshape(shape)
        offset += 8 * size
    text = TextEncoderParams(arrays["projection"], arrays["bias"])
    if header["merger"] == COMBINER:
        merger = MergerParams(
            COMBINER, *(arrays[k] for k in MergerParams.ARRAYS), b_g=float(arrays["b_g"][0])
        )
    else:
        merger = MergerParams.sum()
    cfg = TrainConfig.from_snapshot(header["config"]) if header.get("config") else None
    return text, merger, cfg


def write_loss_curve(curve: Sequence[float], path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{i + 1}\t{loss:.10g}\n" for i, loss in enumerate(curve)), encoding="utf-8")
    return path
