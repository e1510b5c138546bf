"""Additive toy world for desk-scale training and evaluation.

Reference images are random unit vectors ``u``; a pair's target is
``u + delta_k`` for one of ``n_deltas`` random transition vectors. The
flipped orientation of any embedding reverses its coordinate order, so the
mirrored transition is ``delta_k`` reversed. Each variant of transition
``k`` has its own token, and paraphrase ``p`` appends a shared style token:
the original description of transition 3 under paraphrase 1 reads like
``fwd3 style1``. Tokens are chosen so no two share a hash bucket.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .core import VARIANTS, Manifest, Orientation, TripletRecord, VariantKind, validate_manifest
from .features import EmbeddingStore, token_bucket

_PREFIX = {
    VariantKind.ORIGINAL: "fwd",
    VariantKind.SWAPPED: "rev",
    VariantKind.MIRRORED: "mfwd",
    VariantKind.SWAPPED_MIRRORED: "mrev",
}


@dataclass
class SyntheticWorld:
    manifest: Manifest
    store: EmbeddingStore
    gallery_ids: List[str]
    deltas: np.ndarray


def _vocabulary(names: List[str], d_raw: int) -> Dict[str, str]:
    """Map each wanted name to a token whose hash bucket is unused so far."""
    used = set()
    out = {}
    for name in names:
        suffix = 0
        token = name
        while token_bucket(token, d_raw)[0] in used:
            suffix += 1
            token = f"{name}x{suffix}"
        used.add(token_bucket(token, d_raw)[0])
        out[name] = token
    return out


def flip(vec: np.ndarray) -> np.ndarray:
    return np.asarray(vec)[..., ::-1].copy()


def _unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def build_additive_world(
    n_train: int = 512,
    n_test: int = 128,
    gallery_size: int = 256,
    dim: int = 64,
    n_deltas: int = 32,
    paraphrase_count: int = 5,
    delta_scale: float = 0.3,
    d_raw: int = 1024,
    seed: int = 0,
) -> SyntheticWorld:
    """Build a manifest, an embedding store and a gallery id list.

    The gallery holds every test target plus, for as many test references
    as fit, a hard negative ``u + delta_j`` with ``j`` different from the
    true transition.
    """
    if gallery_size < n_test:
        raise ValueError("gallery must hold at least every test target")
    rng = np.random.default_rng(seed)
    deltas = delta_scale * _unit(rng, n_deltas, dim)

    names = [f"{_PREFIX[v]}{k}" for k in range(n_deltas) for v in VARIANTS]
    names += [f"style{p}" for p in range(paraphrase_count)]
    vocab = _vocabulary(names, d_raw)

    def descriptions(k: int) -> Dict[VariantKind, tuple]:
        return {
            v: tuple(f"{vocab[_PREFIX[v] + str(k)]} {vocab['style' + str(p)]}" for p in range(paraphrase_count))
            for v in VARIANTS
        }

    store = EmbeddingStore(dim)
    index: Dict[str, str] = {}
    counter = iter(range(10**9))

    def add_image(vec: np.ndarray) -> str:
        image_id = f"img{next(counter):05d}"
        store.add(image_id, vec, Orientation.NORMAL)
        store.add(image_id, flip(vec), Orientation.FLIPPED)
        index[image_id] = f"images/{image_id}.png"
        return image_id

    records: List[TripletRecord] = []
    test_info = []
    for split, n in (("train", n_train), ("test", n_test)):
        refs = _unit(rng, n, dim)
        for i in range(n):
            k = i % n_deltas if split == "train" else int(rng.integers(n_deltas))
            ref_id = add_image(refs[i])
            tgt_id = add_image(refs[i] + deltas[k])
            records.append(TripletRecord(f"{split}{i:05d}", ref_id, tgt_id, split, descriptions(k)))
            if split == "test":
                test_info.append((refs[i], k, tgt_id))

    gallery = [tgt for _, _, tgt in test_info]
    for u, k, _ in test_info[: gallery_size - n_test]:
        j = int(rng.integers(n_deltas - 1))
        j = j + 1 if j >= k else j
        gallery.append(add_image(u + deltas[j]))
    if len(gallery) < gallery_size:
        for vec in _unit(rng, gallery_size - len(gallery), dim):
            gallery.append(add_image(vec))
    manifest = validate_manifest(Manifest("synthetic-additive", paraphrase_count, tuple(records), index))
    return SyntheticWorld(manifest, store, sorted(gallery), deltas)
