"""Fixtures and independent oracles shared by the test modules.

The oracles here deliberately avoid package code: losses are explicit double
loops over python floats, recalls are counted by sorting lists.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from posecpr.pipeline import PairImage

STAGE1_MATCH = "Compare the following body parts"
STAGE2_MATCH = "bullet points describing"

STAGE1_REPLY = (
    "1. Right Arm: Lift the right arm above the head, transitioning smoothly from its resting position.\n"
    "2. Left Leg: Straighten the left leg fully as it supports the body’s weight in standing position."
)
STAGE2_REPLY = (
    "Description 1: Raise your right arm overhead and straighten your left leg.\n"
    "Description 2: Lift the right arm up high while the left leg locks straight.\n"
    "Description 3: Reach up with your right arm as your left leg extends to bear your weight."
)
REFUSAL_REPLY = "I'm sorry, but I can't help with that."


# ---------------------------------------------------------------- images

def pose_image(seed: int, height: int = 24, width: int = 16) -> PairImage:
    """Flat background with one off-center block; no two seeds look alike."""
    rng = np.random.default_rng(seed)
    px = np.empty((height, width, 3), dtype=np.uint8)
    px[:] = rng.integers(0, 256, 3, dtype=np.uint8)
    r, c = int(rng.integers(0, height - 6)), int(rng.integers(0, width // 2))
    px[r:r + 6, c:c + 4] = rng.integers(0, 256, 3, dtype=np.uint8)
    return PairImage(px)


def write_pair_fixture(root, n: int = 10):
    """Write ``n`` pairs of PNGs, an image index and a pair list under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    index_lines, pair_lines = [], []
    for i in range(n):
        for side, seed in (("a", 2 * i), ("b", 2 * i + 1)):
            image_id = f"p{i:02d}{side}"
            (root / "images" / f"{image_id}.png").write_bytes(pose_image(seed).to_png())
            index_lines.append(f"{image_id}\timages/{image_id}.png\n")
        split = "test" if i % 5 == 4 else "train"
        pair_lines.append(json.dumps({"pair_id": f"pair{i:02d}", "ref_image": f"p{i:02d}a",
                                      "tgt_image": f"p{i:02d}b", "split": split}) + "\n")
    (root / "images.tsv").write_text("".join(index_lines), encoding="utf-8")
    (root / "pairs.jsonl").write_text("".join(pair_lines), encoding="utf-8")
    return root / "pairs.jsonl", root / "images.tsv"


def ten_pair_script(refuse_at: int = None) -> dict:
    """Mock script for the 10-pair fixture, served in request order.

    With ``refuse_at = k`` the (k+1)-th Stage I request is refused. Run with
    one worker so the request order, four Stage I calls per pair, is fixed.
    """
    stage1 = []
    if refuse_at is not None:
        stage1.append({"match": STAGE1_MATCH, "reply": STAGE1_REPLY, "times": refuse_at})
        stage1.append({"match": STAGE1_MATCH, "reply": REFUSAL_REPLY, "times": 1})
    stage1.append({"match": STAGE1_MATCH, "reply": STAGE1_REPLY, "times": None})
    entries = [e for e in stage1 if e.get("times") != 0]
    entries.append({"match": STAGE2_MATCH, "reply": STAGE2_REPLY, "times": None})
    return {"entries": entries}


# ---------------------------------------------------------------- loss oracle

def _norm(v):
    return math.sqrt(sum(x * x for x in v))


def _cos(a, b):
    na, nb = _norm(a), _norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_batch_ce(queries, candidates, lam) -> float:
    """-1/B sum_i log( exp(lam cos(q_i, c_i)) / sum_j exp(lam cos(q_i, c_j)) )."""
    q = [list(map(float, r)) for r in queries]
    c = [list(map(float, r)) for r in candidates]
    B = len(q)
    total = 0.0
    for i in range(B):
        s = [lam * _cos(q[i], c[j]) for j in range(B)]
        m = max(s)
        denom = 0.0
        for j in range(B):
            denom += math.exp(s[j] - m)
        total += -(s[i] - m - math.log(denom))
    return total / B


def brute_sum_losses(U, V, X, Y, W, b, lam, omega):
    """Sum-merger losses from first principles: (bbc, cycle, total)."""
    B, d = len(U), len(b)

    def enc(x):
        return [sum(x[r] * W[r][k] for r in range(len(x))) + b[k] for k in range(d)]

    psi = [[U[i][k] + enc(X[i])[k] for k in range(d)] for i in range(B)]
    psi_hat = [[psi[i][k] + enc(Y[i])[k] for k in range(d)] for i in range(B)]
    l_bbc = brute_batch_ce(psi, V, lam)
    l_cyc = brute_batch_ce(psi_hat, U, lam)
    return l_bbc, l_cyc, omega * l_bbc + (1 - omega) * l_cyc


# ---------------------------------------------------------------- recall oracle

def brute_rank(scores, ids, target) -> int:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order].index(target) + 1


def brute_recall(ranks, k) -> float:
    hits = 0
    for r in ranks:
        if r <= k:
            hits += 1
    return hits / len(ranks)


# ---------------------------------------------------------------- gradient oracle

# Entries whose analytic and numeric values are both below this floor are
# compared absolutely: central differences cannot resolve relative error
# there (round-off is about 1e-16 * |L| / h).
FD_FLOOR = 1e-7


def gradient_fixture(seed, merger_kind="sum", B=4, d=8, d_raw=16):
    from posecpr.features import MergerParams, TextEncoderParams
    from posecpr.trainer import TrainBatch

    rng = np.random.default_rng(seed)
    batch = TrainBatch(
        rng.standard_normal((B, d)), rng.standard_normal((B, d)),
        rng.standard_normal((B, d_raw)), rng.standard_normal((B, d_raw)),
    )
    text = TextEncoderParams(rng.standard_normal((d_raw, d)) * 0.5, rng.standard_normal(d) * 0.1)
    if merger_kind == "sum":
        merger = MergerParams.sum()
    else:
        merger = MergerParams.combiner(d, rng, gate_bias=float(rng.normal()))
        merger.b1 = rng.standard_normal(2 * d) * 0.1
        merger.b2 = rng.standard_normal(d) * 0.1
    return batch, text, merger


def relu_pattern(batch, text, merger):
    """Sign pattern of every Combiner hidden pre-activation in both merges."""
    from posecpr.features import merge_forward

    if merger.kind != "combiner":
        return None
    T = batch.X @ text.projection + text.bias
    R = batch.Y @ text.projection + text.bias
    psi, c1 = merge_forward(batch.U, T, merger)
    _, c2 = merge_forward(psi, R, merger)
    return np.concatenate([(c1.pre > 0).ravel(), (c2.pre > 0).ravel()])


def fd_report(seed, phase, merger_kind, omega, lam=5.0, h=1e-4, cyclic=True):
    """Largest relative gap between analytic and central-difference gradients.

    Returns (worst, kinks). Where a +-h step moves a relu pre-activation across
    zero the loss is not differentiable on the stencil, so that entry alone is
    re-differenced with the step halved until the pattern holds; ``kinks``
    counts those entries.
    """
    from posecpr.trainer import TrainConfig, loss_and_gradients, loss_total

    batch, text, merger = gradient_fixture(seed, merger_kind)
    cfg = TrainConfig(lam=lam, omega=omega, phase=phase, cyclic=cyclic)
    _, grads = loss_and_gradients(batch, text, merger, cfg)
    if phase == "text":
        targets = [(text.projection, grads.projection), (text.bias, grads.bias)]
    else:
        targets = [(getattr(merger, n), grads.merger[n]) for n in merger.ARRAYS]
    worst, kinks = 0.0, 0

    def central(get, put, step):
        old = get()
        put(old + step)
        up, pat_up = loss_total(batch, text, merger, cfg), relu_pattern(batch, text, merger)
        put(old - step)
        down, pat_down = loss_total(batch, text, merger, cfg), relu_pattern(batch, text, merger)
        put(old)
        smooth = pat_up is None or np.array_equal(pat_up, pat_down)
        return (up - down) / (2 * step), smooth

    def check(get, put, analytic):
        nonlocal worst, kinks
        step = h
        num, smooth = central(get, put, step)
        if not smooth:
            kinks += 1
            while not smooth and step > 1e-9:
                step /= 2
                num, smooth = central(get, put, step)
        worst = max(worst, abs(analytic - num) / max(abs(analytic), abs(num), FD_FLOOR))

    for arr, g in targets:
        for idx in np.ndindex(arr.shape):
            check(lambda: arr[idx], lambda v: arr.__setitem__(idx, v), g[idx])
    if phase == "merger":
        check(lambda: merger.b_g, lambda v: setattr(merger, "b_g", v), grads.merger["b_g"])
    return worst, kinks


def max_fd_error(seed, phase, merger_kind, omega, lam=5.0, h=1e-4, cyclic=True):
    return fd_report(seed, phase, merger_kind, omega, lam, h, cyclic)[0]
