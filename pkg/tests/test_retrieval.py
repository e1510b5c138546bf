import math

import numpy as np
import pytest

from posecpr.core import TripletRecord, VariantKind
from posecpr.errors import ShapeError, ValidationError
from posecpr.features import EmbeddingStore, MergerParams, TextEncoderParams, hash_encode_text
from posecpr.retrieval import (
    Query,
    ablation_run,
    cycle_consistency,
    evaluate,
    rank_gallery,
    recall_at_k,
)
from posecpr.synthetic import build_additive_world
from posecpr.trainer import TrainConfig

from helpers import _cos, brute_rank, brute_recall

ZERO_TEXT = TextEncoderParams(np.zeros((8, 4)), np.zeros(4))


# ---------------------------------------------------------------- rank_gallery

def q(vec, target="a"):
    return Query(np.asarray(vec, dtype=float), "", target)


def test_singleton_gallery():
    assert rank_gallery(q([1, 0, 0, 0]), [("only", np.array([0, 1.0, 0, 0]))], ZERO_TEXT, MergerParams.sum()) == ["only"]


def test_exact_match_first():
    gallery = [("x", np.array([0, 1.0, 0, 0])), ("y", np.array([2.0, 0, 0, 0])), ("z", np.array([0, 0, 1.0, 0]))]
    assert rank_gallery(q([1, 0, 0, 0]), gallery, ZERO_TEXT, MergerParams.sum())[0] == "y"


def test_ties_ordered_by_id():
    v = np.array([0.0, 1.0, 0.0, 0.0])
    gallery = [("b", v), ("a", v.copy()), ("c", -v)]
    assert rank_gallery(q([0, 1, 0, 0]), gallery, ZERO_TEXT, MergerParams.sum()) == ["a", "b", "c"]


def test_rank_gallery_errors():
    with pytest.raises(ValidationError):
        rank_gallery(q([1, 0, 0, 0]), [], ZERO_TEXT, MergerParams.sum())
    with pytest.raises(ShapeError):
        rank_gallery(q([1, 0, 0, 0]), [("a", np.zeros(3))], ZERO_TEXT, MergerParams.sum())


# ---------------------------------------------------------------- recall

def test_recall_examples():
    assert recall_at_k([1, 3, 7, 60], 5) == 0.5
    assert recall_at_k([1, 3, 7, 60], 60) == 1.0
    assert recall_at_k([1, 3, 7, 60], 1000) == 1.0


def test_recall_empty_warns(caplog):
    assert recall_at_k([], 5) == 0.0
    assert "empty" in caplog.text


# ---------------------------------------------------------------- evaluate

def identity_world(features: np.ndarray, gallery: np.ndarray, targets):
    """Zero text encoder + Sum merger: each composed query is its reference feature."""
    store = EmbeddingStore(features.shape[1])
    records = []
    for i, f in enumerate(features):
        store.add(f"q{i:03d}", f)
        records.append(TripletRecord(f"pair{i:03d}", f"q{i:03d}", targets[i], "test",
                                     {VariantKind.ORIGINAL: ("text",)}))
    ids = []
    for j, g in enumerate(gallery):
        store.add(f"g{j:03d}", g)
        ids.append(f"g{j:03d}")
    text = TextEncoderParams(np.zeros((16, features.shape[1])), np.zeros(features.shape[1]))
    return records, store, text, ids


def crafted_fixture(n_queries=100, gallery_size=60, dim=8, seed=0):
    """Random queries and gallery with exact duplicate vectors forcing ties."""
    rng = np.random.default_rng(seed)
    gallery = rng.standard_normal((gallery_size, dim))
    gallery[1::7] = gallery[0::7][: len(gallery[1::7])]  # duplicated rows tie
    queries = rng.standard_normal((n_queries, dim))
    targets = [f"g{int(rng.integers(gallery_size)):03d}" for _ in range(n_queries)]
    return queries, gallery, targets


def test_crafted_ranks_match_brute_force():
    queries, gallery, targets = crafted_fixture()
    records, store, text, ids = identity_world(queries, gallery, targets)
    report = evaluate(records, store, text, MergerParams.sum(), ids, ks=(1, 5, 10, 50))
    expect = []
    for qv, t in zip(queries.tolist(), targets):
        scores = [_cos(qv, g) for g in gallery.tolist()]
        expect.append(brute_rank(scores, ids, t))
    assert report.ranks == expect
    assert len(set(expect)) > 20  # ranks spread across the gallery
    for k in (1, 5, 10, 50):
        assert report.recalls[k] == brute_recall(expect, k)
    r = report.recalls
    assert r[1] <= r[5] <= r[10] <= r[50]


def test_identity_fixture_all_ones():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((20, 8))
    records, store, text, ids = identity_world(feats, feats, [f"g{i:03d}" for i in range(20)])
    report = evaluate(records, store, text, MergerParams.sum(), ids)
    assert report.ranks == [1] * 20
    assert all(v == 1.0 for v in report.recalls.values())


def test_chance_level():
    rng = np.random.default_rng(0)
    G, n = 256, 100
    gallery = rng.standard_normal((G, 64))
    queries = rng.standard_normal((n, 64))
    targets = [f"g{int(t):03d}" for t in rng.integers(G, size=n)]
    records, store, text, ids = identity_world(queries, gallery, targets)
    report = evaluate(records, store, text, MergerParams.sum(), ids, ks=(1, G))
    p = 1 / G
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(report.recalls[1] - p) <= 3 * sigma
    assert report.recalls[G] == 1.0


def test_evaluate_rejects_bad_gallery():
    feats = np.eye(4)
    records, store, text, ids = identity_world(feats, feats, ["g000", "g001", "g002", "g003"])
    with pytest.raises(ValidationError):
        evaluate(records, store, text, MergerParams.sum(), ids[:2])
    with pytest.raises(ValidationError):
        evaluate(records, store, text, MergerParams.sum(), ids + ids[:1])
    with pytest.raises(ValidationError):
        evaluate(records, store, text, MergerParams.sum(), [])


def test_report_is_deterministic(tmp_path):
    queries, gallery, targets = crafted_fixture(seed=3)
    records, store, text, ids = identity_world(queries, gallery, targets)
    paths = []
    for name in ("a", "b"):
        report = evaluate(records, store, text, MergerParams.sum(), ids, config={"seed": 0})
        paths.append(report.write(tmp_path / name / "report.txt"))
    for x, y in zip(*paths):
        assert x.read_bytes() == y.read_bytes()
    lines = paths[0][1].read_text().splitlines()
    assert len(lines) == 101 and '"rank"' in lines[0] and '"recall"' in lines[-1]


def test_all_paraphrases_averages():
    feats = np.eye(3)
    store = EmbeddingStore(3)
    for i in range(3):
        store.add(f"g{i}", feats[i])
    # text "b" pushes the query onto the wrong axis; "a" is neutral
    W = np.zeros((1024, 3))
    hb = hash_encode_text("b", 1024)
    bucket = np.flatnonzero(hb)[0]
    W[bucket] = np.array([0, 10.0, 0]) * hb[bucket]
    rec = TripletRecord("p", "g0", "g0", "test", {VariantKind.ORIGINAL: ("a", "b")})
    text = TextEncoderParams(W, np.zeros(3))
    first = evaluate([rec], store, text, MergerParams.sum(), ["g0", "g1", "g2"], ks=(1,))
    both = evaluate([rec], store, text, MergerParams.sum(), ["g0", "g1", "g2"], ks=(1,), all_paraphrases=True)
    assert first.recalls[1] == 1.0 and both.recalls[1] == 0.5


def test_cycle_consistency_identity():
    world = build_additive_world(n_train=8, n_test=4, gallery_size=8, dim=8, n_deltas=4, paraphrase_count=1, d_raw=256)
    text = TextEncoderParams(np.zeros((256, 8)), np.zeros(8))
    assert cycle_consistency(world.manifest.split("test"), world.store, text, MergerParams.sum()) == pytest.approx(1.0)


# ---------------------------------------------------------------- ablation

@pytest.fixture(scope="module")
def tiny_world():
    return build_additive_world(n_train=32, n_test=8, gallery_size=16, dim=8, n_deltas=4,
                                paraphrase_count=5, d_raw=256, seed=2)


def tiny_cfg():
    return TrainConfig(lam=20.0, batch_size=16, epochs=2, learning_rate=1e-2, d_raw=256)


def test_ablation_no_toggles_single_row(tiny_world):
    table = ablation_run(tiny_world.manifest, tiny_world.store, tiny_cfg(), [], tiny_world.gallery_ids)
    assert [r.label for r in table.rows] == ["full"]


def test_ablation_cyclic_and_variants(tiny_world):
    table = ablation_run(tiny_world.manifest, tiny_world.store, tiny_cfg(), ["cyclic", "variants"], tiny_world.gallery_ids)
    assert [r.label for r in table.rows] == ["full", "(-) Cyclic", "(-) SW & MI", "(-) Cyclic (-) SW & MI"]
    assert table.rows[2].variants == (VariantKind.ORIGINAL,)


def test_ablation_paraphrase_counts(tiny_world):
    table = ablation_run(tiny_world.manifest, tiny_world.store, tiny_cfg(), ["paraphrase"], tiny_world.gallery_ids)
    assert [r.paraphrase_count for r in table.rows] == [1, 3, 5]
    assert table.render().count("P=") == 3


def test_ablation_unknown_toggle(tiny_world):
    with pytest.raises(ValidationError):
        ablation_run(tiny_world.manifest, tiny_world.store, tiny_cfg(), ["lr"], tiny_world.gallery_ids)


def test_ablation_deterministic(tiny_world):
    a = ablation_run(tiny_world.manifest, tiny_world.store, tiny_cfg(), ["cyclic"], tiny_world.gallery_ids)
    b = ablation_run(tiny_world.manifest, tiny_world.store, tiny_cfg(), ["cyclic"], tiny_world.gallery_ids)
    assert a.render() == b.render()
    assert [r.final_loss for r in a.rows] == [r.final_loss for r in b.rows]

