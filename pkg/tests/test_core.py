import json

import pytest

from posecpr.core import (
    VARIANTS,
    Manifest,
    Orientation,
    TripletRecord,
    VariantKind,
    effective_roles,
    image_index_path,
    load_manifest,
    parse_variants,
    reverse_variant,
    save_manifest,
    validate_manifest,
)
from posecpr.errors import ParseError, ValidationError

N, F = Orientation.NORMAL, Orientation.FLIPPED


def record(pid="r1", ref="A", tgt="B", split="train", P=3, skip=()):
    descs = {v: tuple(f"{pid} {v.value} {p}" for p in range(P)) for v in VARIANTS if v not in skip}
    return TripletRecord(pid, ref, tgt, split, descs)


def manifest(*records, P=3):
    index = {}
    for r in records:
        index[r.ref_image] = f"img/{r.ref_image}.png"
        index[r.tgt_image] = f"img/{r.tgt_image}.png"
    return Manifest("toy", P, tuple(records), index)


def test_effective_roles_table():
    r = record()
    assert effective_roles(r, VariantKind.ORIGINAL) == (("A", N), ("B", N))
    assert effective_roles(r, VariantKind.SWAPPED) == (("B", N), ("A", N))
    assert effective_roles(r, VariantKind.MIRRORED) == (("A", F), ("B", F))
    assert effective_roles(r, VariantKind.SWAPPED_MIRRORED) == (("B", F), ("A", F))


def test_reverse_variant():
    assert reverse_variant(VariantKind.ORIGINAL) is VariantKind.SWAPPED
    assert reverse_variant(VariantKind.MIRRORED) is VariantKind.SWAPPED_MIRRORED
    for v in VARIANTS:
        assert reverse_variant(reverse_variant(v)) is v


def test_reverse_roles_exchange_slots():
    r = record()
    for v in VARIANTS:
        q, t = effective_roles(r, v)
        assert effective_roles(r, reverse_variant(v)) == (t, q)


def test_parse_variants_aliases_and_order():
    assert parse_variants("swapmirror,orig") == (VariantKind.ORIGINAL, VariantKind.SWAPPED_MIRRORED)
    assert parse_variants("orig,swap,mirror,swapmirror") == VARIANTS
    with pytest.raises(ValueError):
        parse_variants("sideways")


def test_empty_manifest_roundtrip(tmp_path):
    path = save_manifest(Manifest("empty", 3), tmp_path / "m.jsonl")
    m = load_manifest(path)
    assert m.records == () and m.paraphrase_count == 3


def test_minimal_complete_record(tmp_path):
    m = manifest(record())
    path = save_manifest(m, tmp_path / "m.jsonl")
    loaded = load_manifest(path)
    assert len(loaded.records) == 1
    assert loaded.records[0].is_complete(3)
    assert image_index_path(path).name == "m.images.tsv"


def test_roundtrip_is_byte_identical(tmp_path):
    m = manifest(record("r1", "A", "B"), record("r2", "C", "D", "test"))
    first = save_manifest(m, tmp_path / "a.jsonl").read_bytes()
    again = save_manifest(load_manifest(tmp_path / "a.jsonl"), tmp_path / "b.jsonl").read_bytes()
    assert first == again


def test_unicode_line_separators_roundtrip(tmp_path):
    # U+2028 and U+0085 are written raw inside JSON strings; only \n ends a line
    r = record()
    descs = dict(r.descriptions)
    descs[VariantKind.ORIGINAL] = ("lift\u2028arm", "bend\x85knee", "turn")
    m = manifest(TripletRecord("r1", "A", "B", "train", descs))
    loaded = load_manifest(save_manifest(m, tmp_path / "m.jsonl"))
    assert loaded == m


def test_missing_variant_names_pair_and_variant():
    m = manifest(record("r7", skip=(VariantKind.SWAPPED_MIRRORED,)))
    with pytest.raises(ValidationError) as exc:
        validate_manifest(m)
    text = str(exc.value)
    assert "r7" in text and "swapped_mirrored" in text


def test_drop_incomplete_keeps_complete_records():
    m = manifest(record("ok"), record("bad", "C", "D", skip=(VariantKind.MIRRORED,)))
    kept = validate_manifest(m, drop_incomplete=True)
    assert [r.pair_id for r in kept.records] == ["ok"]


def test_validation_lists_every_problem():
    bad = TripletRecord("x", "A", "Z", "val", {v: ("",) for v in VARIANTS})
    m = Manifest("toy", 1, (bad, bad), {"A": "a.png"})
    with pytest.raises(ValidationError) as exc:
        validate_manifest(m)
    probs = exc.value.problems
    assert any("duplicate" in p for p in probs)
    assert any("'Z'" in p for p in probs)
    assert any("split" in p for p in probs)
    assert any("empty" in p for p in probs)


def test_parse_error_carries_line_number(tmp_path):
    good = save_manifest(manifest(record()), tmp_path / "m.jsonl").read_text().splitlines()
    (tmp_path / "m.jsonl").write_text("\n".join(good + ["{not json"]) + "\n")
    with pytest.raises(ParseError) as exc:
        load_manifest(tmp_path / "m.jsonl")
    assert exc.value.line == 3


def test_with_paraphrase_count_truncates():
    m = manifest(record(P=5), P=5).with_paraphrase_count(1)
    assert m.paraphrase_count == 1
    assert all(len(d) == 1 for d in m.records[0].descriptions.values())


def test_canonical_field_order(tmp_path):
    path = save_manifest(manifest(record()), tmp_path / "m.jsonl")
    header, line = path.read_text().splitlines()
    assert list(json.loads(header)) == ["dataset_name", "paraphrase_count", "version"]
    obj = json.loads(line)
    assert list(obj) == ["pair_id", "ref_image", "tgt_image", "split", "descriptions"]
    assert list(obj["descriptions"]) == [v.value for v in VARIANTS]
