"""Shared data model: pose-pair records, variants, and manifest files.

A manifest is a line-delimited JSON file. Line 1 is a header
``{"dataset_name", "paraphrase_count", "version"}``; every further line is
one record with fields in canonical order. The image index lives in a
sibling ``<stem>.images.tsv`` file (``id<TAB>relative path`` per line).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import ParseError, ValidationError

MANIFEST_VERSION = 1
SPLITS = ("train", "test")


class VariantKind(str, enum.Enum):
    ORIGINAL = "original"
    SWAPPED = "swapped"
    MIRRORED = "mirrored"
    SWAPPED_MIRRORED = "swapped_mirrored"

    @property
    def swapped(self) -> bool:
        return self in (VariantKind.SWAPPED, VariantKind.SWAPPED_MIRRORED)

    @property
    def mirrored(self) -> bool:
        return self in (VariantKind.MIRRORED, VariantKind.SWAPPED_MIRRORED)

    @classmethod
    def from_flags(cls, swapped: bool, mirrored: bool) -> "VariantKind":
        if swapped and mirrored:
            return cls.SWAPPED_MIRRORED
        if swapped:
            return cls.SWAPPED
        if mirrored:
            return cls.MIRRORED
        return cls.ORIGINAL


# Canonical serialization order.
VARIANTS: Tuple[VariantKind, ...] = tuple(VariantKind)

VARIANT_ALIASES = {
    "orig": VariantKind.ORIGINAL,
    "original": VariantKind.ORIGINAL,
    "swap": VariantKind.SWAPPED,
    "swapped": VariantKind.SWAPPED,
    "mirror": VariantKind.MIRRORED,
    "mirrored": VariantKind.MIRRORED,
    "swapmirror": VariantKind.SWAPPED_MIRRORED,
    "swapped_mirrored": VariantKind.SWAPPED_MIRRORED,
}


def parse_variants(text: str) -> Tuple[VariantKind, ...]:
    """Parse a comma list such as ``orig,swap,mirror,swapmirror``."""
    out = []
    for name in text.split(","):
        name = name.strip().lower()
        if not name:
            continue
        if name not in VARIANT_ALIASES:
            raise ValueError(f"unknown variant {name!r}")
        v = VARIANT_ALIASES[name]
        if v not in out:
            out.append(v)
    return tuple(sorted(out, key=VARIANTS.index))


class Orientation(str, enum.Enum):
    NORMAL = "normal"
    FLIPPED = "flipped"


ImageKey = Tuple[str, Orientation]


def reverse_variant(variant: VariantKind) -> VariantKind:
    """Variant describing the opposite transition of ``variant``."""
    return VariantKind.from_flags(not variant.swapped, variant.mirrored)


@dataclass(frozen=True)
class TripletRecord:
    pair_id: str
    ref_image: str
    tgt_image: str
    split: str = "train"
    descriptions: Mapping[VariantKind, Tuple[str, ...]] = field(default_factory=dict)

    def is_complete(self, paraphrase_count: int) -> bool:
        return all(
            len(self.descriptions.get(v, ())) == paraphrase_count for v in VARIANTS
        )

    def to_json(self) -> dict:
        descs = {
            v.value: list(self.descriptions[v]) for v in VARIANTS if v in self.descriptions
        }
        return {
            "pair_id": self.pair_id,
            "ref_image": self.ref_image,
            "tgt_image": self.tgt_image,
            "split": self.split,
            "descriptions": descs,
        }


def effective_roles(record: TripletRecord, variant: VariantKind) -> Tuple[ImageKey, ImageKey]:
    """Return ``(query, target)`` image keys that ``variant`` of ``record`` describes."""
    orient = Orientation.FLIPPED if variant.mirrored else Orientation.NORMAL
    query, target = record.ref_image, record.tgt_image
    if variant.swapped:
        query, target = target, query
    return (query, orient), (target, orient)


@dataclass(frozen=True)
class Manifest:
    dataset_name: str
    paraphrase_count: int
    records: Tuple[TripletRecord, ...] = ()
    image_index: Mapping[str, str] = field(default_factory=dict)

    def split(self, name: str) -> List[TripletRecord]:
        return [r for r in self.records if r.split == name]

    def header(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "paraphrase_count": self.paraphrase_count,
            "version": MANIFEST_VERSION,
        }

    def with_paraphrase_count(self, count: int) -> "Manifest":
        """Keep only the first ``count`` descriptions of every variant."""
        if not 1 <= count <= self.paraphrase_count:
            raise ValueError(
                f"paraphrase count {count} outside 1..{self.paraphrase_count}"
            )
        records = tuple(
            TripletRecord(
                r.pair_id,
                r.ref_image,
                r.tgt_image,
                r.split,
                {v: tuple(d[:count]) for v, d in r.descriptions.items()},
            )
            for r in self.records
        )
        return Manifest(self.dataset_name, count, records, dict(self.image_index))


def validate_record(record: TripletRecord, paraphrase_count: int) -> List[str]:
    problems = []
    pid = record.pair_id
    if not pid:
        problems.append("empty pair_id")
    if record.split not in SPLITS:
        problems.append(f"{pid}: split {record.split!r} not in {SPLITS}")
    for v in VARIANTS:
        descs = record.descriptions.get(v)
        if descs is None:
            problems.append(f"{pid}: missing variant {v.value}")
            continue
        if len(descs) != paraphrase_count:
            problems.append(
                f"{pid}: variant {v.value} has {len(descs)} descriptions, expected {paraphrase_count}"
            )
        for i, text in enumerate(descs):
            if not isinstance(text, str) or not text.strip():
                problems.append(f"{pid}: variant {v.value} description {i} is empty")
            elif "\n" in text or "\r" in text:
                problems.append(f"{pid}: variant {v.value} description {i} has a line break")
    return problems


def _incompleteness_only(problems: Iterable[str]) -> bool:
    return all(
        "missing variant" in p or "descriptions, expected" in p for p in problems
    )


def validate_manifest(manifest: Manifest, drop_incomplete: bool = False) -> Manifest:
    """Check every manifest invariant; raise ValidationError listing all violations.

    With ``drop_incomplete`` set, records whose only defect is a missing
    variant or a short description list are removed instead of reported.
    """
    problems = []
    if manifest.paraphrase_count < 1:
        problems.append(f"paraphrase_count must be positive, got {manifest.paraphrase_count}")
    kept = []
    seen = set()
    for rec in manifest.records:
        if rec.pair_id in seen:
            problems.append(f"duplicate pair_id {rec.pair_id}")
        seen.add(rec.pair_id)
        for img in (rec.ref_image, rec.tgt_image):
            if img not in manifest.image_index:
                problems.append(f"{rec.pair_id}: image {img!r} not in image index")
        rec_problems = validate_record(rec, manifest.paraphrase_count)
        if rec_problems and drop_incomplete and _incompleteness_only(rec_problems):
            continue
        problems.extend(rec_problems)
        kept.append(rec)
    if problems:
        raise ValidationError(problems)
    if len(kept) == len(manifest.records):
        return manifest
    return Manifest(
        manifest.dataset_name, manifest.paraphrase_count, tuple(kept), manifest.image_index
    )


def image_index_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".images.tsv")


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def dumps_manifest(manifest: Manifest) -> str:
    lines = [_dumps(manifest.header())]
    lines.extend(_dumps(r.to_json()) for r in manifest.records)
    return "\n".join(lines) + "\n"


def dumps_image_index(index: Mapping[str, str]) -> str:
    return "".join(f"{k}\t{v}\n" for k, v in index.items())


def save_manifest(manifest: Manifest, path) -> Path:
    """Write ``manifest`` and its sibling image index in canonical form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")
    image_index_path(path).write_text(dumps_image_index(manifest.image_index), encoding="utf-8")
    return path


def _parse_record(obj, lineno: int) -> TripletRecord:
    if not isinstance(obj, dict):
        raise ParseError(lineno, "record is not an object")
    for key in ("pair_id", "ref_image", "tgt_image", "split", "descriptions"):
        if key not in obj:
            raise ParseError(lineno, f"missing field {key!r}")
    for key in ("pair_id", "ref_image", "tgt_image", "split"):
        if not isinstance(obj[key], str):
            raise ParseError(lineno, f"field {key!r} must be a string")
    raw = obj["descriptions"]
    if not isinstance(raw, dict):
        raise ParseError(lineno, "descriptions must be an object")
    descs = {}
    for name, texts in raw.items():
        try:
            variant = VariantKind(name)
        except ValueError:
            raise ParseError(lineno, f"unknown variant {name!r}") from None
        if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
            raise ParseError(lineno, f"descriptions[{name!r}] must be a list of strings")
        descs[variant] = tuple(texts)
    return TripletRecord(obj["pair_id"], obj["ref_image"], obj["tgt_image"], obj["split"], descs)


def read_image_index(path) -> Dict[str, str]:
    index: Dict[str, str] = {}
    path = Path(path)
    if not path.exists():
        return index
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(lineno, f"{path.name}: expected 'id<TAB>path'")
        index[parts[0]] = parts[1]
    return index


def load_manifest(path, drop_incomplete: bool = False) -> Manifest:
    """Load and validate a manifest file plus its sibling image index."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not text.strip():
        raise ParseError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"bad header: {exc.msg}") from None
    if not isinstance(header, dict) or "paraphrase_count" not in header:
        raise ParseError(1, "header must carry dataset_name and paraphrase_count")
    if header.get("version") != MANIFEST_VERSION:
        raise ParseError(1, f"unsupported version {header.get('version')!r}")
    pcount = header["paraphrase_count"]
    if not isinstance(pcount, int) or isinstance(pcount, bool):
        raise ParseError(1, "paraphrase_count must be an integer")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, exc.msg) from None
        records.append(_parse_record(obj, lineno))
    manifest = Manifest(
        str(header.get("dataset_name", "")),
        pcount,
        tuple(records),
        read_image_index(image_index_path(path)),
    )
    return validate_manifest(manifest, drop_incomplete=drop_incomplete)


def complete_record(
    pair_id: str,
    ref_image: str,
    tgt_image: str,
    descriptions: Mapping[VariantKind, Iterable[str]],
    split: str = "train",
) -> TripletRecord:
    return TripletRecord(
        pair_id, ref_image, tgt_image, split, {v: tuple(descriptions[v]) for v in VARIANTS}
    )


def manifest_from_records(
    name: str,
    paraphrase_count: int,
    records: Iterable[TripletRecord],
    image_index: Optional[Mapping[str, str]] = None,
) -> Manifest:
    records = tuple(records)
    if image_index is None:
        image_index = {}
        for r in records:
            for img in (r.ref_image, r.tgt_image):
                image_index.setdefault(img, f"{img}.png")
    return validate_manifest(Manifest(name, paraphrase_count, records, dict(image_index)))
