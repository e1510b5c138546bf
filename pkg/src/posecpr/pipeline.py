"""Three-stage MLLM annotation of pose pairs, plus the environment filter.

Stage I asks the MLLM for per-body-part movement sentences on a side-by-side
composite; Stage II turns those into ``P`` distinct paraphrased descriptions;
Stage III repeats both stages on the swapped, mirrored and swapped+mirrored
composites so every record carries four description sets.
"""
from __future__ import annotations

import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import (
    VARIANTS,
    Manifest,
    TripletRecord,
    VariantKind,
    save_manifest,
)
from .errors import DecodeError, PairDropped, StageFailure
from .gateway import ChatRequest, Gateway, Outcome, RetryPolicy

logger = logging.getLogger(__name__)

BODY_PARTS = (
    "head", "neck", "left shoulder", "right shoulder", "left arm", "right arm",
    "left elbow", "right elbow", "left wrist", "right wrist", "left hand",
    "right hand", "torso", "left hip", "right hip", "left leg", "right leg",
    "left knee", "right knee", "left ankle", "right ankle", "left foot",
    "right foot",
)

_NUMBER_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five",
    6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten",
}


# ---------------------------------------------------------------- images

@dataclass(frozen=True, eq=False)
class PairImage:
    """RGB raster, ``pixels`` shaped (height, width, 3), dtype uint8."""

    pixels: np.ndarray

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def __eq__(self, other):
        if not isinstance(other, PairImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "PairImage":
        try:
            with Image.open(io.BytesIO(data)) as im:
                im.load()
                return cls(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
        except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
            raise DecodeError(f"cannot decode image: {exc}") from None

    @classmethod
    def from_file(cls, path) -> "PairImage":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DecodeError(f"cannot read {path}: {exc}") from None
        return cls.from_bytes(data)

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()


def _scale_to_height(img: PairImage, height: int) -> np.ndarray:
    if img.height == height:
        return img.pixels
    width = max(1, round(img.width * height / img.height))
    pil = Image.fromarray(img.pixels, mode="RGB").resize((width, height), Image.BICUBIC)
    return np.asarray(pil, dtype=np.uint8)


def compose_side_by_side(
    ref: PairImage, tgt: PairImage, height: int = 512, gutter: int = 16
) -> PairImage:
    """Reference on the left, target on the right, white gutter between."""
    left = _scale_to_height(ref, height)
    right = _scale_to_height(tgt, height)
    sep = np.full((height, gutter, 3), 255, dtype=np.uint8)
    return PairImage(np.concatenate([left, sep, right], axis=1))


def mirror_image(img: PairImage) -> PairImage:
    return PairImage(img.pixels[:, ::-1].copy())


def variant_composite(
    ref: PairImage, tgt: PairImage, variant: VariantKind, height: int = 512, gutter: int = 16
) -> PairImage:
    """Composite shown to the MLLM for ``variant`` of the pair (ref, tgt)."""
    a, b = (tgt, ref) if variant.swapped else (ref, tgt)
    if variant.mirrored:
        a, b = mirror_image(a), mirror_image(b)
    return compose_side_by_side(a, b, height, gutter)


# ---------------------------------------------------------------- prompts

def number_word(n: int) -> str:
    return _NUMBER_WORDS.get(n, str(n))


@dataclass(frozen=True)
class PromptSet:
    environment_filter: str
    bodypart_deltas: str
    integrate: str
    holistic_description: str
    integrate_holistic: str

    @classmethod
    def load(cls, directory=None) -> "PromptSet":
        """Read templates from ``directory`` or the packaged defaults."""
        names = cls.__dataclass_fields__.keys()
        if directory is None:
            base = resources.files("posecpr") / "prompts"
            return cls(**{n: (base / f"{n}.txt").read_text(encoding="utf-8").rstrip("\n") for n in names})
        directory = Path(directory)
        return cls(**{n: (directory / f"{n}.txt").read_text(encoding="utf-8").rstrip("\n") for n in names})

    def render_filter(self, description: str) -> str:
        return self.environment_filter.replace("{description}", description)

    def render_integrate(self, deltas: Sequence["BodyPartDelta"], count: int) -> str:
        bullets = "\n".join(f"- {d.title()}: {d.sentence}" for d in deltas)
        return self.integrate.replace("{count}", number_word(count)).replace("{bullets}", bullets)

    def render_integrate_holistic(self, description: str, count: int) -> str:
        return self.integrate_holistic.replace("{count}", number_word(count)).replace(
            "{description}", description
        )


# ---------------------------------------------------------------- parsing

class ReplyFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BodyPartDelta:
    part: str
    sentence: str

    def __post_init__(self):
        if self.part not in BODY_PARTS:
            raise ValueError(f"unknown body part {self.part!r}")
        if not self.sentence.strip():
            raise ValueError("empty sentence")

    def title(self) -> str:
        return self.part.title()


_DELTA_LINE = re.compile(r"^(\d+)[.)]\s*([A-Za-z][A-Za-z ]*?)\s*:\s*(.+)$")
_DESC_LINE = re.compile(r"^description\s*(\d+)\s*:\s*(.+)$", re.IGNORECASE)
_HOLISTIC_LINE = re.compile(r"^description\s*:\s*(.+)$", re.IGNORECASE)


def _clean_line(line: str) -> str:
    line = line.strip().replace("**", "")
    if len(line) >= 2 and line[0] == line[-1] and line[0] in "\"'":
        line = line[1:-1].strip()
    return line


def _clean_sentence(text: str) -> str:
    text = text.strip().strip("\"“”").strip()
    if text.endswith(".\"") or text.endswith(".”"):
        text = text[:-1]
    return text


def parse_bodypart_reply(text: str) -> List[BodyPartDelta]:
    """Parse ``N. <Part>: <sentence>`` lines; any other non-blank line is an error."""
    deltas = []
    seen = set()
    for raw in text.splitlines():
        line = _clean_line(raw)
        if not line:
            continue
        m = _DELTA_LINE.match(line)
        if m is None:
            raise ReplyFormatError(f"unparseable line {raw!r}")
        part = " ".join(m.group(2).lower().split())
        if part not in BODY_PARTS:
            raise ReplyFormatError(f"unknown body part {m.group(2)!r}")
        if part in seen:
            raise ReplyFormatError(f"body part {part!r} listed twice")
        sentence = _clean_sentence(m.group(3))
        if not sentence:
            raise ReplyFormatError(f"empty sentence for {part!r}")
        if sentence[-1] not in ".!?":
            sentence += "."
        seen.add(part)
        deltas.append(BodyPartDelta(part, sentence))
    if not deltas:
        raise ReplyFormatError("no body-part lines in reply")
    return deltas


def parse_holistic_reply(text: str) -> str:
    found = []
    for raw in text.splitlines():
        line = _clean_line(raw)
        if not line:
            continue
        m = _HOLISTIC_LINE.match(line)
        if m is None:
            raise ReplyFormatError(f"unparseable line {raw!r}")
        found.append(_clean_sentence(m.group(1)))
    if len(found) != 1 or not found[0]:
        raise ReplyFormatError(f"expected one description, got {len(found)}")
    return found[0]


def parse_descriptions(text: str, count: int) -> List[str]:
    """Parse ``Description N: ...`` lines and keep the first ``count``.

    Raises ReplyFormatError on stray lines, on fewer than ``count``
    descriptions, or when the kept descriptions are not distinct.
    """
    found = []
    for raw in text.splitlines():
        line = _clean_line(raw)
        if not line:
            continue
        m = _DESC_LINE.match(line)
        if m is None:
            raise ReplyFormatError(f"unparseable line {raw!r}")
        desc = _clean_sentence(m.group(2))
        if not desc:
            raise ReplyFormatError(f"empty description {m.group(1)}")
        found.append(desc)
    if len(found) < count:
        raise ReplyFormatError(f"{len(found)} descriptions, need {count}")
    if len(found) > count:
        logger.info("truncating %d descriptions to %d", len(found), count)
    kept = found[:count]
    if len(set(kept)) != len(kept):
        raise ReplyFormatError("descriptions are not distinct")
    return kept


def parse_yes_no(text: str) -> Optional[bool]:
    """``True`` for yes, ``False`` for no, ``None`` when ambiguous."""
    word = text.strip().strip("\"'“”").strip().rstrip(".!").strip().lower()
    if word == "yes":
        return True
    if word == "no":
        return False
    return None


# ---------------------------------------------------------------- annotator

@dataclass
class AnnotatorConfig:
    model: str = "gpt-4o-2024-08-06"
    paraphrase_count: int = 3
    stage1_temperature: float = 0.2
    stage2_temperature: float = 1.0
    filter_temperature: float = 0.2
    max_tokens: int = 1024
    attempt_budget: int = 3
    composite_height: int = 512
    gutter: int = 16
    use_stage1: bool = True
    retry: RetryPolicy = field(default_factory=RetryPolicy)


@dataclass
class AnnotationResult:
    records: List[TripletRecord]
    drops: List[PairDropped]

    @property
    def total(self) -> int:
        return len(self.records) + len(self.drops)

    @property
    def drop_rate(self) -> float:
        return len(self.drops) / self.total if self.total else 0.0

    @property
    def description_count(self) -> int:
        return sum(len(d) for r in self.records for d in r.descriptions.values())


def _accepting(parse: Callable[[str], object]) -> Callable[[str], bool]:
    def accept(text: str) -> bool:
        try:
            parse(text)
        except ReplyFormatError as exc:
            logger.info("rejecting reply: %s", exc)
            return False
        return True

    return accept


class Annotator:
    def __init__(
        self,
        gateway: Gateway,
        config: Optional[AnnotatorConfig] = None,
        prompts: Optional[PromptSet] = None,
    ):
        self.gateway = gateway
        self.config = config or AnnotatorConfig()
        self.prompts = prompts or PromptSet.load()

    def _ask(self, pair_id: str, stage: int, tag: str, request: ChatRequest, parse):
        """Run one stage with the attempt budget; return the parsed reply."""
        accept = _accepting(parse)
        last = "no attempts"
        for _ in range(self.config.attempt_budget):
            resp = self.gateway.complete(request, self.config.retry, tag=tag, accept=accept)
            if resp.outcome is Outcome.REFUSAL:
                raise StageFailure(pair_id, stage, f"refusal: {resp.text[:80]!r}")
            if resp.ok:
                return parse(resp.text)
            last = f"{resp.outcome.value} reply {resp.text[:80]!r}"
        raise StageFailure(pair_id, stage, f"attempt budget exhausted; last {last}")

    def stage1_bodypart_deltas(
        self, pair: PairImage, pair_id: str = "", variant: VariantKind = VariantKind.ORIGINAL
    ) -> List[BodyPartDelta]:
        cfg = self.config
        request = ChatRequest.user(
            cfg.model, self.prompts.bodypart_deltas, [pair.to_png()],
            cfg.stage1_temperature, cfg.max_tokens,
        )
        return self._ask(pair_id, 1, f"{pair_id}/{variant.value}/1", request, parse_bodypart_reply)

    def stage1_holistic(
        self, pair: PairImage, pair_id: str = "", variant: VariantKind = VariantKind.ORIGINAL
    ) -> str:
        cfg = self.config
        request = ChatRequest.user(
            cfg.model, self.prompts.holistic_description, [pair.to_png()],
            cfg.stage1_temperature, cfg.max_tokens,
        )
        return self._ask(pair_id, 1, f"{pair_id}/{variant.value}/1", request, parse_holistic_reply)

    def stage2_integrate(
        self,
        deltas: Sequence[BodyPartDelta],
        count: Optional[int] = None,
        pair_id: str = "",
        variant: VariantKind = VariantKind.ORIGINAL,
    ) -> List[str]:
        count = count or self.config.paraphrase_count
        if not deltas:
            raise ValueError("stage 2 needs at least one body-part delta")
        cfg = self.config
        request = ChatRequest.user(
            cfg.model, self.prompts.render_integrate(deltas, count), (),
            cfg.stage2_temperature, cfg.max_tokens,
        )
        return self._ask(
            pair_id, 2, f"{pair_id}/{variant.value}/2", request,
            lambda t: parse_descriptions(t, count),
        )

    def stage2_integrate_holistic(
        self, description: str, count: int, pair_id: str = "",
        variant: VariantKind = VariantKind.ORIGINAL,
    ) -> List[str]:
        cfg = self.config
        request = ChatRequest.user(
            cfg.model, self.prompts.render_integrate_holistic(description, count), (),
            cfg.stage2_temperature, cfg.max_tokens,
        )
        return self._ask(
            pair_id, 2, f"{pair_id}/{variant.value}/2", request,
            lambda t: parse_descriptions(t, count),
        )

    def describe(self, composite: PairImage, count: int, pair_id: str, variant: VariantKind) -> List[str]:
        if self.config.use_stage1:
            deltas = self.stage1_bodypart_deltas(composite, pair_id, variant)
            return self.stage2_integrate(deltas, count, pair_id, variant)
        holistic = self.stage1_holistic(composite, pair_id, variant)
        return self.stage2_integrate_holistic(holistic, count, pair_id, variant)

    def generate_for_pair(
        self, record: TripletRecord, ref: PairImage, tgt: PairImage, count: Optional[int] = None
    ) -> TripletRecord:
        """Fill all four variant slots of ``record``; raise PairDropped on any failure."""
        count = count or self.config.paraphrase_count
        descriptions: Dict[VariantKind, Tuple[str, ...]] = {}
        for variant in VARIANTS:
            composite = variant_composite(
                ref, tgt, variant, self.config.composite_height, self.config.gutter
            )
            try:
                descriptions[variant] = tuple(self.describe(composite, count, record.pair_id, variant))
            except StageFailure as exc:
                raise PairDropped(record.pair_id, exc.stage, variant.value, exc.reason) from exc
        return TripletRecord(record.pair_id, record.ref_image, record.tgt_image, record.split, descriptions)

    def annotate(
        self,
        pairs: Sequence[TripletRecord],
        load_image: Callable[[str], PairImage],
        count: Optional[int] = None,
    ) -> AnnotationResult:
        """Annotate ``pairs`` with bounded parallelism; output keeps input order."""

        def work(rec: TripletRecord):
            try:
                ref, tgt = load_image(rec.ref_image), load_image(rec.tgt_image)
            except DecodeError as exc:
                return PairDropped(rec.pair_id, 0, "-", str(exc))
            try:
                return self.generate_for_pair(rec, ref, tgt, count)
            except PairDropped as exc:
                logger.warning("%s", exc)
                return exc

        workers = self.gateway.max_concurrency
        if workers == 1:
            outcomes = [work(r) for r in pairs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(work, pairs))
        records = [o for o in outcomes if isinstance(o, TripletRecord)]
        drops = [o for o in outcomes if isinstance(o, PairDropped)]
        return AnnotationResult(records, drops)

    def filter_environment(self, description: str) -> bool:
        """Return keep=True unless the MLLM flags an environment reference.

        Ambiguous replies are retried; if the budget runs out the description
        is dropped (keep=False).
        """
        cfg = self.config
        request = ChatRequest.user(
            cfg.model, self.prompts.render_filter(description), (),
            cfg.filter_temperature, cfg.max_tokens,
        )
        accept = lambda t: parse_yes_no(t) is not None  # noqa: E731
        for _ in range(cfg.attempt_budget):
            resp = self.gateway.complete(request, cfg.retry, tag="filter", accept=accept)
            if resp.ok:
                return not parse_yes_no(resp.text)
            if resp.outcome is Outcome.REFUSAL:
                break
        logger.warning("ambiguous environment-filter verdict for %r; dropping", description[:60])
        return False


def write_drop_report(result: AnnotationResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["pair_id\tstage\tvariant\treason"]
    for d in result.drops:
        reason = " ".join(d.reason.split())
        lines.append(f"{d.pair_id}\t{d.stage}\t{d.variant}\t{reason}")
    lines.append(
        f"# dropped {len(result.drops)} of {result.total} pairs (rate {100 * result.drop_rate:.1f}%)"
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_pair_list(path) -> List[TripletRecord]:
    """Read un-annotated pairs, one JSON object per line."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(
            TripletRecord(obj["pair_id"], obj["ref_image"], obj["tgt_image"], obj.get("split", "train"))
        )
    return out


def result_manifest(
    result: AnnotationResult, dataset_name: str, count: int, image_index: Mapping[str, str]
) -> Manifest:
    used = {i for r in result.records for i in (r.ref_image, r.tgt_image)}
    index = {k: v for k, v in image_index.items() if k in used}
    return Manifest(dataset_name, count, tuple(result.records), index)


def write_annotation_outputs(
    result: AnnotationResult,
    out_dir,
    dataset_name: str,
    count: int,
    image_index: Mapping[str, str],
) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    manifest = result_manifest(result, dataset_name, count, image_index)
    mpath = save_manifest(manifest, out_dir / "manifest.jsonl")
    rpath = write_drop_report(result, out_dir / "drops.tsv")
    return mpath, rpath
