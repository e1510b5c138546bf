"""Pose-pair candidate selection from keypoint tracks and corpus filtering."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

# COCO-17 layout
COCO_LEFT_SHOULDER, COCO_RIGHT_SHOULDER = 5, 6
COCO_LEFT_HIP, COCO_RIGHT_HIP = 11, 12
MIN_QUALIFYING_JOINTS = 4


@dataclass(frozen=True)
class KeypointFrame:
    frame_index: int
    joints: np.ndarray  # (J, 3): x, y, confidence

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise ShapeError(f"joints must be (J, 3), got {joints.shape}")
        if np.any((joints[:, 2] < 0) | (joints[:, 2] > 1)):
            raise ValidationError([f"frame {self.frame_index}: confidence outside [0, 1]"])
        object.__setattr__(self, "joints", joints)

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class PairSelectionConfig:
    frame_stride: int = 15
    distance_range: Tuple[float, float] = (0.1, 2.0)
    min_confidence: float = 0.3

    def __post_init__(self):
        problems = []
        lo, hi = self.distance_range
        if not lo < hi:
            problems.append(f"distance range needs lo < hi, got [{lo}, {hi}]")
        if self.frame_stride < 1:
            problems.append(f"frame stride must be >= 1, got {self.frame_stride}")
        if problems:
            raise ValidationError(problems)


@dataclass(frozen=True)
class SkeletonLayout:
    shoulders: Tuple[int, int] = (COCO_LEFT_SHOULDER, COCO_RIGHT_SHOULDER)
    hips: Tuple[int, int] = (COCO_LEFT_HIP, COCO_RIGHT_HIP)


COCO17 = SkeletonLayout()


def _normalize(frame: KeypointFrame, layout: SkeletonLayout) -> np.ndarray:
    xy = frame.joints[:, :2]
    hip = xy[list(layout.hips)].mean(axis=0)
    shoulder = xy[list(layout.shoulders)].mean(axis=0)
    torso = float(np.linalg.norm(shoulder - hip))
    if torso == 0.0:
        return None
    return (xy - hip) / torso


def pose_distance(
    a: KeypointFrame,
    b: KeypointFrame,
    min_confidence: float = 0.3,
    layout: SkeletonLayout = COCO17,
) -> float:
    """Mean per-joint distance after hip-centering and torso-length scaling.

    Only joints confident in both frames count. Returns ``inf`` when fewer
    than four joints qualify, when a hip or shoulder anchor is below the
    confidence gate, or when a torso has zero length.
    """
    if a.joint_count != b.joint_count:
        raise ShapeError(f"joint counts differ: {a.joint_count} vs {b.joint_count}")
    anchors = list(layout.hips) + list(layout.shoulders)
    for f in (a, b):
        if np.any(f.joints[anchors, 2] < min_confidence):
            return math.inf
    mask = (a.joints[:, 2] >= min_confidence) & (b.joints[:, 2] >= min_confidence)
    if int(mask.sum()) < MIN_QUALIFYING_JOINTS:
        return math.inf
    na, nb = _normalize(a, layout), _normalize(b, layout)
    if na is None or nb is None:
        return math.inf
    return float(np.linalg.norm(na[mask] - nb[mask], axis=1).mean())


class ScoredPair(NamedTuple):
    frame_i: int
    frame_j: int
    distance: float


def stride_candidates(sequence: Sequence[KeypointFrame], stride: int) -> List[Tuple[KeypointFrame, KeypointFrame]]:
    """Consecutive kept frames ``(i, i + stride)`` counted from the first frame."""
    if not sequence:
        return []
    start = sequence[0].frame_index
    kept = [f for f in sequence if (f.frame_index - start) % stride == 0]
    return [
        (x, y) for x, y in zip(kept, kept[1:]) if y.frame_index - x.frame_index == stride
    ]


def scored_pairs(sequence: Sequence[KeypointFrame], cfg: PairSelectionConfig = PairSelectionConfig()) -> List[ScoredPair]:
    lo, hi = cfg.distance_range
    out = []
    for x, y in stride_candidates(sequence, cfg.frame_stride):
        d = pose_distance(x, y, cfg.min_confidence)
        if lo <= d <= hi:
            out.append(ScoredPair(x.frame_index, y.frame_index, d))
    return out


def select_pairs(sequence: Sequence[KeypointFrame], cfg: PairSelectionConfig = PairSelectionConfig()) -> List[Tuple[int, int]]:
    return [(p.frame_i, p.frame_j) for p in scored_pairs(sequence, cfg)]


def read_keypoints(path) -> List[KeypointFrame]:
    frames = []
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if line.strip():
            obj = json.loads(line)
            frames.append(KeypointFrame(int(obj["frame_index"]), np.asarray(obj["joints"], dtype=float)))
    frames.sort(key=lambda f: f.frame_index)
    counts = {f.joint_count for f in frames}
    if len(counts) > 1:
        raise ShapeError(f"{path}: joint count varies across frames: {sorted(counts)}")
    return frames


def write_pairs(pairs: Iterable[Tuple[str, ScoredPair]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq, p in pairs:
            fh.write(json.dumps({"sequence": seq, "frame_i": p.frame_i, "frame_j": p.frame_j, "distance": p.distance}) + "\n")


@dataclass
class FilterResult:
    kept: List[Tuple[str, str]]
    removed: List[Tuple[str, str]]


def filter_corpus(
    descriptions: Sequence[Tuple[str, str]],
    keep: Callable[[str], bool],
    audit_path=None,
) -> FilterResult:
    """Partition ``(id, text)`` items by the ``keep`` verdict.

    Every verdict is appended to ``audit_path`` as it is made; a rerun after
    an interruption reuses verdicts already in the audit file, so only the
    remaining items reach ``keep``.
    """
    done = {}
    audit = Path(audit_path) if audit_path is not None else None
    if audit is not None and audit.exists():
        for line in audit.read_text(encoding="utf-8").split("\n"):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue  # torn last line
            done[rec["id"]] = rec["keep"]
    kept, removed = [], []
    for item_id, text in descriptions:
        if item_id in done:
            verdict = done[item_id]
        else:
            verdict = bool(keep(text))
            if audit is not None:
                with open(audit, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"id": item_id, "keep": verdict, "text": text}) + "\n")
        (kept if verdict else removed).append((item_id, text))
    return FilterResult(kept, removed)
