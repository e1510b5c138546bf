"""Gallery ranking, Recall@k, and the ablation comparison harness."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Manifest, Orientation, TripletRecord, VariantKind
from .errors import ShapeError, ValidationError
from .features import (
    EmbeddingStore,
    MergerParams,
    TextEncoderParams,
    cosine,
    encode_text,
    hash_encode_batch,
    l2_normalize,
    merge,
    merge_forward,
)
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 50)


@dataclass(frozen=True)
class Query:
    reference: np.ndarray
    text: str
    target_id: str


def rank_gallery(
    query: Query,
    gallery: Sequence[Tuple[str, np.ndarray]],
    text: TextEncoderParams,
    merger: MergerParams,
) -> List[str]:
    """Gallery ids by descending cosine to the composed query; ties by ascending id."""
    if not gallery:
        raise ValidationError(["gallery is empty"])
    composed = merge(query.reference, encode_text(query.text, text), merger)
    ids = [g[0] for g in gallery]
    feats = np.asarray([g[1] for g in gallery], dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != composed.shape[0]:
        raise ShapeError(f"gallery features {feats.shape} vs query dim {composed.shape[0]}")
    scores = l2_normalize(feats) @ l2_normalize(composed)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order]


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if len(ranks) == 0:
        logger.warning("recall@%d over an empty rank list; returning 0", k)
        return 0.0
    return sum(1 for r in ranks if r <= k) / len(ranks)


@dataclass
class RetrievalReport:
    pair_ids: List[str]
    ranks: List[int]
    recalls: Dict[int, float]
    gallery_size: int
    config: dict = field(default_factory=dict)

    def table(self, title: str = "") -> str:
        ks = sorted(self.recalls)
        head = "".join(f"{'R@' + str(k):>9}" for k in ks)
        row = "".join(f"{100 * self.recalls[k]:9.2f}" for k in ks)
        lines = []
        if title:
            lines.append(title)
        lines.append(f"queries={len(self.ranks)} gallery={self.gallery_size}")
        lines.append(head)
        lines.append(row)
        return "\n".join(lines) + "\n"

    def sidecar(self) -> str:
        lines = [json.dumps({"pair_id": p, "rank": r}) for p, r in zip(self.pair_ids, self.ranks)]
        footer = {
            "recall": {str(k): self.recalls[k] for k in sorted(self.recalls)},
            "gallery_size": self.gallery_size,
            "config": self.config,
        }
        lines.append(json.dumps(footer, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> Tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.table(), encoding="utf-8")
        side = path.with_suffix(".jsonl")
        side.write_text(self.sidecar(), encoding="utf-8")
        return path, side


def _ranks(composed: np.ndarray, gallery: np.ndarray, gallery_ids: Sequence[str], targets: Sequence[str]) -> List[int]:
    """1-based rank of each target under (score desc, id asc) ordering."""
    pos = {g: i for i, g in enumerate(gallery_ids)}
    S = l2_normalize(composed) @ l2_normalize(gallery).T
    ids = np.asarray(gallery_ids)
    ranks = []
    for i, t in enumerate(targets):
        s = S[i]
        st = s[pos[t]]
        ahead = np.count_nonzero(s > st) + np.count_nonzero((s == st) & (ids < t))
        ranks.append(int(ahead) + 1)
    return ranks


def evaluate(
    records: Sequence[TripletRecord],
    store: EmbeddingStore,
    text: TextEncoderParams,
    merger: MergerParams,
    gallery_ids: Sequence[str],
    ks: Sequence[int] = DEFAULT_KS,
    all_paraphrases: bool = False,
    config: Optional[dict] = None,
) -> RetrievalReport:
    """One query per record: reference image plus its first original description.

    With ``all_paraphrases`` the recalls are averaged over every original
    description; the reported per-query ranks stay those of the first.
    """
    gallery_ids = list(gallery_ids)
    if not gallery_ids:
        raise ValidationError(["gallery is empty"])
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ValidationError(["gallery ids are not unique"])
    gallery_set = set(gallery_ids)
    missing = [r.pair_id for r in records if r.tgt_image not in gallery_set]
    if missing:
        raise ValidationError([f"{p}: ground-truth target not in gallery" for p in missing])
    gallery = store.matrix([(g, Orientation.NORMAL) for g in gallery_ids])
    refs = store.matrix([(r.ref_image, Orientation.NORMAL) for r in records]).reshape(len(records), store.dim)
    targets = [r.tgt_image for r in records]
    n_desc = min((len(r.descriptions[VariantKind.ORIGINAL]) for r in records), default=1)
    passes = range(n_desc) if all_paraphrases else range(1)

    all_ranks = []
    for p in passes:
        texts = [r.descriptions[VariantKind.ORIGINAL][p] for r in records]
        if records:
            T = hash_encode_batch(texts, text.d_raw) @ text.projection + text.bias
            composed, _ = merge_forward(refs, T, merger)
            all_ranks.append(_ranks(composed, gallery, gallery_ids, targets))
        else:
            all_ranks.append([])
    recalls = {int(k): float(np.mean([recall_at_k(r, k) for r in all_ranks])) for k in ks}
    return RetrievalReport(
        [r.pair_id for r in records], all_ranks[0], recalls, len(gallery_ids), dict(config or {})
    )


def cycle_consistency(
    records: Sequence[TripletRecord],
    store: EmbeddingStore,
    text: TextEncoderParams,
    merger: MergerParams,
) -> float:
    """Mean cosine between conjugated composed features and their references."""
    vals = []
    for r in records:
        u = store.get(r.ref_image)
        psi = merge(u, encode_text(r.descriptions[VariantKind.ORIGINAL][0], text), merger)
        psi_hat = merge(psi, encode_text(r.descriptions[VariantKind.SWAPPED][0], text), merger)
        vals.append(cosine(psi_hat, u))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------- ablation

TOGGLES = ("cyclic", "variants", "paraphrase")


@dataclass
class AblationRow:
    label: str
    cyclic: bool
    variants: Tuple[VariantKind, ...]
    paraphrase_count: int
    report: RetrievalReport
    final_loss: Optional[float]


@dataclass
class AblationTable:
    rows: List[AblationRow]

    def render(self) -> str:
        ks = sorted(self.rows[0].report.recalls) if self.rows else list(DEFAULT_KS)
        width = max([len(r.label) for r in self.rows] + [10])
        head = f"{'setting':<{width}}" + "".join(f"{'R@' + str(k):>9}" for k in ks)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.label:<{width}}" + "".join(f"{100 * r.report.recalls[k]:9.2f}" for k in ks)
            )
        return "\n".join(lines) + "\n"


def ablation_run(
    manifest: Manifest,
    store: EmbeddingStore,
    base: TrainConfig,
    toggles: Sequence[str],
    gallery_ids: Sequence[str],
    ks: Sequence[int] = DEFAULT_KS,
    paraphrase_counts: Sequence[int] = (1, 3, 5),
    text: Optional[TextEncoderParams] = None,
    merger: Optional[MergerParams] = None,
) -> AblationTable:
    """Train and evaluate one model per combination of the requested toggles.

    ``cyclic`` compares the cycle term on/off, ``variants`` compares the base
    variant set against original-only, ``paraphrase`` sweeps the number of
    descriptions kept per variant. All runs share ``base.seed``.
    """
    unknown = set(toggles) - set(TOGGLES)
    if unknown:
        raise ValidationError([f"unknown ablation toggle {t!r}" for t in sorted(unknown)])
    cyclic_opts = [base.cyclic, not base.cyclic] if "cyclic" in toggles else [base.cyclic]
    variant_opts = [base.variants]
    if "variants" in toggles:
        variant_opts.append((VariantKind.ORIGINAL,))
    if "paraphrase" in toggles:
        p_opts = [p for p in paraphrase_counts if 1 <= p <= manifest.paraphrase_count]
    else:
        p_opts = [manifest.paraphrase_count]

    test = manifest.split("test")
    rows = []
    for p, variants, cyclic in itertools.product(p_opts, variant_opts, cyclic_opts):
        cfg = replace(base, cyclic=cyclic, variants=variants)
        m = manifest if p == manifest.paraphrase_count else manifest.with_paraphrase_count(p)
        result = train(m, store, cfg, text, merger)
        report = evaluate(test, store, result.text, result.merger, gallery_ids, ks, config=cfg.snapshot())
        parts = []
        if cyclic != base.cyclic:
            parts.append("(-) Cyclic" if base.cyclic else "(+) Cyclic")
        if variants != base.variants:
            parts.append("(-) SW & MI")
        label = " ".join(parts) or "full"
        if "paraphrase" in toggles:
            label += f" P={p}"
        rows.append(AblationRow(
            label, cyclic, variants, p, report, result.loss_curve[-1] if result.loss_curve else None
        ))
    return AblationTable(rows)
