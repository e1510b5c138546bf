"""``posecpr`` command line: one binary, one subcommand per pipeline step.

A plain-text config file (``key = value`` lines, ``#`` comments) supplies
defaults for any flag; flags given on the command line win. Keys are flag
names with or without the leading dashes, e.g. ``lambda = 100``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .core import Orientation, load_manifest, parse_variants, read_image_index, save_manifest
from .dataset import PairSelectionConfig, filter_corpus, read_keypoints, scored_pairs, write_pairs
from .errors import (
    AuthError,
    CPRError,
    DecodeError,
    IncompleteRecord,
    MissingEmbedding,
    MissingReverse,
    NumericalError,
    ParseError,
    ShapeError,
    TransportError,
    ValidationError,
)
from .features import EmbeddingStore, MergerParams, encode_text, hash_encode_text, tokenize
from .gateway import Gateway, ResponseCache
from .mock_server import MockMLLM, MockScript
from .pipeline import Annotator, AnnotatorConfig, PairImage, PromptSet, read_pair_list, write_annotation_outputs
from .retrieval import DEFAULT_KS, TOGGLES, ablation_run, evaluate
from .synthetic import build_additive_world
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_curve

logger = logging.getLogger("posecpr")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64

_VALIDATION_ERRORS = (
    ValidationError, ParseError, ShapeError, MissingEmbedding, IncompleteRecord, MissingReverse, DecodeError,
)
_RUNTIME_ERRORS = (TransportError, AuthError, NumericalError, CPRError, OSError)

# never copied into the run-dir config snapshot
_SECRET_KEYS = {"api_key"}

STOPWORDS = frozenset(
    "a an and are as at be by for from her his in is it its of on or the their them then this to with "
    "while your you".split()
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config file

def read_config(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; keys are normalized to argparse dests."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(lineno, f"{path}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, values: Dict[str, str]) -> None:
    """Install config values as parser defaults, converted by each action's type."""
    for action in parser._actions:
        names = [action.dest] + [o.lstrip("-").replace("-", "_") for o in action.option_strings]
        hits = [n for n in names if n in values]
        if not hits or action.dest == "help":
            continue
        raw = values[hits[-1]]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            truthy = raw.lower() in ("1", "true", "yes", "on")
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValidationError([f"config {action.dest}: expected a boolean, got {raw!r}"])
            value = truthy if isinstance(action, argparse._StoreTrueAction) else not truthy
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (TypeError, ValueError) as exc:
                raise ValidationError([f"config {action.dest}: {exc}"]) from None
        else:
            value = raw
        parser.set_defaults(**{action.dest: value})
        action.required = False


# ---------------------------------------------------------------- arg types

def _range(text: str):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def _ks(text: str):
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def _variants(text: str):
    try:
        return parse_variants(text)
    except (KeyError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _toggles(text: str):
    items = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in items if t not in TOGGLES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown toggles {bad}; choose from {list(TOGGLES)}")
    return items


def _counts(text: str):
    return tuple(int(x) for x in text.split(",") if x.strip())


# ---------------------------------------------------------------- helpers

def _require(*paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise ValidationError([f"path does not exist: {p}" for p in missing])


def _run_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snap = {}
    for k, v in sorted(vars(args).items()):
        if k in _SECRET_KEYS or k == "func":
            continue
        if isinstance(v, tuple):
            v = [getattr(x, "value", x) for x in v]
        snap[k] = v
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return out


def _read_ids(path) -> List[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").split("\n") if line.strip()]


def _read_texts(path) -> List[tuple]:
    """``id<TAB>text`` lines; a line without a tab gets its 1-based line number as id."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        if "\t" in line:
            item_id, text = line.split("\t", 1)
        else:
            item_id, text = str(lineno), line
        out.append((item_id, text))
    return out


def _train_config(args, **over) -> TrainConfig:
    cfg = TrainConfig(
        lam=args.lam,
        omega=args.omega,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        phase=getattr(args, "phase", "text"),
        variants=args.variants,
        cyclic=not args.no_cyclic,
        d_raw=args.d_raw,
    )
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg.validate()


def _initial_params(args, store: EmbeddingStore):
    text, merger = None, None
    if getattr(args, "checkpoint", None):
        text, merger, _ = load_checkpoint(args.checkpoint)
    if getattr(args, "merger", "sum") == "combiner" and (merger is None or merger.kind != "combiner"):
        merger = MergerParams.combiner(store.dim, np.random.default_rng(args.seed))
    return text, merger


# ---------------------------------------------------------------- commands

def cmd_annotate(args) -> int:
    _require(args.pairs, args.images, args.prompts)
    pairs = read_pair_list(args.pairs)
    index = read_image_index(args.images)
    base = Path(args.images).parent

    def load_image(image_id: str) -> PairImage:
        if image_id not in index:
            raise DecodeError(f"{image_id}: not in image index")
        return PairImage.from_file(base / index[image_id])

    out = _run_dir(args)
    cache = ResponseCache(args.cache) if args.cache else ResponseCache(out / "cache.jsonl")
    cfg = AnnotatorConfig(
        model=args.model,
        paraphrase_count=args.paraphrases,
        use_stage1=not args.holistic,
    )
    with Gateway(args.url, args.api_key, cache, out / "requests.jsonl", max_concurrency=args.workers) as gw:
        annotator = Annotator(gw, cfg, PromptSet.load(args.prompts))
        result = annotator.annotate(pairs, load_image, args.paraphrases)
    write_annotation_outputs(result, out, args.dataset_name, args.paraphrases, index)
    print(
        f"annotated {len(result.records)} of {result.total} pairs, "
        f"{result.description_count} descriptions, drop rate {100 * result.drop_rate:.1f}%"
    )
    return EXIT_OK


def cmd_filter_env(args) -> int:
    _require(args.input, args.prompts)
    items = _read_texts(args.input)
    out = _run_dir(args)
    cache = ResponseCache(args.cache) if args.cache else ResponseCache(out / "cache.jsonl")
    with Gateway(args.url, args.api_key, cache, out / "requests.jsonl", max_concurrency=1) as gw:
        annotator = Annotator(gw, AnnotatorConfig(model=args.model), PromptSet.load(args.prompts))
        result = filter_corpus(items, annotator.filter_environment, out / "audit.jsonl")
    for name, rows in (("kept.tsv", result.kept), ("removed.tsv", result.removed)):
        (out / name).write_text("".join(f"{i}\t{t}\n" for i, t in rows), encoding="utf-8")
    print(f"kept {len(result.kept)}, removed {len(result.removed)}")
    return EXIT_OK


def cmd_pairs(args) -> int:
    _require(*args.keypoints)
    cfg = PairSelectionConfig(args.stride, args.range, args.min_confidence)
    out = _run_dir(args)
    selected = []
    for path in args.keypoints:
        frames = read_keypoints(path)
        selected += [(Path(path).stem, p) for p in scored_pairs(frames, cfg)]
    write_pairs(selected, out / "pairs.jsonl")
    print(f"selected {len(selected)} pairs from {len(args.keypoints)} sequences")
    return EXIT_OK


def cmd_embed(args) -> int:
    _require(args.input, args.checkpoint)
    items = _read_texts(args.input)
    out = _run_dir(args)
    if args.checkpoint:
        text, _, _ = load_checkpoint(args.checkpoint)
        store = EmbeddingStore(text.dim)
        for item_id, t in items:
            store.add(item_id, encode_text(t, text), Orientation.NORMAL)
    else:
        store = EmbeddingStore(args.d_raw)
        for item_id, t in items:
            store.add(item_id, hash_encode_text(t, args.d_raw), Orientation.NORMAL)
    path = store.save(out / "texts.emb")
    print(f"embedded {len(items)} texts (dim {store.dim}) into {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args.manifest, args.store, args.checkpoint)
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.load(args.store)
    cfg = _train_config(args)
    text, merger = _initial_params(args, store)
    out = _run_dir(args)
    result = train(manifest, store, cfg, text, merger)
    save_checkpoint(out / "model.ckpt", result.text, result.merger, cfg)
    write_loss_curve(result.loss_curve, out / "loss.tsv")
    final = f"{result.loss_curve[-1]:.6g}" if result.loss_curve else "n/a"
    print(f"trained {cfg.epochs} epochs (phase {cfg.phase}); final loss {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args.manifest, args.store, args.checkpoint, args.gallery)
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.load(args.store)
    text, merger, cfg = load_checkpoint(args.checkpoint)
    records = manifest.split(args.split)
    if not records:
        raise ValidationError([f"manifest has no {args.split!r} records"])
    out = _run_dir(args)
    report = evaluate(
        records, store, text, merger, _read_ids(args.gallery), args.ks, args.all_paraphrases,
        config=cfg.snapshot() if cfg else {},
    )
    report.write(out / "report.txt")
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    _require(args.manifest, args.store, args.gallery)
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.load(args.store)
    base = _train_config(args, phase="text")
    out = _run_dir(args)
    table = ablation_run(
        manifest, store, base, args.toggles, _read_ids(args.gallery), args.ks, args.paraphrase_counts
    )
    text = table.render()
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    rows = [
        {"label": r.label, "cyclic": r.cyclic, "variants": [v.value for v in r.variants],
         "paraphrase_count": r.paraphrase_count, "recall": {str(k): v for k, v in r.report.recalls.items()},
         "final_loss": r.final_loss}
        for r in table.rows
    ]
    (out / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def token_table(corpora: Dict[str, List[str]], top: int, keep_stopwords: bool = False) -> str:
    """Side-by-side top-``top`` token frequencies, one column block per corpus."""
    blocks = []
    for name, texts in corpora.items():
        counts = Counter(t for text in texts for t in tokenize(text) if keep_stopwords or t not in STOPWORDS)
        total = sum(counts.values()) or 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
        blocks.append((name, total, ranked))
    width = 24
    head = f"{'rank':>4}  " + "  ".join(f"{name[:width]:<{width}}" for name, _, _ in blocks)
    lines = [head, "-" * len(head)]
    for i in range(max((len(r) for _, _, r in blocks), default=0)):
        cells = []
        for _, total, ranked in blocks:
            if i < len(ranked):
                tok, n = ranked[i]
                cells.append(f"{tok[:12]:<12}{n:>6} {100 * n / total:4.1f}%"[:width].ljust(width))
            else:
                cells.append(" " * width)
        lines.append(f"{i + 1:>4}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def _corpus(path) -> List[str]:
    path = Path(path)
    if path.suffix == ".jsonl":
        manifest = load_manifest(path)
        return [d for r in manifest.records for ds in r.descriptions.values() for d in ds]
    return [t for _, t in _read_texts(path)]


def cmd_stats(args) -> int:
    _require(*args.inputs)
    corpora = {}
    for p in args.inputs:
        name = Path(p).stem
        while name in corpora:
            name += "'"
        corpora[name] = _corpus(p)
    text = token_table(corpora, args.top, args.keep_stopwords)
    out = _run_dir(args)
    (out / "tokens.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_mock_mllm(args) -> int:
    _require(args.script)
    script = MockScript.from_file(args.script)
    server = MockMLLM(script, args.host, args.port)
    print(server.url, flush=True)
    try:
        server.server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server.server_close()
    return EXIT_OK


def cmd_synth(args) -> int:
    world = build_additive_world(
        n_train=args.n_train, n_test=args.n_test, gallery_size=args.gallery_size, dim=args.dim,
        n_deltas=args.n_deltas, paraphrase_count=args.paraphrases, delta_scale=args.delta_scale,
        d_raw=args.d_raw, seed=args.seed,
    )
    out = _run_dir(args)
    save_manifest(world.manifest, out / "manifest.jsonl")
    world.store.save(out / "images.emb")
    (out / "gallery.txt").write_text("".join(g + "\n" for g in world.gallery_ids), encoding="utf-8")
    print(f"wrote {len(world.manifest.records)} records, {len(world.store)} embeddings to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_gateway_flags(p) -> None:
    p.add_argument("--url", default=None, help="chat-completions endpoint (default $CPR_MLLM_URL)")
    p.add_argument("--api-key", default=None, help="bearer token (default $CPR_MLLM_KEY)")
    p.add_argument("--model", default=AnnotatorConfig.model)
    p.add_argument("--cache", default=None, help="response cache file (default <out>/cache.jsonl)")
    p.add_argument("--prompts", default=None, help="directory of prompt templates")


def _add_train_flags(p) -> None:
    d = TrainConfig()
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--omega", type=float, default=d.omega)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--no-cyclic", action="store_true")
    p.add_argument("--variants", type=_variants, default=d.variants, help="e.g. orig,swap,mirror,swapmirror")
    p.add_argument("--d-raw", type=int, default=d.d_raw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posecpr", description="Composed pose retrieval toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="key = value defaults; flags override")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    # --config and -v are also accepted after the subcommand; SUPPRESS keeps
    # a value given before it from being reset by the subparser default
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value defaults; flags override")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    def add_command(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, parents=[common])

    p = add_command("annotate", help="generate variant descriptions through the MLLM")
    p.add_argument("--pairs", required=True, help="JSONL of {pair_id, ref_image, tgt_image, split}")
    p.add_argument("--images", required=True, help="image index TSV (id, path relative to it)")
    p.add_argument("--out", required=True)
    p.add_argument("--paraphrases", type=int, default=AnnotatorConfig.paraphrase_count)
    p.add_argument("--dataset-name", default="dataset")
    p.add_argument("--holistic", action="store_true", help="skip the body-part stage")
    p.add_argument("--workers", type=int, default=4)
    _add_gateway_flags(p)
    p.set_defaults(func=cmd_annotate)

    p = add_command("filter-env", help="drop descriptions that mention the environment")
    p.add_argument("--input", required=True, help="id<TAB>text lines")
    p.add_argument("--out", required=True)
    _add_gateway_flags(p)
    p.set_defaults(func=cmd_filter_env)

    d = PairSelectionConfig()
    p = add_command("pairs", help="select pose pairs from keypoint sequences")
    p.add_argument("keypoints", nargs="+", help="one keypoint JSONL file per sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=d.frame_stride)
    p.add_argument("--range", type=_range, default=d.distance_range, help="lo:hi pose distance window")
    p.add_argument("--min-confidence", type=float, default=d.min_confidence)
    p.set_defaults(func=cmd_pairs)

    p = add_command("embed", help="encode a text file with the hashing text encoder")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="apply a trained projection")
    p.add_argument("--d-raw", type=int, default=TrainConfig.d_raw)
    p.set_defaults(func=cmd_embed)

    p = add_command("train", help="train the text projection or the combiner")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phase", choices=("text", "merger"), default="text")
    p.add_argument("--merger", choices=("sum", "combiner"), default="sum")
    p.add_argument("--checkpoint", default=None, help="initial parameters")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = add_command("eval", help="rank a gallery and report Recall@k")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gallery", required=True, help="one image id per line")
    p.add_argument("--out", required=True)
    p.add_argument("--ks", type=_ks, default=DEFAULT_KS)
    p.add_argument("--split", default="test")
    p.add_argument("--all-paraphrases", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = add_command("ablate", help="train and evaluate one model per toggle combination")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--toggles", type=_toggles, default=TOGGLES)
    p.add_argument("--paraphrase-counts", type=_counts, default=(1, 3, 5))
    p.add_argument("--ks", type=_ks, default=DEFAULT_KS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = add_command("stats", help="token-frequency table per description corpus")
    p.add_argument("inputs", nargs="+", help="manifest .jsonl or id<TAB>text files")
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--keep-stopwords", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = add_command("mock-mllm", help="serve a scripted chat-completions endpoint")
    p.add_argument("--script", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_mock_mllm)

    p = add_command("synth", help="write the additive toy world")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--gallery-size", type=int, default=256)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-deltas", type=int, default=32)
    p.add_argument("--paraphrases", type=int, default=5)
    p.add_argument("--delta-scale", type=float, default=0.3)
    p.add_argument("--d-raw", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def _subparser(parser, name) -> Optional[argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre, _ = _prescan(argv)
        if pre.config:
            _require(pre.config)
            values = read_config(pre.config)
            if pre.command:
                sp = _subparser(parser, pre.command)
                if sp is not None:
                    _apply_config(sp, values)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _prescan(argv):
    """Find ``--config`` and the subcommand name without validating the rest."""
    pre = argparse.Namespace(config=None, command=None)
    names = {"annotate", "filter-env", "pairs", "embed", "train", "eval", "ablate", "stats", "mock-mllm", "synth"}
    it = iter(range(len(argv)))
    for i in it:
        a = argv[i]
        if a == "--config" and i + 1 < len(argv):
            pre.config = argv[i + 1]
            next(it, None)
        elif a.startswith("--config="):
            pre.config = a.split("=", 1)[1]
        elif a in names and pre.command is None:
            pre.command = a
    return pre, None


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
