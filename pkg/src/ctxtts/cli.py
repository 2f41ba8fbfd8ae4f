"""Command-line entry points.

Run directory layout::

    ROOT/data/{spec.json,train.jsonl,test.jsonl,stats.json}   (+ .feats archives)
    ROOT/runs/NAME/{config.cfg,model.ckpt,train_log.jsonl}
    ROOT/runs/NAME/synth/OUT.{feats,jsonl,log}
    ROOT/runs/NAME/scores.tsv
    ROOT/ablate/SUITE/{report.tsv,RUN_ID/...}
    ROOT/plots/NAME.{png,tsv,json}

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint
from .corpus import (CorpusManifest, GeneratorSpec, compute_all_speaker_stats, default_held_out,
                     generate_synthetic_corpus, read_manifest, split_corpus, write_manifest)
from .errors import InvalidInputError, TrainingDivergedError
from .inference import (ContextOverride, borrowed_context, read_outputs, sample_random_contexts,
                        synthesize_book, synthesize_with_context, write_outputs)
from .metrics import ProsodyScores, evaluate_run, train_speaker_classifier, write_scores_table
from .model import ModelConfig
from .training import TrainConfig, ablation_matrix, build_bundle, train

logger = logging.getLogger("ctxtts")

MODALITIES = {
    "none": (False, "none"),
    "ace": (True, "none"),
    "nakata": (False, "implicit"),
    "tce-pre": (False, "pre"),
    "tce-suc": (False, "suc"),
    "tce-bi": (False, "bi"),
    "atce-pre": (True, "pre"),
    "atce-suc": (True, "suc"),
    "atce-bi": (True, "bi"),
}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        low = raw.lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return raw


def read_config(path) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; values are JSON when they parse."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def write_config(path, values: Dict[str, object]) -> None:
    lines = [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"n_phonemes", "n_speakers", "mel_bins", "gst", "tce"}
_TCE_KEYS = {"k", "mode", "gru_hidden", "attention_dim", "implicit_n_sentences"}


def split_config(values: Dict[str, object]):
    """Route flat config keys to (train kwargs, model kwargs, tce kwargs, modality)."""
    train_kw, model_kw, tce_kw = {}, {}, {}
    modality = None
    for key, value in values.items():
        if key == "modality":
            modality = str(value)
        elif key in _TRAIN_KEYS:
            train_kw[key] = value
        elif key in _TCE_KEYS:
            tce_kw[key] = value
        elif key in _MODEL_KEYS:
            model_kw[key] = tuple(value) if isinstance(value, list) else value
        else:
            raise UsageError(f"unknown config key {key!r}")
    return train_kw, model_kw, tce_kw, modality


# ---------------------------------------------------------------------------
# helpers


def _data_dir(root) -> Path:
    return Path(root) / "data"


def _run_dir(root, name) -> Path:
    return Path(root) / "runs" / name


def load_split(root) -> Tuple[CorpusManifest, CorpusManifest]:
    d = _data_dir(root)
    if not (d / "train.jsonl").exists():
        raise RuntimeFailure(f"{root} is not prepared (run `prepare` first)")
    return read_manifest(d / "train.jsonl"), read_manifest(d / "test.jsonl")


def _guard(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise RuntimeFailure(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def parse_context_override(spec: str) -> Tuple[Optional[str], int, int]:
    """``[book=B:]idx=I:from=J`` -> (book or None, I, J)."""
    parts = {}
    for chunk in spec.split(":"):
        if "=" not in chunk:
            raise UsageError(f"bad --context-override {spec!r}")
        key, value = chunk.split("=", 1)
        parts[key.strip()] = value.strip()
    try:
        idx = int(parts.pop("idx"))
        src = int(parts.pop("from").removeprefix("idx").strip())
    except (KeyError, ValueError):
        raise UsageError(f"bad --context-override {spec!r}; expected idx=I:from=J") from None
    book = parts.pop("book", None)
    if parts:
        raise UsageError(f"bad --context-override {spec!r}: unknown keys {sorted(parts)}")
    return book, idx, src


def modality_flags(name: str) -> Tuple[bool, str]:
    if name not in MODALITIES:
        raise UsageError(f"unknown modality {name!r}; choose from {', '.join(MODALITIES)}")
    return MODALITIES[name]


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    if not args.synthetic and not args.manifest:
        raise UsageError("prepare needs --synthetic or --manifest")
    d = _data_dir(args.root)
    _guard([d / "train.jsonl", d / "test.jsonl"], args.force)
    d.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        spec = GeneratorSpec()
        if args.spec:
            spec = GeneratorSpec.from_dict({**spec.to_dict(), **read_config(args.spec)})
        try:
            spec.validate()
        except InvalidInputError as exc:
            raise UsageError(str(exc)) from None
        manifest = generate_synthetic_corpus(args.seed, spec)
        (d / "spec.json").write_text(json.dumps({"seed": args.seed, **spec.to_dict()}, indent=1, sort_keys=True) + "\n")
    else:
        if not Path(args.manifest).exists():
            raise UsageError(f"manifest not found: {args.manifest}")
        manifest = read_manifest(args.manifest)
    held = args.hold_out.split(",") if args.hold_out else default_held_out(manifest)
    try:
        train_m, test_m = split_corpus(manifest, held)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    write_manifest(train_m, d / "train.jsonl")
    write_manifest(test_m, d / "test.jsonl")
    stats = compute_all_speaker_stats(train_m.utterances)
    (d / "stats.json").write_text(json.dumps({k: asdict(v) for k, v in sorted(stats.items())}, indent=1) + "\n")
    print(f"train: {len(train_m)} utterances, test: {len(test_m)} utterances (held out {', '.join(held)})")
    return 0


def train_run(root, run: Path, values: Dict[str, object], *, max_steps=None, resume=False, seed=None,
              force=False) -> Path:
    """Train into run directory ``run``; returns the checkpoint path."""
    train_m, _ = load_split(root)
    run = Path(run)
    ckpt = run / "model.ckpt"
    log = run / "train_log.jsonl"
    train_kw, model_kw, tce_kw, modality = split_config(values)
    if max_steps is not None:
        train_kw["max_steps"] = max_steps
    if seed is not None:
        train_kw["seed"] = seed
    cfg = TrainConfig(**train_kw)
    if resume:
        if not ckpt.exists():
            raise RuntimeFailure(f"nothing to resume: {ckpt} missing")
        bundle = load_checkpoint(ckpt)
    else:
        _guard([ckpt], force)
        if log.exists():
            log.unlink()
        run.mkdir(parents=True, exist_ok=True)
        base = ModelConfig(n_phonemes=1, n_speakers=1, mel_bins=1, **model_kw)
        if modality:
            use_ace, mode = modality_flags(modality)
            base = base.with_modality(use_ace, mode)
        if tce_kw:
            base = replace(base, tce=replace(base.tce, **tce_kw))
        bundle = build_bundle(train_m, base, seed=cfg.seed)
    write_config(run / "config.cfg", {**values, **{k: v for k, v in asdict(cfg).items() if k in train_kw}})
    train(bundle, train_m, cfg, log_path=log, checkpoint_path=ckpt, dump_dir=run / "dump")
    return ckpt


def cmd_train(args) -> int:
    values = read_config(args.config) if args.config else {}
    if args.modality:
        modality_flags(args.modality)
        values["modality"] = args.modality
    if args.k is not None:
        values["k"] = args.k
    ckpt = train_run(args.root, _run_dir(args.root, args.run), values, max_steps=args.max_steps, resume=args.resume,
                     seed=args.seed, force=args.force)
    print(f"checkpoint: {ckpt}")
    return 0


def synthesize_run(root, run: Path, books: Optional[Sequence[str]] = None, *, k_override=None,
                   context_overrides: Sequence[str] = (), out: str = "test", force=False,
                   checkpoint=None) -> Path:
    """Synthesize test books with the run's checkpoint (or ``checkpoint``)
    into ``run/synth/OUT.feats``."""
    _, test_m = load_split(root)
    run = Path(run)
    ckpt = Path(checkpoint) if checkpoint else run / "model.ckpt"
    if not ckpt.exists():
        raise RuntimeFailure(f"checkpoint not found: {ckpt}")
    synth = run / "synth"
    target = synth / f"{out}.feats"
    _guard([target], force)
    synth.mkdir(parents=True, exist_ok=True)
    bundle = load_checkpoint(ckpt)
    all_books = test_m.books()
    chosen = list(books) if books else list(all_books)
    unknown = [b for b in chosen if b not in all_books]
    if unknown:
        raise UsageError(f"unknown book(s): {', '.join(unknown)}")
    parsed = [parse_context_override(s) for s in context_overrides]
    results = []
    debug = []
    for book_id in chosen:
        book = all_books[book_id]
        overrides: Dict[int, ContextOverride] = {}
        for b, idx, src in parsed:
            if b is not None and b != book_id:
                continue
            if not (0 <= idx < len(book) and 0 <= src < len(book)):
                raise UsageError(f"context override idx={idx}:from={src} out of range for {book_id}")
            overrides[idx] = borrowed_context(book, src, bundle.config.tce, k_override)
        res = synthesize_book(bundle, book, k_override=k_override, overrides=overrides)
        for r in res:
            debug.append(f"{r.uid}\tk={r.window.k}\tpre={len(r.window.preceding)}\tsuc={len(r.window.succeeding)}"
                         f"\tprev={int(r.has_prev)}\toverride={r.override or '-'}")
        results.extend(res)
    write_outputs(results, target, bundle.config.mel_bins, test_m.frame_rate)
    (synth / f"{out}.log").write_text("\n".join(debug) + "\n", encoding="utf-8")
    return target


def cmd_synthesize(args) -> int:
    target = synthesize_run(args.root, _run_dir(args.root, args.run), args.book, k_override=args.k_override,
                            context_overrides=args.context_override or (), out=args.out, force=args.force)
    print(f"features: {target}")
    return 0


def evaluate_outputs(root, path, classifier=None) -> ProsodyScores:
    train_m, test_m = load_split(root)
    outputs = read_outputs(path)
    uids = set(outputs)
    truth = CorpusManifest([u for u in test_m.utterances if u.uid in uids], test_m.speakers, test_m.mel_bins,
                           test_m.frame_rate)
    if len(truth) != len(outputs):
        raise RuntimeFailure(f"{path}: outputs for utterances absent from the test manifest")
    if classifier is None:
        classifier = train_speaker_classifier(train_m)
    scores, _ = evaluate_run(outputs, truth, classifier)
    return scores


class _GroundTruth:
    def __init__(self, utt):
        self.mel, self.f0 = utt.mel, utt.pitch


def cmd_evaluate(args) -> int:
    train_m, test_m = load_split(args.root)
    classifier = train_speaker_classifier(train_m, seed=args.seed)
    rows: Dict[str, ProsodyScores] = {}
    if args.ground_truth:
        rows["GT"], _ = evaluate_run({u.uid: _GroundTruth(u) for u in test_m.utterances}, test_m, classifier)
    names = args.compare.split(",") if args.compare else ([args.run] if args.run else [])
    if not names and not rows:
        raise UsageError("evaluate needs --run, --compare or --ground-truth")
    for name in names:
        path = _run_dir(args.root, name) / "synth" / f"{args.synth}.feats"
        if not path.exists():
            raise RuntimeFailure(f"no synthesized outputs for {name}: {path}")
        rows[name] = evaluate_outputs(args.root, path, classifier)
    out = Path(args.out) if args.out else (
        _run_dir(args.root, names[0]) / "scores.tsv" if len(names) == 1 and not args.ground_truth
        else Path(args.root) / "scores.tsv")
    _guard([out], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores_table(rows, out)
    print(out.read_text(), end="")
    return 0


def run_ablation(root, suite: str, *, max_steps=None, seed: int = 0, force=False, dry_run=False,
                 base: Optional[Dict[str, object]] = None, echo=print) -> Tuple[Path, List[str]]:
    """Train, synthesize and evaluate every run of ``suite``. Returns the
    report path and the ids of failed rows."""
    runs = ablation_matrix(int((base or {}).get("k", 64)), suite)
    if dry_run:
        for r in runs:
            extra = f" eval_k={r.eval_k} from={r.train_from}" if r.train_from else ""
            echo(f"{r.ablation_id}\tuse_ace={r.use_ace}\tmode={r.mode}\tk={r.k}{extra}")
        return None, []
    out_dir = Path(root) / "ablate" / suite
    report = out_dir / "report.tsv"
    _guard([report], force)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_m, _ = load_split(root)
    classifier = train_speaker_classifier(train_m, seed=seed)
    rows, failed = [], []
    for r in runs:
        run = out_dir / r.ablation_id
        try:
            if r.train_from:
                ckpt = out_dir / r.train_from / "model.ckpt"
            else:
                values = dict(base or {})
                values.update({"use_ace": r.use_ace, "mode": r.mode, "k": r.k, "ablation_id": r.ablation_id})
                ckpt = train_run(root, run, values, max_steps=max_steps, seed=seed, force=True)
            target = synthesize_run(root, run, k_override=r.eval_k, force=True, checkpoint=ckpt)
            scores = evaluate_outputs(root, target, classifier)
            rows.append((r, scores))
            echo(f"{r.ablation_id}: " + "  ".join(f"{k}={v:.3f}" for k, v in scores.row().items()))
        except Exception as exc:  # a failed row is reported, not fatal to the suite
            logger.exception("ablation %s failed", r.ablation_id)
            rows.append((r, None))
            failed.append(r.ablation_id)
            echo(f"{r.ablation_id}: FAILED ({exc})")
    lines = ["id\tlabel\tk\teval_k\tMCD\tF0-RMSE\tGPE\tACC"]
    for r, sc in rows:
        vals = ["FAILED"] * 4 if sc is None else [f"{v:.4f}" for v in sc.row().values()]
        lines.append("\t".join([r.ablation_id, r.label, str(r.k), str(r.eval_k or r.k)] + vals))
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report, failed


def cmd_ablate(args) -> int:
    base = read_config(args.config) if args.config else {}
    report, failed = run_ablation(args.root, args.suite, max_steps=args.max_steps, seed=args.seed,
                                  force=args.force, dry_run=args.dry_run, base=base)
    if report is not None:
        print(report.read_text(), end="")
    return 1 if failed else 0


def plot_contexts(root, name: str, target_uid: Optional[str] = None, n_contexts: int = 2, seed: int = 0,
                  out: Optional[str] = None, force=False) -> dict:
    """Synthesize one target with its true context and ``n_contexts`` random
    ones; write a PNG, the per-frame contour table and a JSON summary."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _, test_m = load_split(root)
    ckpt = _run_dir(root, name) / "model.ckpt"
    if not ckpt.exists():
        raise RuntimeFailure(f"checkpoint not found: {ckpt}")
    bundle = load_checkpoint(ckpt)
    books = test_m.books()
    if target_uid is None:
        first = next(iter(books.values()))
        target_uid = first[len(first) // 2].uid
    try:
        target = test_m.lookup(target_uid)
    except InvalidInputError:
        raise UsageError(f"unknown target utterance {target_uid!r}") from None
    tce = bundle.config.tce
    curves = {"Predicted": borrowed_context(books[target.book_id], target.index, tce)}
    for i, ctx in enumerate(sample_random_contexts(test_m, target_uid, n_contexts, seed, tce), 1):
        curves[f"Random context {i}"] = ctx
    contours = {}
    for label, ctx in curves.items():
        res = synthesize_with_context(bundle, target, ctx.window, ctx.prev_mel)
        contours[label] = res.f0
    labels = list(contours)
    diffs = {}
    for a in range(len(labels)):
        for b in range(a + 1, len(labels)):
            x, y = contours[labels[a]], contours[labels[b]]
            n = min(len(x), len(y))
            diffs[f"{labels[a]} vs {labels[b]}"] = float(np.mean(np.abs(x[:n] - y[:n])))
    stem = Path(root) / "plots" / (out or f"{name.replace('/', '_')}_{target_uid.replace(':', '_')}")
    _guard([stem.with_suffix(".png"), stem.with_suffix(".tsv")], force)
    stem.parent.mkdir(parents=True, exist_ok=True)
    n_rows = max(len(c) for c in contours.values())
    lines = ["frame\t" + "\t".join(labels)]
    for t in range(n_rows):
        vals = [f"{contours[l][t]:.4f}" if t < len(contours[l]) else "" for l in labels]
        lines.append("\t".join([str(t)] + vals))
    stem.with_suffix(".tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {"target": target_uid, "seed": seed, "contexts": {l: c.source for l, c in curves.items()},
               "mean_abs_diff_hz": diffs}
    stem.with_suffix(".json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for label in labels:
        f0 = np.where(contours[label] > 0, contours[label], np.nan)
        ax.plot(np.arange(len(f0)), f0, label=label, lw=2 if label == "Predicted" else 1.2)
    ax.set_xlabel("frame")
    ax.set_ylabel("F0 [Hz]")
    ax.set_title(target.text)
    ax.legend()
    fig.tight_layout()
    fig.savefig(stem.with_suffix(".png"), dpi=100, metadata={"Software": None})
    plt.close(fig)
    return summary


def cmd_plot(args) -> int:
    summary = plot_contexts(args.root, args.run, args.target, args.n_contexts, args.seed, args.out, args.force)
    for pair, d in summary["mean_abs_diff_hz"].items():
        print(f"{pair}: {d:.3f} Hz")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxtts", description="Context-aware prosody modelling toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--root", default=".", help="run directory root")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("prepare", help="build train/test manifests")
    common(p)
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic corpus")
    p.add_argument("--spec", help="key/value generator overrides")
    p.add_argument("--manifest", help="existing manifest to split")
    p.add_argument("--hold-out", help="comma-separated test book ids")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--config")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--modality", choices=sorted(MODALITIES))
    p.add_argument("--k", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthesize test books through the context chain")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--book", action="append")
    p.add_argument("--k-override", type=int)
    p.add_argument("--context-override", action="append", metavar="[book=B:]idx=I:from=J")
    p.add_argument("--out", default="test")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score synthesized outputs")
    common(p)
    p.add_argument("--run")
    p.add_argument("--compare", help="comma-separated run names")
    p.add_argument("--synth", default="test")
    p.add_argument("--ground-truth", action="store_true", help="add a ground-truth self-comparison row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation suite end to end")
    common(p)
    p.add_argument("--suite", choices=["table1", "table2"], required=True)
    p.add_argument("--config")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="pitch contours under random contexts")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--target")
    p.add_argument("--n-contexts", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ctxtts: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"ctxtts: training diverged: {exc} (state dump: {exc.dump_path})", file=sys.stderr)
        return 1
    except (RuntimeFailure, InvalidInputError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"ctxtts: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
