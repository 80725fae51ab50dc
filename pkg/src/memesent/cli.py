"""Command-line entry point: stats, split, train, evaluate, explain, compare."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

log = logging.getLogger("memesent")

OUT_ENV = "MEMESENT_OUT"


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True), encoding="utf-8")
    return path


def _load_manifest(path):
    from .dataset import read_manifest, validate_manifest

    raw = read_manifest(path)
    manifest, rejected = validate_manifest(raw, source_uri=str(path))
    if rejected:
        log.warning("dropped %d manifest entries without a decodable image: %s",
                    len(rejected), ", ".join(s.id for s in rejected[:10]))
    return manifest, rejected


def _resolve_split(args, manifest):
    from .dataset import SplitResult, stratified_split

    if getattr(args, "split", None):
        return SplitResult.from_dict(json.loads(Path(args.split).read_text()))
    return stratified_split(manifest, tuple(args.ratios), args.split_seed)


# ---------------------------------------------------------------------- commands


def cmd_stats(args) -> int:
    from .dataset import compute_stats, plot_length_histogram, top_k_words

    manifest, rejected = _load_manifest(args.manifest)
    stats = compute_stats(manifest)
    doc = stats.to_dict(include_frequencies=False)
    doc["rejected"] = [s.id for s in rejected]
    doc["top_words"] = [[w, c] for w, c in top_k_words(stats, args.top_k)]
    _write_json(args.out / "stats.json", doc)
    if args.plot:
        plot_length_histogram(stats, args.out / "length_frequency.png")
    print(f"samples: {len(manifest)} (rejected {len(rejected)})")
    print("classes: " + ", ".join(f"{k}={v}" for k, v in stats.class_counts.items()))
    print("languages: " + ", ".join(f"{k}={v}" for k, v in stats.language_counts.items()))
    cl = stats.caption_length
    print(f"caption length: min={cl['min']} max={cl['max']} mean={cl['mean']:.2f}")
    return 0


def cmd_split(args) -> int:
    from .dataset import stratified_split

    manifest, _ = _load_manifest(args.manifest)
    split = stratified_split(manifest, tuple(args.ratios), args.seed)
    _write_json(args.out / "split.json", split.to_dict())
    print(f"train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .model import Vocabulary, build_model, save_checkpoint
    from .training import TrainConfig, emit_curves, train

    manifest, _ = _load_manifest(args.manifest)
    split = _resolve_split(args, manifest)
    _write_json(args.out / "split.json", split.to_dict())

    vocab = None
    needs_vocab = args.modality != "image" and not (args.text_encoder == "transformer" and args.pretrained_ref)
    if needs_vocab:
        from .preprocess import normalize_caption

        vocab = Vocabulary.build((normalize_caption(manifest[i].caption) for i in split.train),
                                 min_freq=args.min_freq)
    model = build_model(
        args.modality,
        backbone=args.backbone,
        text_kind="pretrained_transformer" if args.text_encoder == "transformer" else "recurrent_bidirectional",
        vocab=vocab,
        pretrained=args.pretrained,
        pretrained_ref=args.pretrained_ref,
        seed=args.seed,
        embedding_dim=args.embedding_dim,
        hidden_dim=args.hidden_dim,
        num_layers=args.num_layers,
        visual_dim=args.visual_dim,
        projection_dim=args.projection_dim,
        projection_activation=args.projection_activation,
        freeze_encoders=args.freeze_encoders,
    )
    config = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        betas=(args.beta1, args.beta2),
        epsilon=args.epsilon,
        weight_decay=args.weight_decay,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience if args.patience > 0 else None,
        seed=args.seed,
        class_weighting=args.class_weighting,
        num_workers=args.num_workers,
    )
    if args.threads:
        torch.set_num_threads(args.threads)
    _, trace = train(model, split, manifest, config)
    save_checkpoint(model, args.out / "checkpoint", extra={"split_seed": split.seed, "ratios": list(split.ratios)})
    _write_json(args.out / "trace.json", trace.to_dict())
    if args.plot:
        emit_curves(trace, args.out / "curves.png")
    best = trace.best_epoch
    print(f"epochs={len(trace)} best_epoch={best} val_loss={trace.val_loss[best]:.4f} "
          f"val_acc={trace.val_accuracy[best]:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate, per_class_failure_report, plot_confusion
    from .model import load_checkpoint

    manifest, _ = _load_manifest(args.manifest)
    split = _resolve_split(args, manifest)
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, split.test, manifest, name=args.name or Path(args.checkpoint).parent.name)
    report.save(args.out / "report.json")
    diag = per_class_failure_report(report, args.recall_threshold)
    (args.out / "failures.txt").write_text(diag + ("\n" if diag else ""), encoding="utf-8")
    if args.plot:
        plot_confusion(report, args.out / "confusion.png")
    print(f"accuracy={report.accuracy:.4f} precision={report.weighted_precision:.4f} "
          f"recall={report.weighted_recall:.4f} f1={report.weighted_f1:.4f}")
    if diag:
        print(diag)
    return 0


def cmd_explain(args) -> int:
    from .explain import LimeConfig, explain_sample, render_explanation
    from .model import Predictor, load_checkpoint
    from .preprocess import load_rgb

    manifest, _ = _load_manifest(args.manifest)
    if args.sample_id not in manifest:
        raise KeyError(f"sample {args.sample_id!r} not in manifest")
    sample = manifest[args.sample_id]
    predictor = Predictor(load_checkpoint(args.checkpoint))
    config = LimeConfig(
        num_samples=args.samples,
        seed=args.seed,
        num_segments_target=args.segments,
        segmenter=args.segmenter,
        kernel_width=args.kernel_width,
        ridge_lambda=args.ridge_lambda,
        top_k=args.top_k,
        target_class=args.target_class,
    )
    modality = args.modality
    if modality == "both":
        modality = "both" if predictor.model.modality == "fusion" else (
            "image" if predictor.model.uses_image else "text")
    explanations = explain_sample(sample, predictor, modality, config)
    for mode, exp in explanations.items():
        if mode == "image":
            path = args.out / f"{sample.id}_image.png"
            render_explanation(exp, load_rgb(sample.image_path), path, top_k=config.top_k)
        else:
            path = args.out / f"{sample.id}_text.html"
            render_explanation(exp, sample, path)
        top = ", ".join(f"{i}:{w:+.4f}" for i, w in exp.ranked_features()[: config.top_k])
        print(f"{mode}: class={exp.target_name} r2={exp.surrogate_r2:.3f} top=[{top}] -> {path}")
    return 0


def cmd_compare(args) -> int:
    from .evaluation import EvaluationReport, compare_runs

    reports = []
    for entry in args.reports:
        name, _, path = entry.rpartition("=") if "=" in entry else ("", "", entry)
        report = EvaluationReport.load(path)
        reports.append((name or report.name or Path(path).parent.name, report))
    table = compare_runs(reports, include_reference=args.with_reference)
    _write_json(args.out / "comparison.json", table.to_dict())
    text = table.to_text()
    (args.out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_bimodal_dataset

    path = make_bimodal_dataset(args.out, args.per_combo, args.seed)
    print(path)
    return 0


# ------------------------------------------------------------------------ parser


def _add_split_args(p):
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.7, 0.1, 0.2], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--split", help="split.json to use instead of recomputing")


def build_parser(defaults: Optional[dict] = None) -> argparse.ArgumentParser:
    """Top-level parser; ``defaults`` maps a command name to option defaults for it."""
    defaults = defaults or {}
    parser = argparse.ArgumentParser(prog="memesent", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, func, help_):
        p = commands[name] = sub.add_parser(name, help=help_)
        p.add_argument("--out", type=Path, default=None,
                       help=f"output directory (default ${OUT_ENV} or ./runs/<command>)")
        p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
        p.set_defaults(func=func)
        return p

    p = add("stats", cmd_stats, "dataset statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--top-k", type=int, default=200)
    p.add_argument("--plot", action="store_true")

    p = add("split", cmd_split, "stratified train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.7, 0.1, 0.2], metavar=("TRAIN", "VAL", "TEST"))

    p = add("train", cmd_train, "train a text, image or fusion model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", choices=["text", "image", "fusion"], required=True)
    p.add_argument("--backbone", choices=["residual_50", "mobile_v3_large", "dense_161", "compact"],
                   default="residual_50")
    p.add_argument("--text-encoder", choices=["bilstm", "transformer"], default="bilstm")
    p.add_argument("--pretrained", action="store_true", help="ImageNet weights for the visual backbone")
    p.add_argument("--pretrained-ref", help="identifier of pretrained transformer weights")
    _add_split_args(p)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-5)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.9999)
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--weight-decay", type=float, default=0.08)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5, help="0 disables early stopping")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-weighting", action="store_true")
    p.add_argument("--freeze-encoders", action="store_true")
    p.add_argument("--projection-activation", action="store_true")
    p.add_argument("--projection-dim", type=int, default=20)
    p.add_argument("--embedding-dim", type=int, default=128)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--num-layers", type=int, default=1)
    p.add_argument("--visual-dim", type=int, default=None, help="feature width of the compact backbone")
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--num-workers", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--plot", action="store_true")

    p = add("evaluate", cmd_evaluate, "score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    _add_split_args(p)
    p.add_argument("--name", default="")
    p.add_argument("--recall-threshold", type=float, default=0.5)
    p.add_argument("--plot", action="store_true")

    p = add("explain", cmd_explain, "explain one sample's prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--modality", choices=["image", "text", "both"], default="both")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--segments", type=int, default=50)
    p.add_argument("--segmenter", choices=["slic", "grid"], default="slic")
    p.add_argument("--kernel-width", type=float, default=None)
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--target-class", type=int, default=None)

    p = add("compare", cmd_compare, "tabulate evaluation reports")
    p.add_argument("--reports", nargs="+", required=True, help="report.json paths, optionally NAME=path")
    p.add_argument("--with-reference", action="store_true", help="include the published MemoSen scores")

    p = add("synth", cmd_synth, "generate a synthetic bimodal dataset")
    p.add_argument("--per-combo", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)

    for name, overrides in defaults.items():
        commands[name].set_defaults(**overrides)
    return parser


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if args.config:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        allowed = set(vars(args)) - {"command", "func", "config"}
        unknown = sorted(set(overrides) - allowed)
        if unknown:
            build_parser().error(f"unknown keys in {args.config}: {', '.join(unknown)}")
        # second pass so explicit flags still win over file values
        args = build_parser({args.command: overrides}).parse_args(argv)
    if args.out is None:
        base = os.environ.get(OUT_ENV)
        args.out = Path(base) if base else Path("runs") / args.command
    return args


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
        stream=sys.stderr,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "run.json", {"command": args.command, "config": _resolved(args)})
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
