"""Command-line interface: ``genclassify <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .classify import (
    ClassificationError, EvalRecord, GenerativeClassifier, HybridClassifier, SoftmaxClassifier,
    classify_dataset, read_records_csv, write_records_csv,
)
from .data import (
    NO_LABEL, Dataset, DatasetError, IdxFormatError, load_idx_dataset, make_synthetic, make_synthetic_ood,
    read_pgm, save_idx, save_idx_dataset, split, write_pgm,
)
from .evaluation import REPORT_COVERAGES, emit_curve_csv, emit_svg, risk_coverage, summarize
from .experiment import (
    ConfigError, ExperimentConfig, ExperimentError, default_config, format_summary, run_experiment,
)
from .models import (
    BundleError, ModelBundle, SoftmaxConfig, TrainingError, VaeConfig, config_hash, fit_linear_generator,
    load_bundle, save_bundle, train_softmax, train_vae,
)
from .numkit import LbfgsConfig
from .search import SearchConfig, SimilarityMeasure

log = logging.getLogger("genclassify")

DATA_FILES = {
    "train": ("train-images.idx", "train-labels.idx"),
    "test": ("test-images.idx", "test-labels.idx"),
    "ood": ("ood-images.idx", None),
}


class UsageError(Exception):
    """Bad input from the user; exits with status 2."""


_USAGE_ERRORS = (UsageError, ConfigError, DatasetError, IdxFormatError, BundleError,
                 FileNotFoundError, FileExistsError)


def _print_config(name: str, settings: dict) -> None:
    print(f"# {name}: resolved configuration")
    for k in sorted(settings):
        print(f"#   {k} = {settings[k]}")
    sys.stdout.flush()


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Data selection shared by train and classify


def _add_data_args(p: argparse.ArgumentParser, default_split: str) -> None:
    g = p.add_argument_group("input data (default: synthetic set from --seed)")
    g.add_argument("--data", metavar="DIR", help="directory written by make-data")
    g.add_argument("--split", choices=sorted(DATA_FILES), default=default_split,
                   help=f"which split of --data or of the synthetic set to use (default {default_split})")
    g.add_argument("--images", metavar="IDX", help="IDX image file")
    g.add_argument("--labels", metavar="IDX", help="IDX label file (255 = no class)")
    g.add_argument("--num-classes", type=int, help="class count for IDX input")


def _synthetic_splits(seed: int, ood_count: int = 0):
    full = make_synthetic(seed=seed)
    train, test = split(full, 0.5, seed)
    ood = make_synthetic_ood(max(ood_count, 1), full.height, seed)
    return {"train": train, "test": test, "ood": ood}


def _load_input(args, seed: int, num_classes: Optional[int] = None) -> Dataset:
    k = args.num_classes or num_classes
    if args.images:
        labels = _require_file(args.labels) if args.labels else None
        return load_idx_dataset(_require_file(args.images), labels, num_classes=k, ood=labels is None)
    if args.data:
        root = Path(args.data)
        if not root.is_dir():
            raise UsageError(f"data directory not found: {root}")
        img, lab = DATA_FILES[args.split]
        if lab is None:
            return load_idx_dataset(_require_file(root / img), ood=True, num_classes=k)
        return load_idx_dataset(_require_file(root / img), _require_file(root / lab), num_classes=k)
    return _synthetic_splits(seed, 200)[args.split]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_make_data(args) -> int:
    out = Path(args.out or "data")
    settings = dict(out=out, seed=args.seed, num_classes=args.num_classes, per_class=args.per_class,
                    image_size=args.image_size, noise=args.noise, train_fraction=args.train_fraction,
                    ood_count=args.ood_count)
    _print_config("make-data", settings)
    full = make_synthetic(args.num_classes, args.per_class, args.image_size, args.seed, args.noise)
    train, test = split(full, args.train_fraction, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_idx_dataset(train, out / DATA_FILES["train"][0], out / DATA_FILES["train"][1])
    save_idx_dataset(test, out / DATA_FILES["test"][0], out / DATA_FILES["test"][1])
    if args.ood_count > 0:
        ood = make_synthetic_ood(args.ood_count, args.image_size, args.seed, args.noise)
        save_idx(out / DATA_FILES["ood"][0], ood.images())
    print(f"wrote {len(train)} train, {len(test)} test and {args.ood_count} OOD images to {out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out or "bundle.gcb")
    seed = args.seed
    latent = args.latent_dim or (10 if args.model == "vae" else 8)
    settings = dict(model=args.model, out=out, seed=seed, data=args.data or args.images or "synthetic",
                    split=args.split, with_softmax=args.softmax or args.model == "softmax")
    if args.model == "linear":
        settings.update(latent_dim=latent, box_radius=args.box_radius or "auto")
    if args.model == "vae":
        vcfg = VaeConfig(latent, args.hidden_dim or 64, args.epochs or 150, args.batch_size,
                         args.learning_rate or 3e-3, seed)
        settings.update({f"vae.{k}": v for k, v in vars(vcfg).items()})
    train_sm = args.softmax or args.model == "softmax"
    if train_sm:
        if args.model == "softmax":
            scfg = SoftmaxConfig(args.hidden_dim or 64, args.epochs or 100, args.batch_size,
                                 args.learning_rate or 1e-2, seed)
        else:
            scfg = SoftmaxConfig(seed=seed)
        settings.update({f"softmax.{k}": v for k, v in vars(scfg).items()})
    _print_config("train", settings)

    data = _load_input(args, seed)
    if np.any(data.ood) or np.any(data.labels == NO_LABEL):
        raise UsageError("training data must be labeled and in-distribution")
    gens = []
    if args.model == "linear":
        for k in range(data.num_classes):
            X = data.class_pixels(k)
            if len(X) < latent + 1:
                raise UsageError(f"class {k} has {len(X)} examples; need at least {latent + 1}")
            gens.append(fit_linear_generator(X, latent, args.box_radius))
            print(f"class {k}: linear generator fit on {len(X)} examples")
    elif args.model == "vae":
        for k in range(data.num_classes):
            X = data.class_pixels(k)
            if len(X) == 0:
                raise UsageError(f"class {k} has no training examples")
            gens.append(train_vae(X, vcfg, lambda e, loss, k=k: print(
                f"class {k} epoch {e + 1}/{vcfg.epochs} loss {loss:.6f}", flush=True)))
    softmax = None
    if train_sm:
        softmax = train_softmax(data, scfg, lambda e, loss: print(
            f"softmax epoch {e + 1}/{scfg.epochs} loss {loss:.6f}", flush=True))
    kind = args.model if gens else "none"
    bundle = ModelBundle(gens, kind, data.height, data.width, data.num_classes, softmax,
                         metadata={"config_hash": config_hash({k: str(v) for k, v in settings.items() if k != "out"})})
    save_bundle(bundle, out)
    print(f"wrote bundle {out} ({data.num_classes} classes, {data.height}x{data.width})")
    return 0


def _search_config(args) -> SearchConfig:
    return SearchConfig(args.mc_samples, args.refine_top,
                        LbfgsConfig(memory=args.memory, max_iters=args.max_iters), not args.no_box_projection)


def _classify_input(args, bundle: ModelBundle) -> Dataset:
    if args.pgm:
        images = [read_pgm(_require_file(p)) for p in args.pgm]
        for p, im in zip(args.pgm, images):
            if im.shape != (bundle.height, bundle.width):
                raise UsageError(f"{p}: image is {im.shape[0]}x{im.shape[1]}, bundle expects "
                                 f"{bundle.height}x{bundle.width}")
        n = len(images)
        return Dataset(np.stack(images).reshape(n, -1), np.full(n, NO_LABEL), np.zeros(n, bool),
                       bundle.height, bundle.width, bundle.num_classes)
    data = _load_input(args, args.seed, bundle.num_classes)
    if (data.height, data.width) != (bundle.height, bundle.width):
        raise UsageError(f"data images are {data.height}x{data.width}, bundle expects "
                         f"{bundle.height}x{bundle.width}")
    if data.num_classes > bundle.num_classes:
        raise UsageError(f"data has labels up to {data.num_classes - 1}, bundle has {bundle.num_classes} classes")
    return data


def _write_rationale(out: Path, data: Dataset, records: List[EvalRecord]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = ["example,class,score,file"]
    for r in records:
        for e in r.prediction.rationale:
            name = f"ex{r.index:05d}_class{e.class_id}.pgm"
            write_pgm(out / name, e.image.reshape(data.height, data.width))
            lines.append(f"{r.index},{e.class_id},{format(e.score, '.17g')},{name}")
    (out / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_classify(args) -> int:
    out = Path(args.out or "predictions.csv")
    config = _search_config(args)
    measure = SimilarityMeasure(args.p)
    settings = dict(bundle=args.bundle, classifier=args.classifier, out=out, seed=args.seed, threads=args.threads,
                    p=args.p, mc_samples=config.mc_samples, refine_top=config.refine_top,
                    lbfgs_memory=config.lbfgs.memory, lbfgs_max_iters=config.lbfgs.max_iters,
                    box_projection=config.box_projection, encoder_init=args.encoder_init,
                    rationale=args.rationale or "off",
                    input=args.pgm or args.images or (f"{args.data}:{args.split}" if args.data
                                                      else f"synthetic:{args.split}"))
    _print_config("classify", settings)
    bundle = load_bundle(_require_file(args.bundle))
    data = _classify_input(args, bundle)
    if args.classifier in ("generative", "hybrid") and not bundle.generators:
        raise UsageError(f"{args.bundle} has no class generators")
    if args.classifier in ("softmax", "hybrid") and bundle.softmax is None:
        raise UsageError(f"{args.bundle} has no softmax model; train with --softmax")
    if args.rationale and args.classifier == "softmax":
        raise UsageError("--rationale needs the generative or hybrid classifier")
    if args.classifier == "generative":
        clf = GenerativeClassifier(bundle, measure, config, args.seed, args.encoder_init)
    elif args.classifier == "hybrid":
        clf = HybridClassifier(bundle, bundle.softmax, measure, config, args.seed, args.encoder_init)
    else:
        clf = SoftmaxClassifier(bundle.softmax)
    records = classify_dataset(clf, data, parallelism=args.threads)
    write_records_csv(records, out)
    if args.rationale:
        _write_rationale(Path(args.rationale), data, records)
    labelled = [r for r in records if r.true_label != NO_LABEL or r.ood_flag]
    msg = f"classified {len(records)} images -> {out}"
    if labelled:
        msg += f"; accuracy on labelled/OOD rows {np.mean([r.correct for r in labelled]):.4f}"
    print(msg)
    return 0


def _read_records(paths) -> List[List[EvalRecord]]:
    out = []
    for p in paths:
        try:
            out.append(read_records_csv(_require_file(p)))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return out


def _label_for(path, records) -> str:
    kinds = {r.prediction.kind.value for r in records}
    return kinds.pop() if len(kinds) == 1 else Path(path).stem


def cmd_evaluate(args) -> int:
    _print_config("evaluate", dict(records=args.records, out=args.out or "stdout only"))
    all_records = _read_records(args.records)
    header = f"{'records':<32}{'n':>6}{'accuracy':>10}{'min_risk':>10}" + "".join(
        f"{'r@' + format(c, 'g'):>9}" for c in REPORT_COVERAGES)
    print(header)
    report = {}
    for path, recs in zip(args.records, all_records):
        if not recs:
            print(f"{Path(path).name:<32}{0:>6}")
            report[str(path)] = {"n": 0}
            continue
        s = summarize(recs)
        report[str(path)] = {"n": s["n"], "accuracy": s["accuracy"], "min_risk": s["min_risk"],
                             "risk_at": {format(c, "g"): v for c, v in s["risk_at"].items()}}
        print(f"{Path(path).name:<32}{s['n']:>6}{s['accuracy']:>10.4f}{s['min_risk']:>10.4f}"
              + "".join(f"{s['risk_at'][c]:>9.4f}" for c in REPORT_COVERAGES))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_riskcov(args) -> int:
    out = Path(args.out or "riskcov")
    _print_config("riskcov", dict(records=args.records, out=out, title=args.title))
    all_records = _read_records(args.records)
    out.mkdir(parents=True, exist_ok=True)
    curves, labels = [], []
    for path, recs in zip(args.records, all_records):
        if not recs:
            raise UsageError(f"{path}: no records, cannot build a curve")
        curve = risk_coverage(recs)
        target = out / f"{Path(path).stem}_curve.csv"
        emit_curve_csv(curve, target)
        curves.append(curve)
        labels.append(_label_for(path, recs))
        print(f"{target}: {len(curve)} points, min risk {curve.risk.min():.4f}")
    emit_svg(curves, labels, out / "riskcov.svg", title=args.title)
    print(f"wrote {out / 'riskcov.svg'}")
    return 0


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else default_config()
    if args.seed_given:
        cfg = cfg.with_seed(args.seed)
    out = args.out or cfg.get("run", "out_dir") or "experiment_out"
    cfg = cfg.replace(run__out_dir=str(out))
    print(f"# experiment: resolved configuration ({cfg.source}), threads = {args.threads}")
    for line in cfg.to_text().splitlines():
        print(f"#   {line}" if line else "#")
    sys.stdout.flush()
    summary = run_experiment(cfg, out, threads=args.threads, force=args.force,
                             on_epoch=lambda msg: print(msg, flush=True))
    print(format_summary(summary), end="")
    print(f"outputs in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a subcommand's defaults never clobber flags given before it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads for classification (default 1)")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output path (file or directory, depending on the subcommand)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="genclassify", parents=[common],
                                     description="Generative classification with abstention.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("make-data", parents=[common], help="write a synthetic dataset as IDX files")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=150)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--ood-count", type=int, default=900)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", parents=[common], help="train a model bundle")
    p.add_argument("--model", choices=("linear", "vae", "softmax"), default="linear")
    p.add_argument("--softmax", action="store_true", help="also train the softmax baseline into the bundle")
    p.add_argument("--latent-dim", type=int, help="latent size (default 8 linear, 10 vae)")
    p.add_argument("--box-radius", type=float, help="linear generator box radius (default automatic)")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float)
    _add_data_args(p, "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", parents=[common], help="classify images with a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--classifier", choices=("generative", "softmax", "hybrid"), default="generative")
    p.add_argument("--pgm", nargs="+", metavar="FILE", help="classify these PGM images")
    p.add_argument("--p", type=float, default=2.0, help="L^p similarity exponent")
    p.add_argument("--mc-samples", type=int, default=500)
    p.add_argument("--refine-top", type=int, default=3)
    p.add_argument("--memory", type=int, default=10, help="L-BFGS history size")
    p.add_argument("--max-iters", type=int, default=100, help="L-BFGS iterations per start (0 disables)")
    p.add_argument("--no-box-projection", action="store_true")
    p.add_argument("--encoder-init", action="store_true", help="start VAE searches at the encoder mean")
    p.add_argument("--rationale", metavar="DIR", help="write per-class best generations as PGM files")
    _add_data_args(p, "test")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", parents=[common], help="summarize record CSVs")
    p.add_argument("records", nargs="+")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("riskcov", parents=[common], help="risk-coverage curves and SVG from record CSVs")
    p.add_argument("records", nargs="+")
    p.add_argument("--title", default="risk-coverage")
    p.set_defaults(func=cmd_riskcov)

    p = sub.add_parser("experiment", parents=[common], help="run the full out-of-distribution experiment")
    p.add_argument("config", nargs="?", help="config file (default: bundled desk_default.cfg)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    for name, default in (("seed", 0), ("threads", 1), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"genclassify {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ExperimentError as exc:
        print(f"genclassify {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, _USAGE_ERRORS) else 1
    except (ClassificationError, TrainingError) as exc:
        print(f"genclassify {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"genclassify {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a bug
        print(f"genclassify {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
