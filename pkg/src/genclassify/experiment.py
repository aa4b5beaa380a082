"""Desk-scale out-of-distribution experiment.

Train per-class generators and a softmax baseline, classify a held-out test
split and the same split mixed with OOD glyphs, and write records, curves,
plots, rationale images and a summary. Everything is driven by an INI-style
config file; outputs are a pure function of the config.
"""
from __future__ import annotations

import configparser
import json
import logging
import re
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .classify import (
    ClassifierKind, EvalRecord, GenerativeClassifier, KnnClassifier, Prediction, SoftmaxClassifier,
    classify_dataset, combine_hybrid, softmax_classify, write_records_csv,
)
from .data import (
    Dataset, MixSpec, augment_ood, load_idx_dataset, make_synthetic, make_synthetic_ood,
    read_exclusion_list, split, write_pgm,
)
from .evaluation import (
    REPORT_COVERAGES, accuracy, emit_curve_csv, emit_svg, min_risk, risk_at_coverage, risk_coverage,
)
from .models import (
    ModelBundle, SoftmaxConfig, VaeConfig, config_hash, fit_linear_generator, load_bundle, save_bundle,
    train_softmax, train_vae,
)
from .numkit import LbfgsConfig
from .search import SearchConfig, SimilarityMeasure

log = logging.getLogger(__name__)

INCOMPLETE_MARKER = "INCOMPLETE"
CLASSIFIERS = ("generative", "knn", "softmax", "hybrid")
SPLITS = ("test", "augmented")
# coverages at which hybrid and softmax risks are compared
DOMINANCE_GRID = tuple(np.round(np.arange(1, 101) / 100, 2).tolist())

# section -> key -> default; the default's type is the key's type
SCHEMA: Dict[str, Dict[str, object]] = {
    "data": {
        "source": "synthetic",
        "num_classes": 4,
        "per_class": 150,
        "image_size": 16,
        "noise": 0.05,
        "train_fraction": 0.5,
        "seed": 0,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "ood_images": "",
        "ood_exclude": "",
        "ood_invert": True,
    },
    "mix": {"ood_count": 900, "seed": 0},
    "model": {
        "kind": "linear",
        "latent_dim": 8,
        "box_radius": 0.0,
        "hidden_dim": 64,
        "epochs": 150,
        "batch_size": 32,
        "learning_rate": 3e-3,
        "seed": 0,
        "bundle": "",
    },
    "softmax": {"hidden_dim": 64, "epochs": 100, "batch_size": 32, "learning_rate": 1e-2, "seed": 0},
    "search": {
        "p": 2.0,
        "mc_samples": 500,
        "refine_top": 3,
        "memory": 10,
        "max_iters": 100,
        "grad_tolerance": 1e-6,
        "box_projection": True,
        "encoder_init": False,
        "seed": 0,
    },
    "knn": {"k": 1, "p": 2.0},
    "run": {"out_dir": "", "rationale_count": 5},
}

_CHOICES = {("data", "source"): ("synthetic", "idx"), ("model", "kind"): ("linear", "vae")}


class ConfigError(ValueError):
    """Bad experiment configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
        self.key = key


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, default, where: str, line):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}", line, where) from None
    return text


def _key_lines(text: str) -> Dict[tuple, int]:
    """Map (section, key) to the line it was written on."""
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
        elif s and s[0] not in "#;" and section is not None and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            out.setdefault((section, key), n)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    values: Dict[str, Dict[str, object]]
    source: str = "<defaults>"

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({s: dict(keys) for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="\0none")
        try:
            parser.read_string(text, source=source)
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError(f"{source}: key outside any section", exc.lineno) from None
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(f"{source}: duplicate section [{exc.section}]", exc.lineno) from None
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(f"{source}: duplicate key {exc.section}.{exc.option}", exc.lineno,
                              f"{exc.section}.{exc.option}") from None
        except configparser.ParsingError as exc:
            line = exc.errors[0][0] if exc.errors else None
            raise ConfigError(f"{source}: unparseable line", line) from None
        lines = _key_lines(text)
        values = {s: dict(keys) for s, keys in SCHEMA.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                n = next((i for i, l in enumerate(text.splitlines(), 1) if l.strip().startswith(f"[{section}")), None)
                raise ConfigError(f"{source}: unknown section [{section}]", n, section)
            for key, raw in parser.items(section):
                where = f"{section}.{key}"
                line = lines.get((section, key))
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{source}: unknown key {where}", line, where)
                value = _parse_value(raw, SCHEMA[section][key], where, line)
                allowed = _CHOICES.get((section, key))
                if allowed and value not in allowed:
                    raise ConfigError(f"{source}: {where} must be one of {', '.join(allowed)}", line, where)
                values[section][key] = value
        return cls(values, source)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def get(self, section: str, key: str):
        return self.values[section][key]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides."""
        values = {s: dict(kv) for s, kv in self.values.items()}
        for name, v in overrides.items():
            section, key = name.split("__", 1)
            if key not in SCHEMA.get(section, {}):
                raise ConfigError(f"unknown key {section}.{key}", key=f"{section}.{key}")
            values[section][key] = v
        return ExperimentConfig(values, self.source)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(**{f"{s}__seed": seed for s, keys in SCHEMA.items() if "seed" in keys})

    def to_text(self) -> str:
        parts = []
        for section, keys in SCHEMA.items():
            parts.append(f"[{section}]")
            parts.extend(f"{k} = {_format_value(self.values[section][k])}" for k in keys)
            parts.append("")
        return "\n".join(parts)

    def validate_paths(self) -> None:
        if self.get("data", "source") == "idx":
            for key in ("train_images", "train_labels"):
                if not self.get("data", key):
                    raise ConfigError(f"data.{key} is required when data.source = idx", key=f"data.{key}")
        for section, key in (("data", "train_images"), ("data", "train_labels"), ("data", "test_images"),
                             ("data", "test_labels"), ("data", "ood_images"), ("data", "ood_exclude"),
                             ("model", "bundle")):
            p = self.get(section, key)
            if p and not Path(p).is_file():
                raise ConfigError(f"{section}.{key}: file not found: {p}", key=f"{section}.{key}")

    # typed views

    def vae_config(self) -> VaeConfig:
        g = self.values["model"]
        return VaeConfig(g["latent_dim"], g["hidden_dim"], g["epochs"], g["batch_size"], g["learning_rate"], g["seed"])

    def softmax_config(self) -> SoftmaxConfig:
        g = self.values["softmax"]
        return SoftmaxConfig(g["hidden_dim"], g["epochs"], g["batch_size"], g["learning_rate"], g["seed"])

    def search_config(self) -> SearchConfig:
        g = self.values["search"]
        lb = LbfgsConfig(memory=g["memory"], max_iters=g["max_iters"], grad_tolerance=g["grad_tolerance"])
        return SearchConfig(g["mc_samples"], g["refine_top"], lb, g["box_projection"])

    def measure(self) -> SimilarityMeasure:
        return SimilarityMeasure(self.get("search", "p"))


def default_config_text() -> str:
    return resources.files("genclassify").joinpath("configs/desk_default.cfg").read_text(encoding="utf-8")


def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_text(default_config_text(), "desk_default.cfg")


# ---------------------------------------------------------------------------
# Stages


@dataclass(eq=False)
class ExperimentData:
    train: Dataset
    test: Dataset
    augmented: Dataset


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.values["data"]
    if d["source"] == "synthetic":
        full = make_synthetic(d["num_classes"], d["per_class"], d["image_size"], d["seed"], d["noise"])
        train, test = split(full, d["train_fraction"], d["seed"])
    else:
        k = d["num_classes"]
        full = load_idx_dataset(d["train_images"], d["train_labels"], num_classes=k)
        if d["test_images"]:
            train = full
            test = load_idx_dataset(d["test_images"], d["test_labels"] or None, num_classes=k)
        else:
            train, test = split(full, d["train_fraction"], d["seed"])
    ood_count = cfg.get("mix", "ood_count")
    if ood_count == 0:
        augmented = augment_ood(test, test.subset([]), MixSpec(len(test), 0, cfg.get("mix", "seed")))
    else:
        if d["ood_images"]:
            exclude = read_exclusion_list(d["ood_exclude"]) if d["ood_exclude"] else ()
            ood = load_idx_dataset(d["ood_images"], ood=True, exclude=exclude, invert=d["ood_invert"],
                                   resize_to=(test.height, test.width), num_classes=test.num_classes)
        else:
            ood = make_synthetic_ood(ood_count, test.height, d["seed"], d["noise"])
        augmented = augment_ood(test, ood, MixSpec(len(test), ood_count, cfg.get("mix", "seed")))
    return ExperimentData(train, test, augmented)


def train_models(cfg: ExperimentConfig, train: Dataset, on_epoch: Optional[Callable[[str], None]] = None
                 ) -> ModelBundle:
    m = cfg.values["model"]
    say = on_epoch or (lambda msg: None)
    if m["bundle"]:
        bundle = load_bundle(m["bundle"], expected_classes=train.num_classes,
                             expected_shape=(train.height, train.width))
        if not bundle.generators:
            raise ValueError(f"{m['bundle']}: bundle has no class generators")
    else:
        gens = []
        for k in range(train.num_classes):
            X = train.class_pixels(k)
            if m["kind"] == "linear":
                gens.append(fit_linear_generator(X, m["latent_dim"], m["box_radius"] or None))
                say(f"linear class {k}: fit on {len(X)} examples, m={m['latent_dim']}")
            else:
                gens.append(train_vae(X, cfg.vae_config(), lambda e, loss, k=k: say(
                    f"vae class {k} epoch {e + 1}: loss {loss:.6f}")))
        bundle = ModelBundle(gens, m["kind"], train.height, train.width, train.num_classes,
                             metadata={"config_hash": config_hash(cfg.values["model"])})
    if bundle.softmax is None:
        bundle.softmax = train_softmax(train, cfg.softmax_config(),
                                       lambda e, loss: say(f"softmax epoch {e + 1}: loss {loss:.6f}"))
    return bundle


class _MemoGenerative:
    """Generative classifier with a cache keyed by image bytes.

    Test images reappear inside the augmented split; predictions are keyed on
    content so the cached value is exactly what a fresh call would return.
    """

    def __init__(self, inner: GenerativeClassifier):
        self.inner = inner
        self.cache: Dict[bytes, Prediction] = {}
        self.lock = threading.Lock()

    def __call__(self, x) -> Prediction:
        key = np.ascontiguousarray(x, dtype=np.float64).tobytes()
        with self.lock:
            hit = self.cache.get(key)
        if hit is None:
            hit = self.inner(x)
            with self.lock:
                self.cache.setdefault(key, hit)
        return hit


def classify_all(cfg: ExperimentConfig, bundle: ModelBundle, data: ExperimentData, threads: int = 1
                 ) -> Dict[str, Dict[str, List[EvalRecord]]]:
    gen = _MemoGenerative(GenerativeClassifier(bundle, cfg.measure(), cfg.search_config(),
                                               cfg.get("search", "seed"), cfg.get("search", "encoder_init")))
    softmax = SoftmaxClassifier(bundle.softmax)
    knn = KnnClassifier(data.train, cfg.get("knn", "k"), cfg.get("knn", "p"))

    def hybrid(x):
        return combine_hybrid(gen(x), softmax_classify(bundle.softmax, x))

    table = {"generative": gen, "knn": knn, "softmax": softmax, "hybrid": hybrid}
    out = {}
    for split_name in SPLITS:
        ds = getattr(data, split_name)
        out[split_name] = {}
        for name in CLASSIFIERS:
            log.info("classifying %s split with %s (%d examples)", split_name, name, len(ds))
            out[split_name][name] = classify_dataset(table[name], ds, parallelism=threads)
    return out


# ---------------------------------------------------------------------------
# Reporting


def ood_covered_at_percentile(records: List[EvalRecord], q: float = 99.0) -> int:
    """Number of OOD records with confidence at or above the q-th percentile."""
    conf = np.array([r.prediction.confidence for r in records])
    thr = np.percentile(conf, q)
    return int(sum(r.ood_flag and r.prediction.confidence >= thr for r in records))


def distance_ratio(records: List[EvalRecord]) -> float:
    """Mean best-match distance on OOD records over the in-distribution mean."""
    dist = np.array([-r.prediction.confidence for r in records])
    ood = np.array([r.ood_flag for r in records])
    if not ood.any() or ood.all():
        return float("nan")
    return float(dist[ood].mean() / dist[~ood].mean())


def hybrid_excess(hybrid: List[EvalRecord], softmax: List[EvalRecord], grid=DOMINANCE_GRID) -> float:
    """Largest amount by which hybrid risk exceeds softmax risk over the grid."""
    ch, cs = risk_coverage(hybrid), risk_coverage(softmax)
    return max(risk_at_coverage(ch, c)[0] - risk_at_coverage(cs, c)[0] for c in grid if c >= 1.0 / ch.total)


def summarize_run(records) -> dict:
    summary = {}
    for split_name, by_clf in records.items():
        summary[split_name] = {}
        for name, recs in by_clf.items():
            entry = {"n": len(recs)}
            if recs:
                curve = risk_coverage(recs)
                entry.update(
                    accuracy=accuracy(recs),
                    min_risk=min_risk(curve),
                    risk_at={f"{c:g}": risk_at_coverage(curve, c)[0] for c in REPORT_COVERAGES
                             if c >= 1.0 / curve.total},
                )
            summary[split_name][name] = entry
    aug = records["augmented"]
    flags = [r.ood_flag for r in aug["generative"]]
    if any(flags) and not all(flags):
        summary["checks"] = {
            "distance_ratio": distance_ratio(aug["generative"]),
            "softmax_ood_covered_at_p99": ood_covered_at_percentile(aug["softmax"]),
            "hybrid_max_excess_over_softmax": hybrid_excess(aug["hybrid"], aug["softmax"]),
            "softmax_min_risk_exceeds_generative":
                summary["augmented"]["softmax"]["min_risk"] > summary["augmented"]["generative"]["min_risk"],
        }
    return summary


def format_summary(summary: dict) -> str:
    cov_cols = [f"{c:g}" for c in REPORT_COVERAGES]
    lines = []
    for split_name in SPLITS:
        lines.append(f"{split_name} split")
        lines.append(f"  {'classifier':<11}{'n':>6}{'accuracy':>10}{'min_risk':>10}"
                     + "".join(f"{'r@' + c:>9}" for c in cov_cols))
        for name in CLASSIFIERS:
            e = summary[split_name][name]
            if e["n"] == 0:
                lines.append(f"  {name:<11}{0:>6}")
                continue
            risks = "".join(f"{e['risk_at'].get(c, float('nan')):>9.4f}" for c in cov_cols)
            lines.append(f"  {name:<11}{e['n']:>6}{e['accuracy']:>10.4f}{e['min_risk']:>10.4f}{risks}")
        lines.append("")
    checks = summary.get("checks")
    if checks:
        lines.append("augmented split checks")
        lines.append(f"  OOD / in-distribution mean best-match distance: {checks['distance_ratio']:.4f}")
        lines.append(f"  OOD examples covered at softmax 99th-percentile confidence: "
                     f"{checks['softmax_ood_covered_at_p99']}")
        lines.append(f"  hybrid risk minus softmax risk, max over coverages 0.01..1: "
                     f"{checks['hybrid_max_excess_over_softmax']:.4f}")
        lines.append(f"  softmax min_risk exceeds generative min_risk: "
                     f"{'yes' if checks['softmax_min_risk_exceeds_generative'] else 'no'}")
    return "\n".join(lines) + "\n"


def _rationale_grid(x, prediction: Prediction, h: int, w: int) -> np.ndarray:
    """Input image followed by each class's best generation, separated by 1px gaps."""
    tiles = [np.asarray(x).reshape(h, w)] + [e.image.reshape(h, w) for e in prediction.rationale]
    gap = np.zeros((h, 1))
    row = [tiles[0]]
    for t in tiles[1:]:
        row.extend([gap, t])
    return np.hstack(row)


def write_rationales(out: Path, data: Dataset, gen_records, softmax_records, count: int) -> None:
    """Generative rationales for the OOD examples softmax is most confident about."""
    out.mkdir(parents=True, exist_ok=True)
    ood = [r for r in softmax_records if r.ood_flag]
    ood.sort(key=lambda r: (-r.prediction.confidence, r.index))
    lines = ["rank,index,softmax_label,softmax_confidence,generative_label,generative_confidence,class_scores"]
    for rank, r in enumerate(ood[:count]):
        g = gen_records[r.index].prediction
        grid = _rationale_grid(data.pixels[r.index], g, data.height, data.width)
        write_pgm(out / f"ood_{rank:02d}_idx{r.index}.pgm", grid)
        scores = " ".join(format(e.score, ".6f") for e in g.rationale)
        lines.append(f"{rank},{r.index},{r.prediction.label},{r.prediction.confidence:.6f},"
                     f"{g.label},{g.confidence:.6f},{scores}")
    (out / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_outputs(out: Path, cfg: ExperimentConfig, data: ExperimentData, records, bundle: ModelBundle) -> dict:
    (out / "records").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    for split_name, by_clf in records.items():
        curves, labels = [], []
        for name, recs in by_clf.items():
            write_records_csv(recs, out / "records" / f"{split_name}_{name}.csv")
            if recs:
                curve = risk_coverage(recs)
                emit_curve_csv(curve, out / "curves" / f"{split_name}_{name}.csv")
                curves.append(curve)
                labels.append(name)
        if curves:
            emit_svg(curves, labels, out / f"riskcov_{split_name}.svg", title=f"risk-coverage, {split_name} split")
    aug = records["augmented"]
    write_rationales(out / "rationale", data.augmented, aug["generative"], aug["softmax"],
                     cfg.get("run", "rationale_count"))
    save_bundle(bundle, out / "bundle.gcb")
    summary = summarize_run(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.txt").write_text(format_summary(summary), encoding="utf-8")
    return summary


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise FileExistsError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1, force: bool = False,
                   on_epoch: Optional[Callable[[str], None]] = None) -> dict:
    """Run every stage and return the summary dict.

    An INCOMPLETE marker sits in the output directory until the last file is
    written, so a crashed run is recognisable.
    """
    out = Path(out_dir or cfg.get("run", "out_dir") or "experiment_out")
    cfg.validate_paths()
    _prepare_out_dir(out, force)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("run did not finish\n", encoding="utf-8")
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except Exception as exc:
            marker.write_text(f"run failed in stage {name}: {exc}\n", encoding="utf-8")
            raise ExperimentError(name, exc) from exc

    data = stage("data", build_data, cfg)
    bundle = stage("train", train_models, cfg, data.train, on_epoch)
    if bundle.num_classes != data.train.num_classes:
        raise ExperimentError("train", ValueError("bundle class count does not match data"))
    records = stage("classify", classify_all, cfg, bundle, data, threads)
    summary = stage("report", write_outputs, out, cfg, data, records, bundle)
    marker.unlink()
    return summary
