"""Generative, nearest-neighbor, softmax and hybrid classifiers.

Each classifier is a callable ``clf(x) -> Prediction``. Randomness inside the
generative classifier is keyed on the image content, so a prediction does not
depend on where the image sits in a dataset or on how work is scheduled.
"""
from __future__ import annotations

import csv
import enum
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import NO_LABEL, Dataset
from .models import ModelBundle, SoftmaxModel, VaeModel, softmax_predict
from .numkit import Rng
from .search import L2, SearchConfig, SimilarityMeasure, batch_similarity, encoder_init_search, latent_search


class ClassifierKind(str, enum.Enum):
    GENERATIVE = "generative"
    DISCRIMINATIVE = "softmax"
    KNN = "knn"
    HYBRID = "hybrid"


@dataclass(frozen=True, eq=False)
class RationaleEntry:
    class_id: int
    image: np.ndarray
    score: float


@dataclass(frozen=True, eq=False)
class Prediction:
    label: int
    confidence: float
    rationale: Tuple[RationaleEntry, ...]
    kind: ClassifierKind
    probabilities: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class EvalRecord:
    index: int
    prediction: Prediction
    true_label: int
    ood_flag: bool

    def __post_init__(self):
        if self.ood_flag and self.true_label != NO_LABEL:
            raise ValueError("OOD records must have no true label")

    @property
    def correct(self) -> bool:
        return (not self.ood_flag) and self.prediction.label == self.true_label


class ClassificationError(RuntimeError):
    def __init__(self, failures: List[Tuple[int, BaseException]]):
        lines = [f"index {i}: {type(e).__name__}: {e}" for i, e in failures[:10]]
        more = f" (+{len(failures) - 10} more)" if len(failures) > 10 else ""
        super().__init__(f"{len(failures)} examples failed to classify{more}:\n" + "\n".join(lines))
        self.failures = failures


def _check_image(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise ValueError(f"image must have shape ({d},), got {x.shape}")
    return x


def _fingerprint(gen) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for name, block in sorted(gen.to_blocks("").items()):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(block, dtype=np.float64).tobytes())
    return h.digest()


def _class_searches(bundle, x, measure, config, rng, encoder_init):
    # each search stream is keyed by the generator's content, not its class index,
    # so identical generators score identically and the tie rule decides
    results = []
    for k, gen in enumerate(bundle.generators):
        if encoder_init and isinstance(gen, VaeModel):
            results.append(encoder_init_search(gen, x, measure, config, class_id=k))
        else:
            results.append(latent_search(gen, x, measure, config, rng.child_for_bytes(_fingerprint(gen)),
                                         class_id=k))
    return results


def gc_classify(bundle: ModelBundle, x, measure: SimilarityMeasure = L2,
                config: SearchConfig = SearchConfig(), rng: Optional[Rng] = None,
                encoder_init: bool = False) -> Prediction:
    """Classify x as the class whose generator reproduces it best.

    Ties between classes go to the lowest class index.
    """
    if len(bundle.generators) < 2:
        raise ValueError("generative classification needs at least two class generators")
    x = _check_image(x, bundle.image_dim)
    if rng is None:
        rng = Rng(0)
    results = _class_searches(bundle, x, measure, config, rng.child_for_bytes(x.tobytes()), encoder_init)
    scores = np.array([r.score for r in results])
    label = int(np.argmax(scores))
    rationale = tuple(RationaleEntry(r.class_id, r.image, r.score) for r in results)
    return Prediction(label, float(scores[label]), rationale, ClassifierKind.GENERATIVE)


def knn_classify(train: Dataset, x, k: int = 1, p: float = 2.0) -> Prediction:
    """Exhaustive k-nearest-neighbor vote under the L^p distance.

    Vote ties go to the class with the smaller summed neighbor distance, then
    to the lower class index. Confidence is minus the nearest distance.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must lie in [1, {len(train)}]")
    if p < 1:
        raise ValueError("p must be >= 1")
    x = _check_image(x, train.dim)
    dist = -batch_similarity(SimilarityMeasure(p), train.pixels, x)
    nearest = np.argsort(dist, kind="stable")[:k]
    votes = {}
    for i in nearest:
        c = int(train.labels[i])
        cnt, total = votes.get(c, (0, 0.0))
        votes[c] = (cnt + 1, total + dist[i])
    label = min(votes, key=lambda c: (-votes[c][0], votes[c][1], c))
    rationale = tuple(RationaleEntry(int(train.labels[i]), train.pixels[i], -float(dist[i])) for i in nearest)
    return Prediction(label, -float(dist[nearest[0]]), rationale, ClassifierKind.KNN)


def softmax_classify(model: SoftmaxModel, x) -> Prediction:
    x = _check_image(x, model.image_dim)
    probs = model.probabilities(x[None])[0]
    label, conf = softmax_predict(model, x)
    return Prediction(label, conf, (), ClassifierKind.DISCRIMINATIVE, probs)


def hybrid_classify(bundle: ModelBundle, softmax_model: SoftmaxModel, x,
                    measure: SimilarityMeasure = L2, config: SearchConfig = SearchConfig(),
                    rng: Optional[Rng] = None, encoder_init: bool = False) -> Prediction:
    """Generative score decides coverage, the softmax model decides the label."""
    if softmax_model.image_dim != bundle.image_dim or softmax_model.num_classes != bundle.num_classes:
        raise ValueError("softmax model and generator bundle disagree on image size or class count")
    gen = gc_classify(bundle, x, measure, config, rng, encoder_init)
    return combine_hybrid(gen, softmax_classify(softmax_model, x))


def combine_hybrid(generative: Prediction, discriminative: Prediction) -> Prediction:
    return Prediction(discriminative.label, generative.confidence, generative.rationale,
                      ClassifierKind.HYBRID, discriminative.probabilities)


# Callable wrappers, convenient for classify_dataset


@dataclass
class GenerativeClassifier:
    bundle: ModelBundle
    measure: SimilarityMeasure = L2
    config: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0
    encoder_init: bool = False
    kind = ClassifierKind.GENERATIVE

    def __call__(self, x) -> Prediction:
        return gc_classify(self.bundle, x, self.measure, self.config, Rng(self.seed), self.encoder_init)


@dataclass
class KnnClassifier:
    train: Dataset
    k: int = 1
    p: float = 2.0
    kind = ClassifierKind.KNN

    def __call__(self, x) -> Prediction:
        return knn_classify(self.train, x, self.k, self.p)


@dataclass
class SoftmaxClassifier:
    model: SoftmaxModel
    kind = ClassifierKind.DISCRIMINATIVE

    def __call__(self, x) -> Prediction:
        return softmax_classify(self.model, x)


@dataclass
class HybridClassifier:
    bundle: ModelBundle
    softmax: SoftmaxModel
    measure: SimilarityMeasure = L2
    config: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0
    encoder_init: bool = False
    kind = ClassifierKind.HYBRID

    def __call__(self, x) -> Prediction:
        return hybrid_classify(self.bundle, self.softmax, x, self.measure, self.config,
                               Rng(self.seed), self.encoder_init)


def classify_dataset(classifier: Callable[[np.ndarray], Prediction], dataset: Dataset,
                     parallelism: int = 1, progress: Optional[Callable[[int, int], None]] = None
                     ) -> List[EvalRecord]:
    """Classify every example; records come back in dataset order.

    Per-example failures are collected and raised together.
    """
    n = len(dataset)

    def work(i):
        try:
            return classifier(dataset.pixels[i])
        except Exception as exc:  # gathered and re-raised below
            return exc

    if parallelism <= 1 or n <= 1:
        outputs = []
        for i in range(n):
            outputs.append(work(i))
            if progress:
                progress(i + 1, n)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outputs = list(pool.map(work, range(n)))
        if progress:
            progress(n, n)
    failures = [(i, o) for i, o in enumerate(outputs) if isinstance(o, BaseException)]
    if failures:
        raise ClassificationError(failures)
    return [EvalRecord(i, outputs[i], int(dataset.labels[i]), bool(dataset.ood[i])) for i in range(n)]


# ---------------------------------------------------------------------------
# Record CSV

RECORD_COLUMNS = ("index", "true_label", "ood", "pred_label", "confidence", "classifier")


def write_records_csv(records: Sequence[EvalRecord], path) -> None:
    """UTF-8 CSV; an empty true_label means the example has no class."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([
                r.index,
                "" if r.true_label == NO_LABEL else r.true_label,
                int(r.ood_flag),
                r.prediction.label,
                format(r.prediction.confidence, ".17g"),
                r.prediction.kind.value,
            ])


def read_records_csv(path) -> List[EvalRecord]:
    """Inverse of write_records_csv (rationales are not stored)."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(RECORD_COLUMNS)}")
        for row in reader:
            true = NO_LABEL if row["true_label"] == "" else int(row["true_label"])
            pred = Prediction(int(row["pred_label"]), float(row["confidence"]), (),
                              ClassifierKind(row["classifier"]))
            out.append(EvalRecord(int(row["index"]), pred, true, row["ood"] == "1"))
    return out


def confidence_percentile(records: Sequence[EvalRecord], confidence: float) -> float:
    """Percentage of ``records`` whose confidence is at or below ``confidence``."""
    if not records:
        raise ValueError("no records")
    conf = np.array([r.prediction.confidence for r in records])
    return 100.0 * float(np.mean(conf <= confidence))
