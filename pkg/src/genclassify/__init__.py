"""Generative classifiers with abstention, evaluated by risk-coverage analysis."""

from .classify import (
    ClassifierKind, EvalRecord, GenerativeClassifier, HybridClassifier, KnnClassifier, Prediction,
    SoftmaxClassifier, classify_dataset, gc_classify, hybrid_classify, knn_classify, softmax_classify,
)
from .data import Dataset, MixSpec, augment_ood, load_idx, make_synthetic, make_synthetic_ood, split
from .evaluation import RiskCoverageCurve, accuracy, min_risk, risk_at_coverage, risk_coverage
from .models import (
    LinearGenerator, MlpDecoder, ModelBundle, SoftmaxModel, VaeModel, fit_linear_generator,
    load_bundle, save_bundle, train_softmax, train_vae,
)
from .numkit import LbfgsConfig, Rng, lbfgs_minimize
from .search import SearchConfig, SimilarityMeasure, encoder_init_search, latent_search

__version__ = "0.1.0"
