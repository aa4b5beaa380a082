"""Latent inversion: find the generator output closest to a test image.

Monte Carlo draws from the generator's prior pick the starting points, then
L-BFGS refines them. The refinement minimizes ``sum |G(z) - x|^p``, which
has the same minimizers as the reported score ``-||G(z) - x||_p`` but is
smooth at p=2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import VaeModel, encode, powered_distance
from .numkit import LbfgsConfig, OptimizationDiverged, Rng, lbfgs_minimize


@dataclass(frozen=True)
class SimilarityMeasure:
    """Negative L^p distance; larger means more similar, 0 at identity."""

    p: float = 2.0
    kind: str = "NEG_LP"

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError("p must be >= 1")
        if self.kind != "NEG_LP":
            raise ValueError(f"unsupported similarity kind {self.kind!r}")


L2 = SimilarityMeasure(2.0)
L1 = SimilarityMeasure(1.0)


def similarity(measure: SimilarityMeasure, x1, x2) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x1.shape} vs {x2.shape}")
    diff = np.abs(x1 - x2).ravel()
    if measure.p == 2:
        return -float(np.sqrt(diff @ diff))
    if measure.p == 1:
        return -float(diff.sum())
    return -float(np.sum(diff**measure.p) ** (1.0 / measure.p))


def batch_similarity(measure: SimilarityMeasure, X, x) -> np.ndarray:
    diff = np.abs(np.asarray(X) - np.asarray(x))
    if measure.p == 2:
        return -np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if measure.p == 1:
        return -diff.sum(axis=1)
    return -np.sum(diff**measure.p, axis=1) ** (1.0 / measure.p)


@dataclass(frozen=True)
class SearchConfig:
    mc_samples: int = 500
    refine_top: int = 3
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    box_projection: bool = True

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.refine_top < 1:
            raise ValueError("refine_top must be >= 1")


@dataclass(frozen=True, eq=False)
class SearchResult:
    z_star: np.ndarray
    image: np.ndarray
    score: float
    mc_best_score: float
    class_id: int = -1
    evaluations: int = 0
    refinement_failed: bool = False


class _CountingObjective:
    def __init__(self, gen, x, p):
        self.gen, self.x, self.p = gen, x, p
        self.calls = 0

    def __call__(self, z):
        self.calls += 1
        return powered_distance(self.gen, self.x, z, self.p)


def _refine(gen, x, measure, starts, config, incumbent_z, incumbent_score):
    """Run L-BFGS from each start and keep the best point seen, incumbent included."""
    objective = _CountingObjective(gen, x, measure.p)
    bounds = gen.bounds if (config.box_projection and gen.bounds is not None) else None
    best_z, best_score = incumbent_z, incumbent_score
    failures = 0
    for z0 in starts:
        try:
            res = lbfgs_minimize(objective, z0, config.lbfgs, bounds=bounds)
            z = res.x
        except OptimizationDiverged as exc:
            failures += 1
            z = exc.last_x
        score = similarity(measure, x, gen.generate(z))
        if score > best_score:
            best_z, best_score = z, score
    return best_z, best_score, objective.calls, failures == len(starts) and len(starts) > 0


def latent_search(gen, x, measure: SimilarityMeasure = L2, config: SearchConfig = SearchConfig(),
                  rng: Optional[Rng] = None, class_id: int = -1) -> SearchResult:
    """Approximate argmax_z s(x, G(z)) by MC sampling plus L-BFGS refinement.

    The returned score is never below the best Monte Carlo score.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gen.image_dim,):
        raise ValueError(f"image must have shape ({gen.image_dim},), got {x.shape}")
    if rng is None:
        rng = Rng(0)
    Z = gen.sample_prior(rng, config.mc_samples)
    scores = batch_similarity(measure, gen.generate_batch(Z), x)
    order = np.argsort(-scores, kind="stable")
    mc_best = float(scores[order[0]])
    starts = Z[order[: config.refine_top]] if config.lbfgs.max_iters > 0 else []
    z, score, calls, failed = _refine(gen, x, measure, starts, config, Z[order[0]], mc_best)
    return SearchResult(np.array(z), gen.generate(z), score, mc_best, class_id,
                        config.mc_samples + calls, failed)


def encoder_init_search(vae: VaeModel, x, measure: SimilarityMeasure = L2,
                        config: SearchConfig = SearchConfig(), class_id: int = -1) -> SearchResult:
    """Start refinement at the encoder mean instead of Monte Carlo samples.

    With ``config.lbfgs.max_iters == 0`` the encoder mean is returned as is.
    """
    x = np.asarray(x, dtype=np.float64)
    mu, _ = encode(vae, x)
    base = similarity(measure, x, vae.generate(mu))
    starts = [mu] if config.lbfgs.max_iters > 0 else []
    z, score, calls, failed = _refine(vae, x, measure, starts, config, mu, base)
    return SearchResult(np.array(z), vae.generate(z), score, base, class_id, 1 + calls, failed)
