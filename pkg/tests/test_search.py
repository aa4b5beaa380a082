import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genclassify.models import LinearGenerator, encode
from genclassify.numkit import LbfgsConfig, Rng, least_squares_solve
from genclassify.search import (
    L1, L2, SearchConfig, SimilarityMeasure, batch_similarity, encoder_init_search, latent_search, similarity,
)


def interior_generator(seed=0, d=64, m=4, radius=3.0):
    r = np.random.default_rng(seed)
    basis = np.linalg.qr(r.normal(size=(d, m)))[0].T  # orthonormal rows
    return LinearGenerator(np.full(d, 0.5), basis, radius)


def interior_target(gen, r):
    """An image whose least-squares latent lies inside the box with no clamped pixel."""
    while True:
        z0 = r.uniform(-1, 1, size=gen.latent_dim)
        x = gen.mean + z0 @ gen.components + 0.01 * r.normal(size=gen.image_dim)
        z_ls = least_squares_solve(gen.components.T, x - gen.mean)
        raw = gen.mean + z_ls @ gen.components
        if x.min() >= 0 and x.max() <= 1 and raw.min() > 0 and raw.max() < 1:
            return x


# --- similarity ------------------------------------------------------------------------


def test_similarity_examples():
    assert similarity(L2, [0.3, 0.4], [0.3, 0.4]) == 0.0
    assert similarity(L2, [0.0, 0.0], [3.0, 4.0]) == -5.0
    assert similarity(L1, [1.0, 1.0], [0.0, 0.0]) == -2.0
    assert similarity(SimilarityMeasure(3), [0.0], [2.0]) == pytest.approx(-2.0)


def test_similarity_errors():
    with pytest.raises(ValueError):
        similarity(L2, [0.0, 1.0], [0.0])
    with pytest.raises(ValueError):
        SimilarityMeasure(0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_similarity_properties(seed, p):
    r = np.random.default_rng(seed)
    a, b = r.random(7), r.random(7)
    m = SimilarityMeasure(p)
    assert similarity(m, a, a) == 0
    assert similarity(m, a, b) <= 0
    assert similarity(m, a, b) == pytest.approx(similarity(m, b, a), abs=1e-15)
    assert batch_similarity(m, np.stack([a, b]), a)[1] == pytest.approx(similarity(m, b, a), abs=1e-12)


# --- latent search ----------------------------------------------------------------------


def test_search_recovers_generated_image(linear_bundle):
    gen = linear_bundle.generators[0]
    z0 = gen.sample_prior(Rng(9), 1)[0] * 0.2
    res = latent_search(gen, gen.generate(z0), L2, SearchConfig(), Rng(1))
    assert res.score >= -1e-6


def test_search_matches_closed_form():
    gen = interior_generator()
    r = np.random.default_rng(1)
    for i in range(50):
        x = interior_target(gen, r)
        res = latent_search(gen, x, L2, SearchConfig(mc_samples=200), Rng(i))
        z_ls = least_squares_solve(gen.components.T, x - gen.mean)
        assert np.max(np.abs(res.z_star - z_ls)) <= 1e-4
        assert abs(res.score - similarity(L2, x, gen.generate(z_ls))) <= 1e-6


def test_search_result_invariants(linear_bundle, splits, ood_set):
    gen = linear_bundle.generators[1]
    r = gen.latent_box_radius
    for x in list(splits[1].pixels[:10]) + list(ood_set.pixels[:10]):
        res = latent_search(gen, x, L2, SearchConfig(mc_samples=100), Rng(3))
        assert res.score >= res.mc_best_score
        assert np.array_equal(res.image, gen.generate(res.z_star))
        assert np.all(np.abs(res.z_star) <= r)
        assert res.evaluations > 100


def test_search_deterministic(linear_bundle, splits):
    gen, x = linear_bundle.generators[2], splits[1].pixels[5]
    a = latent_search(gen, x, L2, SearchConfig(), Rng(4))
    b = latent_search(gen, x, L2, SearchConfig(), Rng(4))
    assert a.z_star.tobytes() == b.z_star.tobytes() and a.score == b.score


def test_search_without_refinement(linear_bundle, splits):
    gen, x = linear_bundle.generators[0], splits[1].pixels[0]
    res = latent_search(gen, x, L2, SearchConfig(mc_samples=50, lbfgs=LbfgsConfig(max_iters=0)), Rng(0))
    assert res.score == res.mc_best_score and res.evaluations == 50


def test_more_samples_score_higher_on_average(vae_bundle, splits):
    gen = vae_bundle.generators[0]
    xs = splits[1].pixels[:50]
    no_refine = LbfgsConfig(max_iters=0)
    few = np.mean([latent_search(gen, x, L2, SearchConfig(10, lbfgs=no_refine), Rng(i)).score
                   for i, x in enumerate(xs)])
    many = np.mean([latent_search(gen, x, L2, SearchConfig(1000, lbfgs=no_refine), Rng(i)).score
                    for i, x in enumerate(xs)])
    assert many >= few


class _BrokenGenerator(LinearGenerator):
    """Finite images, but the gradient pass always produces NaN."""

    def pullback(self, z):
        image, back = super().pullback(z)
        return image, lambda v: np.full(self.latent_dim, np.nan)


def test_search_falls_back_when_refinement_diverges():
    base = interior_generator()
    gen = _BrokenGenerator(base.mean, base.components, base.latent_box_radius)
    x = interior_target(gen, np.random.default_rng(0))
    res = latent_search(gen, x, L2, SearchConfig(mc_samples=20), Rng(0))
    assert res.refinement_failed
    # the start is re-scored on the single-image path, which may differ from the batch path by an ulp
    assert res.score >= res.mc_best_score
    assert res.score == pytest.approx(res.mc_best_score, abs=1e-12)


def test_search_l1_never_loses_incumbent(linear_bundle, splits):
    gen = linear_bundle.generators[3]
    for x in splits[1].pixels[:5]:
        res = latent_search(gen, x, L1, SearchConfig(mc_samples=50), Rng(0))
        assert res.score >= res.mc_best_score


def test_search_dimension_error(linear_bundle):
    with pytest.raises(ValueError):
        latent_search(linear_bundle.generators[0], np.zeros(3))


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(mc_samples=0)
    with pytest.raises(ValueError):
        SearchConfig(refine_top=0)


# --- encoder initialization -----------------------------------------------------------------


def test_encoder_init_without_refinement_is_mean(vae_bundle, splits):
    vae, x = vae_bundle.generators[0], splits[1].pixels[0]
    res = encoder_init_search(vae, x, L2, SearchConfig(lbfgs=LbfgsConfig(max_iters=0)))
    assert np.array_equal(res.z_star, encode(vae, x)[0])
    assert res.evaluations == 1


def test_encoder_init_refinement_only_improves(vae_bundle, splits, ood_set):
    vae = vae_bundle.generators[1]
    for x in list(splits[1].pixels[:10]) + list(ood_set.pixels[:5]):
        base = encoder_init_search(vae, x, L2, SearchConfig(lbfgs=LbfgsConfig(max_iters=0)))
        refined = encoder_init_search(vae, x, L2, SearchConfig())
        assert refined.score >= base.score


def test_encoder_init_accuracy_with_fewer_evaluations(vae_bundle, splits):
    test = splits[1]
    idx = range(0, len(test), 5)
    mc_cfg = SearchConfig()
    enc_cfg = SearchConfig(lbfgs=LbfgsConfig(max_iters=30))
    mc_hits, enc_hits, mc_evals, enc_evals = [], [], 0, 0
    for i in idx:
        x, y = test.pixels[i], test.labels[i]
        mc = [latent_search(g, x, L2, mc_cfg, Rng(0).child(i, k)) for k, g in enumerate(vae_bundle.generators)]
        enc = [encoder_init_search(g, x, L2, enc_cfg) for g in vae_bundle.generators]
        mc_hits.append(np.argmax([r.score for r in mc]) == y)
        enc_hits.append(np.argmax([r.score for r in enc]) == y)
        mc_evals += sum(r.evaluations for r in mc)
        enc_evals += sum(r.evaluations for r in enc)
    assert np.mean(enc_hits) >= np.mean(mc_hits) - 0.01
    assert mc_evals >= 10 * enc_evals
