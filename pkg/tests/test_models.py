import numpy as np
import pytest

from genclassify.data import Dataset
from genclassify.models import (
    BUNDLE_MAGIC, BundleError, LinearGenerator, MlpDecoder, ModelBundle, SoftmaxConfig, SoftmaxModel,
    TrainingError, VaeConfig, VaeModel, encode, fit_linear_generator, generate, grad_z_similarity,
    init_vae_params, kl_standard_normal, load_bundle, powered_distance, save_bundle, softmax_loss_and_grad,
    softmax_predict, train_softmax, train_vae, vae_loss_and_grad,
)
from genclassify.numkit import Rng, finite_diff_grad, pca_fit, relative_error
from genclassify.search import L1, L2, SimilarityMeasure


def random_decoder(seed, m=4, h=12, d=20, scale=0.7):
    r = np.random.default_rng(seed)
    return MlpDecoder(scale * r.normal(size=(h, m)), 0.1 * r.normal(size=h),
                      scale * r.normal(size=(d, h)), 0.1 * r.normal(size=d))


def zero_softmax(d, k, b2=None):
    return SoftmaxModel({"W1": np.zeros((3, d)), "b1": np.zeros(3), "W2": np.zeros((k, 3)),
                         "b2": np.zeros(k) if b2 is None else np.asarray(b2, float)})


# --- linear generator ------------------------------------------------------------


def test_linear_exact_subspace(rng):
    basis = np.linalg.qr(rng.normal(size=(30, 3)))[0].T
    X = 0.5 + 0.05 * rng.normal(size=(40, 3)) @ basis
    gen = fit_linear_generator(X, 3)
    Z = (X - gen.mean) @ gen.components.T
    assert np.max(np.abs(gen.generate_batch(Z) - X)) <= 1e-8


def test_linear_m1_segment():
    a, b = np.array([0.2, 0.4, 0.6]), np.array([0.6, 0.4, 0.2])
    gen = fit_linear_generator(np.stack([a, b]), 1)
    assert np.allclose(gen.mean, (a + b) / 2)
    direction = gen.components[0]
    assert abs(abs(direction @ (b - a)) - np.linalg.norm(b - a)) <= 1e-12
    r = gen.latent_box_radius
    assert np.allclose(gen.generate([r / 1.25]), a) or np.allclose(gen.generate([r / 1.25]), b)


def test_linear_reconstruction_matches_pca_bound(splits):
    X = splits[0].class_pixels(0)
    gen = fit_linear_generator(X, 8)
    fit = pca_fit(X, 8)
    Z = (X - gen.mean) @ gen.components.T
    assert np.all(np.abs(Z) <= gen.latent_box_radius)
    unclipped = gen.mean + Z @ gen.components
    err = np.mean(np.sum((unclipped - X) ** 2, axis=1))
    assert abs(err - fit.eigenvalues[8:].sum()) <= 1e-8
    # clamping to [0,1] can only move reconstructions closer to pixels in [0,1]
    clipped_err = np.mean(np.sum((gen.generate_batch(Z) - X) ** 2, axis=1))
    assert clipped_err <= err + 1e-12


def test_linear_generate_basics(splits):
    gen = fit_linear_generator(splits[0].class_pixels(1), 8)
    assert np.array_equal(generate(gen, np.zeros(8)), np.clip(gen.mean, 0, 1))
    z = np.full(8, 0.3)
    up = gen.mean + z @ gen.components
    down = gen.mean - z @ gen.components
    assert np.allclose((up + down) / 2, gen.mean)
    img = gen.generate(5 * np.ones(8))
    assert img.min() >= 0 and img.max() <= 1
    with pytest.raises(ValueError):
        gen.generate(np.zeros(3))


def test_linear_needs_enough_examples(rng):
    with pytest.raises(ValueError):
        fit_linear_generator(rng.random((5, 10)), 5)


def test_decoder_zero_weights_is_half():
    dec = MlpDecoder(np.zeros((4, 2)), np.zeros(4), np.zeros((6, 4)), np.zeros(6))
    assert np.array_equal(dec.generate(np.array([3.0, -1.0])), np.full(6, 0.5))


# --- gradients ---------------------------------------------------------------------


def test_similarity_gradient_zero_at_coincidence(splits):
    gen = fit_linear_generator(splits[0].class_pixels(0), 8)
    z = np.full(8, 0.1)
    score, grad = grad_z_similarity(gen, gen.generate(z), z, L2)
    assert score == 0.0 and np.array_equal(grad, np.zeros(8))


def test_linear_interior_gradient_closed_form(rng):
    basis = np.linalg.qr(rng.normal(size=(12, 3)))[0].T
    gen = LinearGenerator(np.full(12, 0.5), basis, 1.0)
    z = np.array([0.1, -0.2, 0.05])
    x = np.clip(0.5 + 0.1 * rng.normal(size=12), 0, 1)
    diff = gen.generate(z) - x
    f, g = powered_distance(gen, x, z, 2.0)
    assert np.allclose(-g, -2 * basis @ diff, atol=1e-14)
    score, grad = grad_z_similarity(gen, x, z, L2)
    assert score == pytest.approx(-np.linalg.norm(diff), abs=1e-15)
    assert np.allclose(grad, -basis @ diff / np.linalg.norm(diff), atol=1e-14)


@pytest.mark.parametrize("p", [2.0, 3.0, 1.0])
def test_decoder_gradient_matches_finite_differences(p):
    measure = SimilarityMeasure(p)
    worst = 0.0
    for i in range(20):
        dec = random_decoder(i)
        r = np.random.default_rng(100 + i)
        z = r.normal(size=4)
        x = r.random(20)
        _, g = grad_z_similarity(dec, x, z, measure)
        fd = finite_diff_grad(lambda v: grad_z_similarity(dec, x, v, measure)[0], z, 1e-6)
        worst = max(worst, relative_error(g, fd))
    assert worst <= 1e-4


def test_linear_gradient_matches_finite_differences(splits):
    gen = fit_linear_generator(splits[0].class_pixels(2), 8)
    r = np.random.default_rng(4)
    for _ in range(20):
        z = r.uniform(-0.5, 0.5, size=8)
        x = splits[1].pixels[r.integers(len(splits[1]))]
        _, g = grad_z_similarity(gen, x, z, L2)
        fd = finite_diff_grad(lambda v: grad_z_similarity(gen, x, v, L2)[0], z, 1e-6)
        assert relative_error(g, fd) <= 1e-4


def test_vae_elbo_gradient_matches_finite_differences():
    cfg = VaeConfig(latent_dim=3, hidden_dim=6)
    d = 10
    for i in range(20):
        r = np.random.default_rng(i)
        params = init_vae_params(d, cfg, Rng(i))
        params = {k: v + 0.1 * r.normal(size=v.shape) for k, v in params.items()}
        X = r.random((4, d))
        eps = r.normal(size=(4, 3))
        _, grads = vae_loss_and_grad(params, X, eps)
        for name in ("We", "Wlv", "W1", "b2"):
            def f(v, name=name):
                q = dict(params)
                q[name] = v.reshape(params[name].shape)
                return vae_loss_and_grad(q, X, eps)[0]
            fd = finite_diff_grad(f, params[name].ravel(), 1e-6)
            assert relative_error(grads[name].ravel(), fd) <= 1e-4, name


def test_softmax_gradient_matches_finite_differences():
    d, h, k = 8, 5, 3
    for i in range(20):
        r = np.random.default_rng(i)
        params = {"W1": r.normal(size=(h, d)), "b1": r.normal(size=h),
                  "W2": r.normal(size=(k, h)), "b2": r.normal(size=k)}
        X = r.random((6, d))
        y = r.integers(0, k, size=6)
        _, grads = softmax_loss_and_grad(params, X, y)
        for name in params:
            def f(v, name=name):
                q = dict(params)
                q[name] = v.reshape(params[name].shape)
                return softmax_loss_and_grad(q, X, y)[0]
            fd = finite_diff_grad(f, params[name].ravel(), 1e-6)
            assert relative_error(grads[name].ravel(), fd) <= 1e-4, name


# --- VAE ---------------------------------------------------------------------------


def test_kl_examples():
    assert kl_standard_normal(np.zeros(3), np.zeros(3)) == 0.0
    assert kl_standard_normal(np.array([1.0]), np.array([0.0])) == 0.5


def test_encode_zero_weights():
    cfg = VaeConfig(latent_dim=2, hidden_dim=3)
    params = {k: np.zeros_like(v) for k, v in init_vae_params(5, cfg, Rng(0)).items()}
    mu, logvar = encode(VaeModel(params), np.full(5, 0.3))
    assert np.array_equal(mu, np.zeros(2)) and np.array_equal(logvar, np.zeros(2))


def test_encode_clamps_logvar():
    cfg = VaeConfig(latent_dim=2, hidden_dim=3)
    params = init_vae_params(5, cfg, Rng(0))
    params["blv"] = np.array([50.0, -50.0])
    _, logvar = encode(VaeModel(params), np.full(5, 0.3))
    assert logvar.tolist() == [10.0, -10.0]


def test_vae_training_decreases_loss_and_is_deterministic(splits):
    X = splits[0].class_pixels(0)
    cfg = VaeConfig(epochs=20)
    a = train_vae(X, cfg)
    b = train_vae(X, cfg)
    assert a.loss_history[-1] <= a.loss_history[0]
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


@pytest.mark.parametrize("seed", range(5))
def test_vae_default_config_losses_finite(splits, seed):
    model = train_vae(splits[0].class_pixels(seed % 4), VaeConfig(seed=seed))
    assert len(model.loss_history) == VaeConfig().epochs + 1
    assert np.all(np.isfinite(model.loss_history))
    assert model.loss_history[-1] <= model.loss_history[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_vae_divergence_reports_epoch():
    X = np.full((4, 6), np.nan)
    with pytest.raises(TrainingError) as info:
        train_vae(X, VaeConfig(epochs=3, latent_dim=2, hidden_dim=3))
    assert info.value.epoch == 0


def test_trained_vae_encoder_beats_prior_samples(vae_bundle, splits):
    test = splits[1]
    wins = []
    for x, y in zip(test.pixels, test.labels):
        vae = vae_bundle.generators[y]
        mu, _ = encode(vae, x)
        enc = np.linalg.norm(vae.generate(mu) - x)
        prior = vae.generate_batch(Rng(1).child_for_bytes(x.tobytes()).normal(size=(100, vae.latent_dim)))
        wins.append(enc < np.linalg.norm(prior - x, axis=1).min())
    assert np.mean(wins) >= 0.9


# --- softmax ----------------------------------------------------------------------


def test_softmax_separable_toy():
    r = np.random.default_rng(0)
    X = np.vstack([r.uniform(0, 0.4, size=(20, 2)), r.uniform(0.6, 1, size=(20, 2))])
    ds = Dataset(X, [0] * 20 + [1] * 20, [False] * 40, 1, 2, 2)
    model = train_softmax(ds, SoftmaxConfig(hidden_dim=8, epochs=200, learning_rate=1e-2))
    assert np.mean(model.probabilities(X).argmax(1) == ds.labels) == 1.0


def test_softmax_tie_and_saturation():
    label, conf = softmax_predict(zero_softmax(4, 3), np.zeros(4))
    assert label == 0 and conf == 1 / 3
    label, conf = softmax_predict(zero_softmax(4, 2, [0.0, 50.0]), np.zeros(4))
    assert label == 1 and conf >= 1 - 1e-20


def test_softmax_probabilities_simplex(softmax_model, rng):
    P = softmax_model.probabilities(rng.random((100, 256)))
    assert np.all(P >= 0)
    assert np.max(np.abs(P.sum(1) - 1)) <= 1e-12


def test_softmax_training(softmax_model, splits):
    hist = softmax_model.loss_history
    assert hist[-1] < hist[0]
    acc = np.mean(softmax_model.probabilities(splits[1].pixels).argmax(1) == splits[1].labels)
    assert acc >= 0.95
    assert acc == 1.0  # frozen from the oracle run
    again = train_softmax(splits[0])
    assert all(again.params[k].tobytes() == softmax_model.params[k].tobytes() for k in again.params)


def test_softmax_rejects_ood(ood_set):
    with pytest.raises(ValueError):
        train_softmax(ood_set)


def test_softmax_predict_dimension_error(softmax_model):
    with pytest.raises(ValueError):
        softmax_predict(softmax_model, np.zeros(3))


# --- bundles --------------------------------------------------------------------------


def test_bundle_round_trip(tmp_path, linear_bundle, softmax_model, rng):
    bundle = ModelBundle(linear_bundle.generators, "linear", 16, 16, 4, softmax_model, {"note": "x"})
    save_bundle(bundle, tmp_path / "b.gcb")
    back = load_bundle(tmp_path / "b.gcb", expected_classes=4, expected_shape=(16, 16))
    Z = rng.uniform(-1, 1, size=(100, 8))
    for g0, g1 in zip(bundle.generators, back.generators):
        assert g0.generate_batch(Z).tobytes() == g1.generate_batch(Z).tobytes()
        assert np.max(np.abs(g1.components @ g1.components.T - np.eye(8))) <= 1e-10
    X = rng.random((100, 256))
    assert softmax_model.probabilities(X).tobytes() == back.softmax.probabilities(X).tobytes()
    assert back.metadata == {"note": "x"}


def test_bundle_vae_round_trip(tmp_path, vae_bundle, rng):
    save_bundle(vae_bundle, tmp_path / "v.gcb")
    back = load_bundle(tmp_path / "v.gcb")
    x = rng.random(256)
    for g0, g1 in zip(vae_bundle.generators, back.generators):
        assert np.array_equal(encode(g0, x)[0], encode(g1, x)[0])
        assert g0.loss_history == g1.loss_history


def test_bundle_rejects_corruption(tmp_path, linear_bundle):
    path = tmp_path / "b.gcb"
    save_bundle(linear_bundle, path)
    raw = path.read_bytes()
    path.write_bytes(b"X" + raw[1:])
    with pytest.raises(BundleError, match="magic"):
        load_bundle(path)
    mid = bytearray(raw)
    mid[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(mid))
    with pytest.raises(BundleError, match="checksum"):
        load_bundle(path)
    path.write_bytes(raw[:-100])
    with pytest.raises(BundleError):
        load_bundle(path)


def test_bundle_version_mismatch(tmp_path, linear_bundle):
    import hashlib
    path = tmp_path / "b.gcb"
    save_bundle(linear_bundle, path)
    body = bytearray(path.read_bytes()[:-32])
    body[len(BUNDLE_MAGIC)] = 99
    path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(BundleError, match="version"):
        load_bundle(path)


def test_bundle_class_and_shape_checks(tmp_path, linear_bundle):
    path = tmp_path / "b.gcb"
    save_bundle(linear_bundle, path)
    assert load_bundle(path, expected_classes=4).num_classes == 4
    with pytest.raises(BundleError, match="classes"):
        load_bundle(path, expected_classes=3)
    with pytest.raises(BundleError):
        load_bundle(path, expected_shape=(28, 28))


def test_bundle_invariants(linear_bundle):
    with pytest.raises(BundleError):
        ModelBundle(linear_bundle.generators[:3], "linear", 16, 16, 4)
    with pytest.raises(BundleError):
        ModelBundle([], "linear", 16, 16, 4)


def test_l1_measure_has_gradient(splits):
    gen = fit_linear_generator(splits[0].class_pixels(0), 8)
    score, grad = grad_z_similarity(gen, splits[1].pixels[0], np.zeros(8), L1)
    assert score < 0 and grad.shape == (8,)
