"""Per-class generators, the softmax baseline, training and bundle I/O.

Every generator exposes the same small surface used by latent search:
``latent_dim``, ``prior`` ("box" or "normal"), ``generate``,
``generate_batch``, ``pullback`` and ``sample_prior``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numkit import Rng, pca_fit

LOGVAR_CLAMP = 10.0


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class BundleError(ValueError):
    pass


def _check_latent(z, m):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (m,):
        raise ValueError(f"latent vector must have shape ({m},), got {z.shape}")
    return z


def _sigmoid(a):
    # split form keeps exp from overflowing on either side
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


# ---------------------------------------------------------------------------
# Generators


@dataclass(frozen=True, eq=False)
class LinearGenerator:
    """Affine PCA manifold ``clip(mean + components.T @ z, 0, 1)`` with a box prior."""

    mean: np.ndarray
    components: np.ndarray
    latent_box_radius: float

    prior = "box"

    @property
    def latent_dim(self) -> int:
        return self.components.shape[0]

    @property
    def image_dim(self) -> int:
        return self.mean.shape[0]

    def generate(self, z) -> np.ndarray:
        z = _check_latent(z, self.latent_dim)
        return np.clip(self.mean + z @ self.components, 0.0, 1.0)

    def generate_batch(self, Z) -> np.ndarray:
        return np.clip(self.mean + np.asarray(Z) @ self.components, 0.0, 1.0)

    def pullback(self, z):
        """Return G(z) and a function mapping dL/dG to dL/dz."""
        z = _check_latent(z, self.latent_dim)
        raw = self.mean + z @ self.components
        inside = (raw > 0.0) & (raw < 1.0)
        image = np.clip(raw, 0.0, 1.0)
        return image, lambda v: self.components @ (v * inside)

    def sample_prior(self, rng: Rng, n: int) -> np.ndarray:
        r = self.latent_box_radius
        return rng.uniform(-r, r, size=(n, self.latent_dim))

    @property
    def bounds(self):
        return (-self.latent_box_radius, self.latent_box_radius)

    def to_blocks(self, prefix):
        return {prefix + "mean": self.mean, prefix + "components": self.components,
                prefix + "radius": np.array([self.latent_box_radius])}

    @classmethod
    def from_blocks(cls, blocks, prefix):
        return cls(blocks[prefix + "mean"], blocks[prefix + "components"],
                   float(blocks[prefix + "radius"][0]))


def fit_linear_generator(class_examples, m: int = 8, box_radius: Optional[float] = None) -> LinearGenerator:
    """Fit a LinearGenerator to one class by PCA.

    ``box_radius`` defaults to 1.25x the largest absolute training coordinate,
    so every training image's projection lies inside the latent box.
    """
    X = np.atleast_2d(np.asarray(class_examples, dtype=np.float64))
    if X.shape[0] < m + 1:
        raise ValueError(f"need at least {m + 1} examples for a {m}-dimensional generator, got {X.shape[0]}")
    fit = pca_fit(X, m)
    if box_radius is None:
        coords = (X - fit.mean) @ fit.components.T
        box_radius = 1.25 * float(np.abs(coords).max()) if coords.size else 1.0
        box_radius = max(box_radius, 1e-6)
    if not box_radius > 0:
        raise ValueError("box_radius must be positive")
    return LinearGenerator(fit.mean, fit.components, float(box_radius))


@dataclass(frozen=True, eq=False)
class MlpDecoder:
    """m -> h (tanh) -> d (sigmoid)."""

    W1: np.ndarray  # (h, m)
    b1: np.ndarray
    W2: np.ndarray  # (d, h)
    b2: np.ndarray

    prior = "normal"

    @property
    def latent_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def image_dim(self) -> int:
        return self.W2.shape[0]

    def generate_batch(self, Z) -> np.ndarray:
        h = np.tanh(np.asarray(Z) @ self.W1.T + self.b1)
        return _sigmoid(h @ self.W2.T + self.b2)

    def generate(self, z) -> np.ndarray:
        z = _check_latent(z, self.latent_dim)
        return self.generate_batch(z[None])[0]

    def pullback(self, z):
        z = _check_latent(z, self.latent_dim)
        h = np.tanh(self.W1 @ z + self.b1)
        out = _sigmoid(self.W2 @ h + self.b2)

        def back(v):
            da2 = v * out * (1.0 - out)
            da1 = (self.W2.T @ da2) * (1.0 - h * h)
            return self.W1.T @ da1

        return out, back

    def sample_prior(self, rng: Rng, n: int) -> np.ndarray:
        return rng.normal(size=(n, self.latent_dim))

    bounds = None

    def to_blocks(self, prefix):
        return {prefix + k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_blocks(cls, blocks, prefix):
        return cls(*(blocks[prefix + k] for k in ("W1", "b1", "W2", "b2")))


def generate(gen, z) -> np.ndarray:
    return gen.generate(z)


def powered_distance(gen, x, z, p: float = 2.0):
    """sum |G(z) - x|^p and its gradient in z.

    This is the smooth surrogate minimized during refinement; for p=2 its
    gradient is 2 * J^T (G(z) - x).
    """
    image, back = gen.pullback(z)
    diff = image - np.asarray(x, dtype=np.float64)
    a = np.abs(diff)
    if p == 1:
        return float(a.sum()), back(np.sign(diff))
    if p == 2:
        return float(diff @ diff), back(2.0 * diff)
    return float(np.sum(a**p)), back(p * a ** (p - 1) * np.sign(diff))


def grad_z_similarity(gen, x, z, measure) -> Tuple[float, np.ndarray]:
    """Score ``-||G(z) - x||_p`` and its gradient with respect to z.

    At an exact match the gradient is taken as zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gen.image_dim,):
        raise ValueError(f"image must have shape ({gen.image_dim},), got {x.shape}")
    p = float(measure.p)
    f, g = powered_distance(gen, x, z, p)
    if f == 0.0:
        return 0.0, np.zeros(gen.latent_dim)
    dist = f ** (1.0 / p)
    return -dist, -(dist / (p * f)) * g


# ---------------------------------------------------------------------------
# Parameter plumbing shared by the trainable MLPs


def _pack(params: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def _unpack(vec, shapes: Dict[str, tuple]) -> Dict[str, np.ndarray]:
    out, i = {}, 0
    for k, s in shapes.items():
        n = int(np.prod(s))
        out[k] = vec[i:i + n].reshape(s)
        i += n
    return out


class _Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _init_dense(rng: Rng, fan_out, fan_in):
    return rng.normal(size=(fan_out, fan_in)) * np.sqrt(1.0 / fan_in)


# ---------------------------------------------------------------------------
# VAE


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 10
    hidden_dim: int = 64
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "hidden_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def _vae_shapes(d, h, m):
    return {
        "We": (h, d), "be": (h,), "Wmu": (m, h), "bmu": (m,), "Wlv": (m, h), "blv": (m,),
        "W1": (h, m), "b1": (h,), "W2": (d, h), "b2": (d,),
    }


@dataclass(frozen=True, eq=False)
class VaeModel:
    params: Dict[str, np.ndarray]
    loss_history: Tuple[float, ...] = ()

    prior = "normal"
    bounds = None

    @property
    def decoder(self) -> MlpDecoder:
        p = self.params
        return MlpDecoder(p["W1"], p["b1"], p["W2"], p["b2"])

    @property
    def latent_dim(self) -> int:
        return self.params["Wmu"].shape[0]

    @property
    def image_dim(self) -> int:
        return self.params["We"].shape[1]

    # generator surface delegates to the decoder
    def generate(self, z):
        return self.decoder.generate(z)

    def generate_batch(self, Z):
        return self.decoder.generate_batch(Z)

    def pullback(self, z):
        return self.decoder.pullback(z)

    def sample_prior(self, rng: Rng, n: int):
        return rng.normal(size=(n, self.latent_dim))

    def to_blocks(self, prefix):
        blocks = {prefix + k: v for k, v in self.params.items()}
        blocks[prefix + "loss_history"] = np.asarray(self.loss_history, dtype=np.float64)
        return blocks

    @classmethod
    def from_blocks(cls, blocks, prefix):
        params = {k: blocks[prefix + k] for k in _vae_shapes(1, 1, 1)}
        return cls(params, tuple(blocks[prefix + "loss_history"].tolist()))


def encode(vae: VaeModel, x) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (clamped) log-variance for one image."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (vae.image_dim,):
        raise ValueError(f"image must have shape ({vae.image_dim},), got {x.shape}")
    p = vae.params
    h = np.tanh(p["We"] @ x + p["be"])
    mu = p["Wmu"] @ h + p["bmu"]
    logvar = np.clip(p["Wlv"] @ h + p["blv"], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, logvar


def kl_standard_normal(mu, logvar) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


def vae_loss_and_grad(params: Dict[str, np.ndarray], X, eps) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean negative ELBO over the batch with fixed reparameterization noise.

    Per example: Bernoulli cross-entropy of the reconstruction plus
    KL(N(mu, diag exp(logvar)) || N(0, I)).
    """
    p = params
    X = np.atleast_2d(X)
    n = X.shape[0]
    hE = np.tanh(X @ p["We"].T + p["be"])
    mu = hE @ p["Wmu"].T + p["bmu"]
    lv_raw = hE @ p["Wlv"].T + p["blv"]
    lv = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    h = np.tanh(z @ p["W1"].T + p["b1"])
    a2 = h @ p["W2"].T + p["b2"]
    rec = np.sum(np.logaddexp(0.0, a2) - X * a2)
    kl = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv)
    loss = (rec + kl) / n

    g = {}
    dA2 = (_sigmoid(a2) - X) / n
    g["W2"] = dA2.T @ h
    g["b2"] = dA2.sum(0)
    dA1 = (dA2 @ p["W2"]) * (1.0 - h * h)
    g["W1"] = dA1.T @ z
    g["b1"] = dA1.sum(0)
    dz = dA1 @ p["W1"]
    dmu = dz + mu / n
    dlv = dz * eps * 0.5 * std + 0.5 * (np.exp(lv) - 1.0) / n
    dlv = dlv * ((lv_raw > -LOGVAR_CLAMP) & (lv_raw < LOGVAR_CLAMP))
    g["Wmu"] = dmu.T @ hE
    g["bmu"] = dmu.sum(0)
    g["Wlv"] = dlv.T @ hE
    g["blv"] = dlv.sum(0)
    dA = (dmu @ p["Wmu"] + dlv @ p["Wlv"]) * (1.0 - hE * hE)
    g["We"] = dA.T @ X
    g["be"] = dA.sum(0)
    return float(loss), {k: g[k] for k in p}


def init_vae_params(d: int, config: VaeConfig, rng: Rng) -> Dict[str, np.ndarray]:
    h, m = config.hidden_dim, config.latent_dim
    shapes = _vae_shapes(d, h, m)
    params = {k: np.zeros(s) for k, s in shapes.items()}
    params["We"] = _init_dense(rng.child(0), h, d)
    params["Wmu"] = _init_dense(rng.child(1), m, h)
    params["Wlv"] = 0.1 * _init_dense(rng.child(2), m, h)
    params["W1"] = _init_dense(rng.child(3), h, m)
    params["W2"] = _init_dense(rng.child(4), d, h)
    return params


def train_vae(class_examples, config: VaeConfig = VaeConfig(),
              callback: Optional[Callable[[int, float], None]] = None) -> VaeModel:
    """Minibatch Adam on the negative ELBO. Deterministic given config.seed."""
    X = np.atleast_2d(np.asarray(class_examples, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one example")
    n, d = X.shape
    rng = Rng(config.seed, (10,))
    params = init_vae_params(d, config, rng.child(0))
    shapes = {k: v.shape for k, v in params.items()}
    theta = _pack(params)
    opt = _Adam(theta.size, config.learning_rate)

    init_loss, _ = vae_loss_and_grad(params, X, rng.child(1).normal(size=(n, config.latent_dim)))
    history = [init_loss]
    for epoch in range(config.epochs):
        erng = rng.child(2, epoch)
        order = erng.permutation(n)
        eps_all = erng.normal(size=(n, config.latent_dim))
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = vae_loss_and_grad(_unpack(theta, shapes), X[idx], eps_all[idx])
            if not np.isfinite(loss):
                raise TrainingError("VAE loss became non-finite", epoch)
            theta = opt.step(theta, _pack(grads))
            total += loss * idx.size
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    params = {k: v.copy() for k, v in _unpack(theta, shapes).items()}
    return VaeModel(params, tuple(history))


# ---------------------------------------------------------------------------
# Softmax baseline


@dataclass(frozen=True)
class SoftmaxConfig:
    hidden_dim: int = 64
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-2
    seed: int = 0


def _softmax_shapes(d, h, k):
    return {"W1": (h, d), "b1": (h,), "W2": (k, h), "b2": (k,)}


def softmax_probabilities(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxModel:
    """Single-hidden-layer ReLU network producing class logits."""

    params: Dict[str, np.ndarray]
    loss_history: Tuple[float, ...] = ()

    @property
    def image_dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.params["W2"].shape[0]

    def logits(self, X) -> np.ndarray:
        p = self.params
        h = np.maximum(np.asarray(X) @ p["W1"].T + p["b1"], 0.0)
        return h @ p["W2"].T + p["b2"]

    def probabilities(self, X) -> np.ndarray:
        return softmax_probabilities(self.logits(X))

    def to_blocks(self, prefix):
        blocks = {prefix + k: v for k, v in self.params.items()}
        blocks[prefix + "loss_history"] = np.asarray(self.loss_history, dtype=np.float64)
        return blocks

    @classmethod
    def from_blocks(cls, blocks, prefix):
        params = {k: blocks[prefix + k] for k in ("W1", "b1", "W2", "b2")}
        return cls(params, tuple(blocks[prefix + "loss_history"].tolist()))


def softmax_loss_and_grad(params, X, y) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient."""
    p = params
    X = np.atleast_2d(X)
    n = X.shape[0]
    a1 = X @ p["W1"].T + p["b1"]
    h = np.maximum(a1, 0.0)
    logits = h @ p["W2"].T + p["b2"]
    shifted = logits - logits.max(1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(1))
    loss = float(np.mean(logz - shifted[np.arange(n), y]))
    dlog = np.exp(shifted - logz[:, None])
    dlog[np.arange(n), y] -= 1.0
    dlog /= n
    g = {"W2": dlog.T @ h, "b2": dlog.sum(0)}
    dA1 = (dlog @ p["W2"]) * (a1 > 0)
    g["W1"] = dA1.T @ X
    g["b1"] = dA1.sum(0)
    return loss, {k: g[k] for k in p}


def train_softmax(train, config: SoftmaxConfig = SoftmaxConfig(),
                  callback: Optional[Callable[[int, float], None]] = None) -> SoftmaxModel:
    """Fit the softmax MLP on the labeled, in-distribution rows of a Dataset."""
    if np.any(train.ood):
        raise ValueError("softmax training data must not contain OOD examples")
    X, y = train.pixels, train.labels
    n, d = X.shape
    if n == 0:
        raise ValueError("empty training set")
    k = train.num_classes
    rng = Rng(config.seed, (20,))
    shapes = _softmax_shapes(d, config.hidden_dim, k)
    params = {
        "W1": _init_dense(rng.child(0), config.hidden_dim, d) * np.sqrt(2.0),
        "b1": np.zeros(config.hidden_dim),
        "W2": _init_dense(rng.child(1), k, config.hidden_dim),
        "b2": np.zeros(k),
    }
    theta = _pack(params)
    opt = _Adam(theta.size, config.learning_rate)
    history = [softmax_loss_and_grad(params, X, y)[0]]
    for epoch in range(config.epochs):
        order = rng.child(2, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = softmax_loss_and_grad(_unpack(theta, shapes), X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError("softmax loss became non-finite", epoch)
            theta = opt.step(theta, _pack(grads))
            total += loss * idx.size
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    params = {k_: v.copy() for k_, v in _unpack(theta, shapes).items()}
    return SoftmaxModel(params, tuple(history))


def softmax_predict(model: SoftmaxModel, x) -> Tuple[int, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.image_dim,):
        raise ValueError(f"image must have shape ({model.image_dim},), got {x.shape}")
    probs = model.probabilities(x[None])[0]
    label = int(np.argmax(probs))
    return label, float(probs[label])


# ---------------------------------------------------------------------------
# Bundles

BUNDLE_MAGIC = b"GCBUNDLE"
BUNDLE_VERSION = 1
_GENERATOR_TYPES = {"linear": LinearGenerator, "vae": VaeModel, "mlp": MlpDecoder}


@dataclass(eq=False)
class ModelBundle:
    """One generator per class (possibly none, for softmax-only bundles),
    an optional softmax model, and metadata."""

    generators: List
    generator_kind: str
    height: int
    width: int
    num_classes: int
    softmax: Optional[SoftmaxModel] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generators and len(self.generators) != self.num_classes:
            raise BundleError(f"bundle needs exactly one generator per class: "
                              f"{len(self.generators)} generators for {self.num_classes} classes")
        if not self.generators and self.softmax is None:
            raise BundleError("bundle holds no models")
        if self.generators and self.generator_kind not in _GENERATOR_TYPES:
            raise BundleError(f"unknown generator kind {self.generator_kind!r}")
        d = self.height * self.width
        for g in self.generators:
            if g.image_dim != d:
                raise BundleError(f"generator image size {g.image_dim} does not match {self.height}x{self.width}")
        if self.softmax is not None:
            if self.softmax.image_dim != d or self.softmax.num_classes != self.num_classes:
                raise BundleError("softmax model does not match bundle dimensions")

    @property
    def image_dim(self) -> int:
        return self.height * self.width


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_bundle(bundle: ModelBundle, path) -> None:
    """Binary layout (little-endian): magic, u32 version, u32 metadata length,
    UTF-8 JSON metadata, then per block a u64 element count followed by
    float64 values, and finally a SHA-256 of everything before it."""
    blocks = {}
    for k, g in enumerate(bundle.generators):
        blocks.update(g.to_blocks(f"gen{k}."))
    if bundle.softmax is not None:
        blocks.update(bundle.softmax.to_blocks("softmax."))
    header = {
        "generator_kind": bundle.generator_kind if bundle.generators else "none",
        "height": bundle.height,
        "width": bundle.width,
        "num_classes": bundle.num_classes,
        "has_softmax": bundle.softmax is not None,
        "metadata": bundle.metadata,
        "blocks": [[name, list(np.shape(arr))] for name, arr in blocks.items()],
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(meta)), meta]
    for arr in blocks.values():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_bundle(path, expected_classes: Optional[int] = None,
                expected_shape: Optional[Tuple[int, int]] = None) -> ModelBundle:
    raw = Path(path).read_bytes()
    if len(raw) < len(BUNDLE_MAGIC) + 8 + 32:
        raise BundleError(f"{path}: file truncated")
    if raw[: len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
        raise BundleError(f"{path}: bad magic, not a model bundle")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise BundleError(f"{path}: checksum mismatch (corrupt or truncated)")
    pos = len(BUNDLE_MAGIC)
    version, meta_len = struct.unpack_from("<II", body, pos)
    if version != BUNDLE_VERSION:
        raise BundleError(f"{path}: unsupported bundle version {version}")
    pos += 8
    try:
        header = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: unreadable metadata: {exc}") from None
    pos += meta_len
    blocks = {}
    for name, shape in header["blocks"]:
        if pos + 8 > len(body):
            raise BundleError(f"{path}: truncated at block {name}")
        (count,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if count != int(np.prod(shape, dtype=np.int64)) or pos + 8 * count > len(body):
            raise BundleError(f"{path}: block {name} has inconsistent length")
        blocks[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    if pos != len(body):
        raise BundleError(f"{path}: unexpected trailing data")

    k = header["num_classes"]
    if expected_classes is not None and k != expected_classes:
        raise BundleError(f"{path}: bundle has {k} classes, expected {expected_classes}")
    if expected_shape is not None and (header["height"], header["width"]) != tuple(expected_shape):
        raise BundleError(f"{path}: bundle images are {header['height']}x{header['width']}, "
                          f"expected {expected_shape[0]}x{expected_shape[1]}")
    kind = header["generator_kind"]
    gens = []
    if kind != "none":
        cls = _GENERATOR_TYPES[kind]
        gens = [cls.from_blocks(blocks, f"gen{i}.") for i in range(k)]
    softmax = SoftmaxModel.from_blocks(blocks, "softmax.") if header["has_softmax"] else None
    return ModelBundle(gens, kind, header["height"], header["width"], k, softmax, header["metadata"])
