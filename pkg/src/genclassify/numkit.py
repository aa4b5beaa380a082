"""Numerical kernel: seeded random streams, L-BFGS, finite differences,
least squares and PCA.

Arrays are plain float64 numpy arrays throughout.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Tuple

import numpy as np
import scipy.linalg


class OptimizationDiverged(ArithmeticError):
    """Objective or gradient became non-finite during minimization."""

    def __init__(self, message: str, last_x: np.ndarray, iteration: int):
        super().__init__(message)
        self.last_x = last_x
        self.iteration = iteration


class SingularSystemError(np.linalg.LinAlgError):
    pass


class NonFiniteEvaluation(ArithmeticError):
    def __init__(self, component: int, value: float):
        super().__init__(f"objective is not finite when perturbing component {component} (value={value})")
        self.component = component


# ---------------------------------------------------------------------------
# Random streams


class Rng:
    """Counter-based (Philox) random stream with deterministic splitting.

    A stream is identified by ``(seed, key)``; children extend the key, so the
    same path of ``child`` calls always yields the same numbers regardless of
    how many other streams were drawn in between.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def split(self, n: int) -> list:
        return [self.child(i) for i in range(n)]

    def child_for_bytes(self, payload: bytes) -> "Rng":
        """Child stream keyed on content, e.g. the raw bytes of an image."""
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        return self.child(int.from_bytes(digest, "little"))

    # thin wrappers so callers never touch the generator directly
    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 100
    grad_tolerance: float = 1e-6
    initial_step: float = 1.0
    shrink: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 40
    # relative size of rounding error in f; smaller differences count as ties
    f_noise: float = 1e-12

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.grad_tolerance > 0:
            raise ValueError("grad_tolerance must be > 0")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        if self.initial_step <= 0 or not 0 < self.armijo_c < 1 or self.f_noise < 0:
            raise ValueError("invalid line search parameters")


class LbfgsResult(NamedTuple):
    x: np.ndarray
    f: float
    iterations: int


def _secant_point(x, d, step, slope, slope_new, bounds):
    """Minimizer along d of the quadratic matching both directional derivatives."""
    if not (slope_new != 0 and slope_new > slope):
        return None
    alt = step * slope / (slope - slope_new)
    if not alt > 0 or abs(alt - step) <= 1e-12 * step:
        return None
    x_alt = x + alt * d
    return x_alt if bounds is None else np.clip(x_alt, bounds[0], bounds[1])


def _two_loop(grad, s_hist, y_hist, rho_hist):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * s.dot(q)
        q -= a * y
        alphas.append(a)
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(
    objective: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x0,
    config: LbfgsConfig = LbfgsConfig(),
    bounds: Optional[Tuple[float, float]] = None,
) -> LbfgsResult:
    """Minimize ``objective`` with limited-memory BFGS and Armijo backtracking.

    ``objective(x)`` returns ``(value, gradient)``. When ``bounds=(lo, hi)`` is
    given every trial point is clipped into the box (projected variant); the
    stopping test then uses the projected gradient.

    Raises OptimizationDiverged if a non-finite value or gradient shows up;
    the exception carries the last finite iterate.
    """
    x = np.array(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])

    def evaluate(point, it, last):
        f, g = objective(point)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise OptimizationDiverged(f"non-finite objective at iteration {it}", last.copy(), it)
        return f, g

    def stop_norm(point, g):
        if bounds is None:
            return np.linalg.norm(g)
        # projected gradient: components pushing into an active bound do not count
        pg = point - np.clip(point - g, bounds[0], bounds[1])
        return np.linalg.norm(pg)

    f, g = evaluate(x, 0, x)
    s_hist, y_hist, rho_hist = [], [], []
    it = 0
    while it < config.max_iters and stop_norm(x, g) > config.grad_tolerance:
        d = _two_loop(g, s_hist, y_hist, rho_hist)
        slope = g.dot(d)
        if not slope < 0:
            # lost descent direction, restart from steepest descent
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            slope = -g.dot(g)
        step = config.initial_step
        if not s_hist:
            step = min(step, 1.0 / max(np.linalg.norm(g), 1e-300))
        accepted = secant_taken = False
        for _ in range(config.max_backtracks):
            x_new = x + step * d
            if bounds is not None:
                x_new = np.clip(x_new, bounds[0], bounds[1])
            if np.array_equal(x_new, x):
                break  # step too small to move x
            f_new, g_new = evaluate(x_new, it + 1, x)
            decrease = g.dot(x_new - x) if bounds is not None else step * slope
            if f_new <= f + config.armijo_c * decrease and f_new <= f:
                accepted = True
                break
            noise = config.f_noise * max(abs(f), abs(f_new))
            if -decrease <= noise:
                # the expected decrease is below the rounding level of f, so f only
                # rules out real increases and the directional derivative decides
                cands = [(x_new, f_new, g_new)]
                x_alt = _secant_point(x, d, step, slope, g_new.dot(d), bounds)
                if x_alt is not None:
                    cands.insert(0, (x_alt,) + evaluate(x_alt, it + 1, x))
                    secant_taken = True
                for xc, fc, gc in cands:
                    if fc <= f + noise and abs(gc.dot(xc - x)) < abs(g.dot(xc - x)):
                        x_new, f_new, g_new = xc, fc, gc
                        accepted = True
                        break
                if accepted:
                    break
                secant_taken = False
            step *= config.shrink
        if not accepted:
            break
        # secant correction on the directional derivative; exact on quadratics
        x_alt = None if secant_taken else _secant_point(x, d, step, slope, g_new.dot(d), bounds)
        if x_alt is not None:
            slope_new = g_new.dot(d)
            try:
                f_alt, g_alt = evaluate(x_alt, it + 1, x)
            except OptimizationDiverged:
                f_alt = np.inf
            # f is unreliable at rounding level, so the flatter point also wins
            if f_alt <= f and (f_alt < f_new or abs(g_alt.dot(d)) < abs(slope_new)):
                x_new, f_new, g_new = x_alt, f_alt, g_alt
        it += 1
        s = x_new - x
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > config.memory:
                del s_hist[0], y_hist[0], rho_hist[0]
        x, f, g = x_new, f_new, g_new
    return LbfgsResult(x, f, it)


# ---------------------------------------------------------------------------
# Oracles and closed forms


def finite_diff_grad(objective: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(objective(x))
        flat[i] = orig - step
        fm = float(objective(x))
        flat[i] = orig
        if not np.isfinite(fp):
            raise NonFiniteEvaluation(i, fp)
        if not np.isfinite(fm):
            raise NonFiniteEvaluation(i, fm)
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def least_squares_solve(A, b) -> np.ndarray:
    """argmin_x ||Ax - b|| via QR with column pivoting."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: A is {A.shape}, b has {b.shape[0]} rows")
    n = A.shape[1]
    if A.shape[0] < n:
        raise SingularSystemError("underdetermined system has no unique least-squares solution")
    Q, R, perm = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0 or diag[-1] <= 1e-12 * diag[0]:
        raise SingularSystemError("matrix is rank deficient (pivot below 1e-12 relative tolerance)")
    y = scipy.linalg.solve_triangular(R, Q.T @ b)
    x = np.empty(n)
    x[perm] = y
    return x


class PcaFit(NamedTuple):
    mean: np.ndarray
    components: np.ndarray  # (m, d), orthonormal rows
    eigenvalues: np.ndarray  # all d covariance eigenvalues, nonincreasing


def pca_fit(X, m: int) -> PcaFit:
    """Principal subspace of the rows of X.

    Eigenvalues are those of the 1/n covariance, so the total squared
    reconstruction error of X equals n times the sum of the trailing ones.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if not 1 <= m <= min(n - 1, d):
        raise ValueError(f"m={m} out of range [1, {min(n - 1, d)}] for data of shape {X.shape}")
    mean = X.mean(axis=0)
    _, sv, vt = np.linalg.svd(X - mean, full_matrices=False)
    eig = np.zeros(d)
    eig[: sv.size] = sv**2 / n
    comps = vt[:m].copy()
    # deterministic sign: largest-magnitude entry of each component positive
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(m), idx])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PcaFit(mean, comps, eig)
