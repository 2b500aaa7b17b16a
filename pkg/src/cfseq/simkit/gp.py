"""Gaussian-process draws, random Fourier features and B-spline bases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT3 = np.sqrt(3.0)


def matern32(r, lengthscale, variance):
    s = SQRT3 * np.abs(r) / lengthscale
    return variance * (1.0 + s) * np.exp(-s)


def matern32_cholesky(times, lengthscale, variance, jitter=1e-8, max_jitter=1e-2):
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing 1-d array")
    if lengthscale <= 0 or variance <= 0:
        raise ValueError("lengthscale and variance must be positive")
    cov = matern32(times[:, None] - times[None, :], lengthscale, variance)
    eye = np.eye(len(times))
    while jitter <= max_jitter:
        try:
            return np.linalg.cholesky(cov + jitter * variance * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise ValueError("Matern covariance not factorizable even with jitter escalation")


def sample_gp_matern(times, lengthscale, variance, rng, n_draws=None, chol=None):
    """Exact Matern-3/2 GP draw(s) at ``times``; shape (T,) or (n_draws, T)."""
    L = matern32_cholesky(times, lengthscale, variance) if chol is None else chol
    size = L.shape[0] if n_draws is None else (L.shape[0], n_draws)
    z = rng.standard_normal(size)
    out = L @ z
    return out if n_draws is None else out.T


@dataclass
class RFFFunction:
    """``f(x) = w . sqrt(2/D) cos(x @ omega + b)`` for an RBF-kernel GP prior."""

    omega: np.ndarray  # (d_in, D)
    bias: np.ndarray   # (D,)
    weights: np.ndarray  # (D,)

    def features(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        D = self.bias.shape[0]
        return np.sqrt(2.0 / D) * np.cos(x @ self.omega + self.bias)

    def __call__(self, x):
        return self.features(x) @ self.weights


def rff_function(d_in, feature_count, lengthscale, rng) -> RFFFunction:
    if feature_count < 1:
        raise ValueError("feature_count must be >= 1")
    omega = rng.standard_normal((d_in, feature_count)) / lengthscale
    bias = rng.uniform(0.0, 2.0 * np.pi, size=feature_count)
    weights = rng.standard_normal(feature_count)
    return RFFFunction(omega, bias, weights)


def bspline_basis(t, knots, degree):
    """All B-spline basis functions of ``degree`` on ``knots`` evaluated at ``t``.

    Cox-de Boor recursion; the right end of the span belongs to the last
    nonempty interval. Returns shape (len(knots) - degree - 1,) for scalar
    ``t`` and (len(t), n_basis) otherwise.
    """
    knots = np.asarray(knots, dtype=np.float64)
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if np.any(np.diff(knots) < 0):
        raise ValueError("knots must be nondecreasing")
    n_basis = len(knots) - degree - 1
    if n_basis < 1:
        raise ValueError("not enough knots for this degree")
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    lo, hi = knots[degree], knots[-degree - 1]
    if np.any(ts < lo) or np.any(ts > hi):
        raise ValueError(f"t outside knot span [{lo}, {hi}]")
    # degree-0 indicators; t == hi goes to the last nonempty interval
    m = len(knots) - 1
    B = np.zeros((len(ts), m))
    last = max(i for i in range(m) if knots[i] < knots[i + 1])
    for i in range(m):
        if knots[i] < knots[i + 1]:
            B[:, i] = (ts >= knots[i]) & (ts < knots[i + 1])
    B[ts == knots[last + 1], last] = 1.0
    for d in range(1, degree + 1):
        nxt = np.zeros((len(ts), m - d))
        for i in range(m - d):
            left_den = knots[i + d] - knots[i]
            right_den = knots[i + d + 1] - knots[i + 1]
            if left_den > 0:
                nxt[:, i] += (ts - knots[i]) / left_den * B[:, i]
            if right_den > 0:
                nxt[:, i] += (knots[i + d + 1] - ts) / right_den * B[:, i + 1]
        B = nxt
    return B[0] if scalar else B
