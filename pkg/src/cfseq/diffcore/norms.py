"""Weight and spectral reparameterizations of affine weight matrices."""
from __future__ import annotations

import warnings

import numpy as np

from .value import Value, as_value, exp, log, matmul, mul, reshape, sum_

SIGMA_FLOOR = 1e-12


def weight_norm_apply(v, g) -> Value:
    """Return ``g * v / ||v||`` with the norm taken over each output row of ``v``.

    ``v`` has shape (out, in) and ``g`` shape (out,).
    """
    v, g = as_value(v), as_value(g)
    sq = sum_(mul(v, v), axis=1)
    if np.any(sq.data <= 0):
        raise ValueError("weight_norm_apply: zero-norm row in direction matrix")
    inv_norm = exp(mul(log(sq), -0.5))
    scale = reshape(mul(g, inv_norm), (v.shape[0], 1))
    return mul(v, scale)


def power_iteration(w: np.ndarray, u: np.ndarray, n_iter: int = 1):
    """Run ``n_iter`` power-iteration sweeps; returns unit vectors (u, v) and sigma."""
    v = None
    for _ in range(max(n_iter, 1)):
        v = w.T @ u
        v = v / max(np.linalg.norm(v), SIGMA_FLOOR)
        u = w @ v
        u = u / max(np.linalg.norm(u), SIGMA_FLOOR)
    return u, v, float(u @ w @ v)


def spectral_norm_apply(w, u_state: np.ndarray, n_power_iterations: int = 1):
    """Divide ``w`` by its power-iteration estimate of the largest singular value.

    The singular vectors are held constant in the graph, so the gradient is
    taken through ``u^T W v`` only. Returns ``(w / sigma, new_u_state)``.
    """
    w = as_value(w)
    if w.ndim != 2:
        raise ValueError(f"spectral_norm_apply: need a matrix, got shape {w.shape}")
    u, v, sigma = power_iteration(w.data, np.asarray(u_state, dtype=np.float64), n_power_iterations)
    return spectral_normalize(w, u, v, sigma), u


def spectral_normalize(w, u, v, sigma=None) -> Value:
    """``w / (u^T w v)`` for fixed unit vectors ``u`` and ``v``."""
    w = as_value(w)
    if sigma is None:
        sigma = float(u @ w.data @ v)
    if not sigma > SIGMA_FLOOR:
        warnings.warn("spectral norm estimate below floor; using 1e-12", RuntimeWarning, stacklevel=2)
        return mul(w, 1.0 / SIGMA_FLOOR)
    sig = matmul(matmul(Value(u.reshape(1, -1)), w), Value(v.reshape(-1, 1)))
    inv = exp(mul(log(sig), -1.0))
    return mul(w, inv)
