"""Known-MI benchmark: correlated Gaussian pairs against the InfoNCE and CLUB estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .decoder import club_from_logprobs, draw_permutation
from .diffcore import (
    OptimizerState, Value, add, adamw_step, backward, exp, matmul, mean, mul, sub, sum_, tanh, transpose,
)
from .encoder import infonce_from_scores
from .rng import substream


def gaussian_mi(rho, dim=1):
    """MI of ``dim`` independent coordinate pairs with correlation ``rho``: -dim/2 log(1 - rho^2)."""
    if not -1 < rho < 1:
        raise ValueError("rho must lie in (-1, 1)")
    return -0.5 * dim * math.log(1.0 - rho * rho)


def gaussian_pairs(n, rho, rng, dim=1):
    x = rng.normal(size=(n, dim))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.normal(size=(n, dim))
    return x, y


# ---------------------------------------------------------------- InfoNCE lower bound

def _embed(v, P, prefix):
    return L.affine(tanh(L.affine(v, P, f"{prefix}.0")), P, f"{prefix}.1")


def critic_scores(x, y, P):
    """Separable critic s_ij = g(x_i)^T h(y_j)."""
    return matmul(_embed(Value(x), P, "g"), transpose(_embed(Value(y), P, "h")))


def fit_infonce_critic(rho, dim=1, batch=128, steps=600, lr=0.01, hidden=32, embed=16, seed=0):
    rng = substream(seed, "mibench-infonce")
    store = {}
    for p in ("g", "h"):
        L.init_affine(store, rng, f"{p}.0", dim, hidden)
        L.init_affine(store, rng, f"{p}.1", hidden, embed)
    state = OptimizerState()
    for _ in range(steps):
        x, y = gaussian_pairs(batch, rho, rng, dim)
        P = L.as_leaves(store)
        loss = infonce_from_scores(critic_scores(x, y, P))
        adamw_step(store, L.gradients(P, backward(loss)), state, lr)
    return store


def infonce_estimate(store, rho, dim=1, batch=128, n_batches=20, seed=1):
    """Mean of log(batch) - L_InfoNCE over fresh batches."""
    rng = substream(seed, "mibench-infonce-eval")
    P = L.as_leaves(store, track=False)
    vals = []
    for _ in range(n_batches):
        x, y = gaussian_pairs(batch, rho, rng, dim)
        vals.append(math.log(batch) - float(infonce_from_scores(critic_scores(x, y, P)).data))
    return float(np.mean(vals))


# ---------------------------------------------------------------- CLUB upper bound

@dataclass
class GaussianConditional:
    """q(y | x) = N(x A + b, diag(exp(2 s)))."""
    A: np.ndarray
    b: np.ndarray
    s: np.ndarray

    def log_prob_matrix(self, x, y):
        """Entry (i, j) is log q(y_j | x_i)."""
        mu = x @ self.A + self.b
        prec = np.exp(-2.0 * self.s)
        quad = ((y ** 2) @ prec)[None, :] - 2.0 * (mu * prec) @ y.T + ((mu ** 2) @ prec)[:, None]
        return -0.5 * quad - float(np.sum(self.s)) - 0.5 * len(self.s) * math.log(2 * math.pi)


def fit_gaussian_conditional(rho, dim=1, batch=256, steps=500, lr=0.05, seed=0) -> GaussianConditional:
    """Maximum-likelihood fit of q(y|x) by adaptive-moment steps."""
    rng = substream(seed, "mibench-club")
    store = {"A": np.zeros((dim, dim)), "b": np.zeros(dim), "s": np.zeros(dim)}
    state = OptimizerState()
    for _ in range(steps):
        x, y = gaussian_pairs(batch, rho, rng, dim)
        P = L.as_leaves(store)
        err = sub(Value(y), L.affine(Value(x), {"q.W": P["A"], "q.b": P["b"]}, "q"))
        scaled = mul(mul(err, err), exp(mul(P["s"], -2.0)))
        nll = add(mul(mean(sum_(scaled, axis=1)), 0.5), sum_(P["s"]))
        adamw_step(store, L.gradients(P, backward(nll)), state, lr)
    return GaussianConditional(store["A"], store["b"], store["s"])


def club_estimate_gaussian(q: GaussianConditional, rho, dim=1, batch=256, n_batches=20, seed=1):
    """Mean sampled-CLUB estimate over fresh batches, one random pairing per batch."""
    rng = substream(seed, "mibench-club-eval")
    vals = []
    for _ in range(n_batches):
        x, y = gaussian_pairs(batch, rho, rng, dim)
        logq = q.log_prob_matrix(x, y)
        vals.append(float(club_from_logprobs(logq, np.arange(batch), draw_permutation(batch, rng)).data))
    return float(np.mean(vals))
