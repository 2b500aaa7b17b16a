"""Synthetic EHR-style generator: GP covariates, spline/GP/RFF untreated outcomes,
outcome- and covariate-driven binary treatments with decaying additive effects."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..rng import substream
from .cohort import Cohort
from .gp import bspline_basis, matern32_cholesky, rff_function


@dataclass
class EHRGenConfig:
    d_x: int = 25
    d_y: int = 2
    d_a: int = 2
    d_v: int = 2
    alpha_s: tuple = (0.5, 0.5)
    alpha_g: tuple = (0.5, 0.5)
    alpha_f: tuple = (1.0, 1.0)
    alpha_v: float = 0.3
    noise_sd: float = 0.05
    x_lengthscale: float = 10.0
    x_variance: float = 1.0
    g_lengthscale: float = 20.0
    g_variance: float = 1.0
    rff_features: int = 100
    rff_lengthscale_z: float = 5.0
    rff_lengthscale_y: float = 1.0
    spline_degree: int = 3
    spline_interior_knots: int = 4
    gamma_a: tuple = (0.5, 0.5)
    gamma_x: tuple = (0.5, 0.5)
    bias: tuple = (0.0, 0.0)
    beta: tuple = ((-1.0, -0.6), (-1.4, -0.8))   # (d_a, d_y)
    effect_windows: tuple = (3, 3)
    avg_windows: tuple = (3, 3)
    assign_columns: tuple = (0, 1)   # covariates feeding the assignment functions

    def validate(self):
        if self.rff_features < 1:
            raise ValueError("rff_features must be >= 1")
        if min(self.effect_windows) < 1 or min(self.avg_windows) < 1:
            raise ValueError("all windows must be >= 1")
        for name in ("alpha_s", "alpha_g", "alpha_f"):
            if len(getattr(self, name)) != self.d_y:
                raise ValueError(f"{name} must have d_y={self.d_y} entries")
        for name in ("gamma_a", "gamma_x", "bias", "effect_windows", "avg_windows"):
            if len(getattr(self, name)) != self.d_a:
                raise ValueError(f"{name} must have d_a={self.d_a} entries")
        if np.shape(self.beta) != (self.d_a, self.d_y):
            raise ValueError(f"beta must have shape ({self.d_a}, {self.d_y})")
        if any(c < 0 or c >= self.d_x for c in self.assign_columns):
            raise ValueError("assign_columns out of range")
        return self


def apply_treatment_effect(A, p, beta, window, t):
    """Additive effect at step ``t`` of past treatments, weighted by ``1/(t-i+1)^2``.

    ``A``/``p`` are (steps, d_a) histories, ``beta`` the (d_a,) column for one
    outcome and ``window`` an int or per-treatment sequence.
    """
    d_a = len(beta)
    windows = [window] * d_a if np.ndim(window) == 0 else list(window)
    if min(windows) < 1:
        raise ValueError("window must be >= 1")
    total = 0.0
    for i in range(max(0, t - max(windows)), t + 1):
        term = min((A[i][l] * p[i][l] * beta[l]) if t - i <= windows[l] else 0.0 for l in range(d_a))
        total += term / ((t - i + 1) ** 2)
    return total


def _prob(a_bar, fy, gamma_a, gamma_x, b):
    return 1.0 / (1.0 + math.exp(-(gamma_a * a_bar + gamma_x * fy + b)))


def _a_bar(ybar, t, window):
    lo = max(0, t - window)
    return math.fsum(ybar[lo:t]) / (t - lo) if t > lo else 0.0


def _cohort_functions(cfg: EHRGenConfig, seed, max_len):
    rng = substream(seed, "ehr-functions")
    n_inner = cfg.spline_interior_knots
    lo, hi = 0.0, float(max_len - 1)
    inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
    knots = np.concatenate([[lo] * (cfg.spline_degree + 1), inner, [hi] * (cfg.spline_degree + 1)])
    basis = bspline_basis(np.arange(max_len, dtype=np.float64), knots, cfg.spline_degree)
    coef = rng.standard_normal((cfg.d_y, basis.shape[1]))
    trend = coef @ basis.T                                           # (d_y, T)
    f_z = [rff_function(cfg.d_x, cfg.rff_features, cfg.rff_lengthscale_z, rng) for _ in range(cfg.d_y)]
    f_y = [rff_function(len(cfg.assign_columns), cfg.rff_features, cfg.rff_lengthscale_y, rng)
           for _ in range(cfg.d_a)]
    v_coef = rng.normal(0.0, cfg.alpha_v, size=(cfg.d_y, cfg.d_v))
    times = np.arange(max_len, dtype=np.float64)
    chol_x = matern32_cholesky(times, cfg.x_lengthscale, cfg.x_variance)
    chol_g = matern32_cholesky(times, cfg.g_lengthscale, cfg.g_variance)
    return dict(trend=trend, f_z=f_z, f_y=f_y, v_coef=v_coef, chol_x=chol_x, chol_g=chol_g)


def _roll_ehr(cfg, z, fy, y_hist, A_hist, p_hist, t_from, steps, forced=None, uniforms=None):
    """Advance outcomes from ``t_from`` for ``steps`` steps; mutates the history lists.

    ``forced`` gives treatment bit-vectors; otherwise treatments are drawn by
    comparing ``uniforms`` against the assignment probabilities.
    """
    d_y, d_a = cfg.d_y, cfg.d_a
    ybar = [math.fsum(row) / d_y for row in y_hist]
    for k, t in enumerate(range(t_from, t_from + steps)):
        p_t = [_prob(_a_bar(ybar, t, cfg.avg_windows[l]), fy[t][l], cfg.gamma_a[l], cfg.gamma_x[l],
                     cfg.bias[l]) for l in range(d_a)]
        if forced is not None:
            a_t = list(forced[k])
        else:
            a_t = [int(uniforms[t][l] < p_t[l]) for l in range(d_a)]
        A_hist.append(a_t)
        p_hist.append(p_t)
        y_t = [z[t][j] + apply_treatment_effect(A_hist, p_hist, [cfg.beta[l][j] for l in range(d_a)],
                                                cfg.effect_windows, t) for j in range(d_y)]
        y_hist.append(y_t)
        ybar.append(math.fsum(y_t) / d_y)
    return y_hist


def _simulate_patient(uid, seed, cfg, max_len, min_len, fns):
    rng = substream(seed, "sim-ehr", uid)
    X = (fns["chol_x"] @ rng.standard_normal((max_len, cfg.d_x)))
    g = (fns["chol_g"] @ rng.standard_normal((max_len, cfg.d_y)))
    V = rng.standard_normal(cfg.d_v)
    eps = rng.normal(0.0, cfg.noise_sd, size=(max_len, cfg.d_y))
    uniforms = rng.random((max_len, cfg.d_a))
    active_len = int(rng.integers(min_len, max_len + 1))
    z = np.empty((max_len, cfg.d_y))
    for j in range(cfg.d_y):
        z[:, j] = (cfg.alpha_s[j] * fns["trend"][j] + cfg.alpha_g[j] * g[:, j]
                   + cfg.alpha_f[j] * fns["f_z"][j](X) + fns["v_coef"][j] @ V + eps[:, j])
    cols = list(cfg.assign_columns)
    fy = np.stack([f(X[:, cols]) for f in fns["f_y"]], axis=1)
    z_l, fy_l = z.tolist(), fy.tolist()
    y_hist, A_hist, p_hist = [], [], []
    _roll_ehr(cfg, z_l, fy_l, y_hist, A_hist, p_hist, 0, max_len, uniforms=uniforms.tolist())
    return dict(uid=uid, X=X, V=V, z=z, fy=fy, Y=np.array(y_hist), A=np.array(A_hist),
                P=np.array(p_hist), active_len=active_len)


def _simulate_chunk(args):
    uids, seed, cfg, max_len, min_len = args
    fns = _cohort_functions(cfg, seed, max_len)
    return [_simulate_patient(u, seed, cfg, max_len, min_len, fns) for u in uids]


def simulate_ehr_cohort(cfg: EHRGenConfig, n, max_len, seed, tau=10, min_len=None, unit_offset=0,
                        workers=1, y_scale=None) -> Cohort:
    cfg = (cfg or EHRGenConfig()).validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    if max_len < tau + 1:
        raise ValueError(f"max_len={max_len} must be >= tau + 1 = {tau + 1}")
    min_len = min(tau + 5, max_len) if min_len is None else min_len
    uids = list(range(unit_offset, unit_offset + n))
    if workers > 1 and n > 1:
        chunks = [uids[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_chunk, [(c, seed, cfg, max_len, min_len) for c in chunks]))
        by_id = {r["uid"]: r for part in parts for r in part}
        recs = [by_id[u] for u in uids]
    else:
        recs = _simulate_chunk((uids, seed, cfg, max_len, min_len))

    P = np.stack([r["P"] for r in recs])
    if P.min() <= 0.01 or P.max() >= 0.99:
        warnings.warn(f"overlap violated: assignment probability range [{P.min():.4f}, {P.max():.4f}]",
                      RuntimeWarning)
    A = np.stack([r["A"] for r in recs])                     # (n, T, d_a)
    W = (A * (2 ** np.arange(cfg.d_a))).sum(axis=2).astype(np.int64)
    Yall = np.stack([r["Y"] for r in recs])                  # (n, T, d_y)
    step_state = {}
    for j in range(cfg.d_y):
        step_state[f"z_{j}"] = np.stack([r["z"][:, j] for r in recs])
        step_state[f"y_{j}"] = Yall[:, :, j]
    for l in range(cfg.d_a):
        step_state[f"fy_{l}"] = np.stack([r["fy"][:, l] for r in recs])
        step_state[f"p_{l}"] = P[:, :, l]
    if y_scale is None:
        y_scale = float(np.abs(Yall[:, :, 0]).max())
    meta = {"seed": int(seed), "tau": int(tau), "p_min": float(P.min()), "p_max": float(P.max()),
            "ehr_config": {k: (np.asarray(v).tolist() if isinstance(v, tuple) else v)
                           for k, v in cfg.__dict__.items()}}
    return Cohort("ehr", np.array(uids, dtype=np.int64), np.stack([r["V"] for r in recs]),
                  np.stack([r["X"] for r in recs]), W, Yall[:, :, 0].copy(),
                  np.array([r["active_len"] for r in recs], dtype=np.int64), K=2 ** cfg.d_a,
                  y_scale=float(y_scale), x_scale=np.ones(cfg.d_x), meta=meta,
                  unit_state={"active_len": np.array([r["active_len"] for r in recs], dtype=np.float64)}, step_state=step_state)


def ehr_config_from_meta(meta) -> EHRGenConfig:
    raw = dict(meta["ehr_config"])
    for k, v in raw.items():
        if isinstance(v, list):
            raw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return EHRGenConfig(**raw)


def ehr_counterfactual(traj, t, plan):
    st = traj.sim_state
    cfg = ehr_config_from_meta(st["meta"])
    s = st["step"]
    T = len(s["z_0"])
    z = np.stack([s[f"z_{j}"] for j in range(cfg.d_y)], axis=1).tolist()
    fy = np.stack([s[f"fy_{l}"] for l in range(cfg.d_a)], axis=1).tolist()
    y_hist = np.stack([s[f"y_{j}"] for j in range(cfg.d_y)], axis=1)[: t + 1].tolist()
    p_hist = np.stack([s[f"p_{l}"] for l in range(cfg.d_a)], axis=1)[: t + 1].tolist()
    A_hist = [[(int(w) >> l) & 1 for l in range(cfg.d_a)] for w in traj.W[: t + 1]]
    forced = [[(int(w) >> l) & 1 for l in range(cfg.d_a)] for w in plan]
    if t + 1 + len(plan) > T:
        raise ValueError("plan extends beyond the simulated length")
    _roll_ehr(cfg, z, fy, y_hist, A_hist, p_hist, t + 1, len(plan), forced=forced)
    return [y[0] for y in y_hist[t + 1:]]
