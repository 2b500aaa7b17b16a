"""Model-ready tensors built from a cohort: components U_t, masks and scaled outcomes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simkit.cohort import Cohort


@dataclass
class SeqData:
    U: np.ndarray          # (n, T, d_u) with U_t = [V, X_t, onehot(W_{t-1}), Y_{t-1}]
    W: np.ndarray          # (n, T) int
    y: np.ndarray          # (n, T) scaled outcomes
    V: np.ndarray          # (n, d_v)
    active_len: np.ndarray
    K: int
    y_scale: float

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def T(self):
        return self.U.shape[1]

    @property
    def d_u(self):
        return self.U.shape[2]

    def mask(self):
        return np.arange(self.T)[None, :] < self.active_len[:, None]

    def subset(self, idx):
        return SeqData(self.U[idx], self.W[idx], self.y[idx], self.V[idx], self.active_len[idx],
                       self.K, self.y_scale)


def mask_columns(X, indices):
    indices = list(indices)
    if any(i < 0 or i >= X.shape[-1] for i in indices):
        raise IndexError(f"covariate index out of range for d_x={X.shape[-1]}: {indices}")
    if not indices:
        return X
    X = X.copy()
    X[..., indices] = 0.0
    return X


def build_seqdata(cohort: Cohort, masked_covariates=(), y_scale=None) -> SeqData:
    y_scale = cohort.y_scale if y_scale is None else y_scale
    n, T = cohort.n, cohort.max_len
    X = mask_columns(cohort.X / cohort.x_scale, masked_covariates)
    y = cohort.Y / y_scale
    w_prev = np.zeros((n, T), dtype=np.int64)
    w_prev[:, 1:] = cohort.W[:, :-1]
    y_prev = np.zeros((n, T))
    y_prev[:, 1:] = y[:, :-1]
    U = np.concatenate([np.repeat(cohort.V[:, None, :], T, axis=1), X, np.eye(cohort.K)[w_prev],
                        y_prev[:, :, None]], axis=2)
    return SeqData(U, cohort.W.copy(), y, cohort.V.copy(), cohort.active_len.copy(), cohort.K, y_scale)


OUTCOME_SCALINGS = ("std", "cohort")


def outcome_scale(cohort: Cohort, mode="std") -> float:
    """Outcome divisor fit on a training cohort: std of active outcomes, or the cohort's own constant."""
    if mode == "cohort":
        return float(cohort.y_scale)
    if mode != "std":
        raise ValueError(f"unknown outcome scaling {mode!r}; choose from {OUTCOME_SCALINGS}")
    active = np.arange(cohort.max_len)[None, :] < cohort.active_len[:, None]
    sd = float(cohort.Y[active].std())
    return sd if sd > 0 else float(cohort.y_scale)


def usable_origins(active_len, tau):
    """Origins t with t + tau <= active_len - 1; context index is t + 1."""
    return np.maximum(np.asarray(active_len) - tau, 0)
