"""History encoder: local features, context GRU, and the contrastive pretraining objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .config import ModelConfig
from .data import SeqData
from .diffcore import (
    OptimizerState, Value, add, adamw_step, backward, exp, log_sum_exp, matmul, mean, mul,
    one_hot_gather, reshape, selu, slice_, sub, transpose,
)
from .rng import substream

OFFDIAG_MASK = -1e30


@dataclass
class EncoderParams:
    """Named arrays for theta1 (``enc.local``), theta2 (``enc.gru``), Gamma_j and eta."""

    store: dict
    d_u: int
    z_dim: int
    c_dim: int
    tau: int

    def copy(self):
        return EncoderParams({k: v.copy() for k, v in self.store.items()}, self.d_u, self.z_dim,
                             self.c_dim, self.tau)

    def gamma_names(self):
        return [f"enc.gamma.{j}" for j in range(1, self.tau + 1)]


def init_encoder(d_u, z_dim, c_dim, tau, rng) -> EncoderParams:
    s = {}
    L.init_wn_affine(s, rng, "enc.local.0", d_u, z_dim)
    L.init_wn_affine(s, rng, "enc.local.1", z_dim, z_dim)
    L.init_gru(s, rng, "enc.gru", z_dim, c_dim)
    bound = 1.0 / math.sqrt(c_dim)
    for j in range(1, tau + 1):
        s[f"enc.gamma.{j}"] = rng.uniform(-bound, bound, size=(z_dim, c_dim))
    L.init_affine(s, rng, "enc.eta.0", c_dim, c_dim)
    L.init_affine(s, rng, "enc.eta.1", c_dim, c_dim)
    return EncoderParams(s, d_u, z_dim, c_dim, tau)


# ---------------------------------------------------------------- forward pieces

def encode_local(u, P, d_u=None):
    """theta1: affine -> weight-norm -> SELU -> affine -> weight-norm on the last axis."""
    u = u if isinstance(u, Value) else Value(u)
    expected = P["enc.local.0.v"].shape[1]
    if u.shape[-1] != expected:
        raise ValueError(f"component dimension {u.shape[-1]} != expected {expected}")
    lead = u.shape[:-1]
    flat = reshape(u, (-1, expected)) if u.ndim != 2 else u
    z = L.wn_affine(selu(L.wn_affine(flat, P, "enc.local.0")), P, "enc.local.1")
    return reshape(z, (*lead, z.shape[-1])) if u.ndim != 2 else z


gru_step = L.gru_step


def encode_context(z_seq, mask, P, prefix="enc.gru", h0=None):
    """Run the context GRU over ``z_seq`` (n, T, z); returns the list of hidden states.

    Masked steps (``mask[:, t] == 0``) carry the previous hidden state through.
    """
    z_seq = z_seq if isinstance(z_seq, Value) else Value(z_seq)
    n, T = z_seq.shape[0], z_seq.shape[1]
    if T == 0:
        raise ValueError("encode_context: empty sequence")
    c_dim = P[f"{prefix}.Ur"].shape[0]
    h = Value(np.zeros((n, c_dim))) if h0 is None else h0
    mask = None if mask is None else np.asarray(mask, dtype=np.float64)
    out = []
    for t in range(T):
        h_new = gru_step(slice_(z_seq, (slice(None), t)), h, P, prefix)
        if mask is not None and not np.all(mask[:, t] == 1.0):
            h_new = add(h, mul(sub(h_new, h), mask[:, t:t + 1]))
        h = h_new
        out.append(h)
    return out


def infonce_from_scores(scores):
    """Mean over rows of ``-log softmax(row)[i]`` with positives on the diagonal."""
    n = scores.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs at least 2 samples (no negatives otherwise)")
    pos = one_hot_gather(scores, np.arange(n))
    return mean(sub(log_sum_exp(scores, axis=1), pos))


def mi_lower_bound_alt(scores, kind):
    """NWJ or MINE (Donsker-Varadhan) bound from a score matrix with diagonal positives."""
    scores = scores if isinstance(scores, Value) else Value(scores)
    n = scores.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    diag = mean(one_hot_gather(scores, np.arange(n)))
    off = add(scores, np.eye(n) * OFFDIAG_MASK)
    log_count = math.log(n * (n - 1))
    if kind == "nwj":
        lme = sub(log_sum_exp(reshape(sub(off, 1.0), (n * n,))), log_count)
        return sub(diag, exp(lme))
    if kind == "mine":
        return sub(diag, sub(log_sum_exp(reshape(off, (n * n,))), log_count))
    raise ValueError(f"unknown estimator {kind!r}")


def cpc_scores(c_anchor, z_future, gamma):
    """s_il = z_l^T Gamma c_i for anchors ``c_anchor`` (n, c) and futures (n, z)."""
    return matmul(matmul(c_anchor, transpose(gamma)), transpose(z_future))


@dataclass
class BatchView:
    U: np.ndarray           # (n, T, d_u) rows already filtered to units long enough
    mask: np.ndarray        # (n, T)
    t: int                  # anchor context index
    tau: int
    t0: int | None = None   # InfoMax split; past = components [0, t0), future = [t0, t]

    def __post_init__(self):
        if self.U.shape[0] < 2:
            raise ValueError("batch needs at least 2 units")
        if self.t0 is not None and not (1 <= self.t0 <= self.t):
            raise ValueError(f"t0={self.t0} outside [1, {self.t}]")


def infonce_cpc_loss(view: BatchView, P, z=None, ctx=None):
    """(1/tau) sum_j InfoNCE over in-batch negatives at offset j."""
    if z is None:
        z = encode_local(view.U[:, : view.t + view.tau + 1], P)
    if ctx is None:
        ctx = encode_context(slice_(z, (slice(None), slice(0, view.t + 1))), view.mask[:, : view.t + 1], P)
    c = ctx[view.t]
    losses = [infonce_from_scores(cpc_scores(c, slice_(z, (slice(None), view.t + j)), P[f"enc.gamma.{j}"]))
              for j in range(1, view.tau + 1)]
    total = losses[0]
    for l in losses[1:]:
        total = add(total, l)
    return mul(total, 1.0 / view.tau)


def infomax_scores(view: BatchView, P, z, ctx):
    c_hist = ctx[view.t0 - 1]
    fut = encode_context(slice_(z, (slice(None), slice(view.t0, view.t + 1))),
                         view.mask[:, view.t0: view.t + 1], P)
    c_fut = fut[-1]
    pred = L.mlp_selu(c_hist, P, "enc.eta")
    return matmul(pred, transpose(c_fut))   # rows: anchors i, columns: candidates l


def infomax_loss(view: BatchView, P, z=None, ctx=None, estimator="infonce"):
    if view.t0 is None:
        raise ValueError("infomax_loss needs a split t0")
    if z is None:
        z = encode_local(view.U[:, : view.t + 1], P)
    if ctx is None:
        ctx = encode_context(slice_(z, (slice(None), slice(0, view.t + 1))), view.mask[:, : view.t + 1], P)
    scores = infomax_scores(view, P, z, ctx)
    if estimator == "infonce":
        return infonce_from_scores(scores)
    return mul(mi_lower_bound_alt(scores, estimator), -1.0)


def encoder_objective(view: BatchView, P, cfg: ModelConfig):
    """Returns (total, cpc, infomax) Values; disabled terms are None."""
    z = encode_local(view.U[:, : view.t + view.tau + 1], P)
    ctx = encode_context(slice_(z, (slice(None), slice(0, view.t + 1))), view.mask[:, : view.t + 1], P)
    cpc = None if cfg.has("no_cpc") else infonce_cpc_loss(view, P, z, ctx)
    im = None if cfg.has("no_infomax") else infomax_loss(view, P, z, ctx, cfg.mi_estimator)
    terms = [x for x in (cpc, im) if x is not None]
    if not terms:
        return None, None, None
    total = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return total, cpc, im


# ---------------------------------------------------------------- pretraining

def draw_view(data: SeqData, idx, tau, rng, tries=20):
    """Anchor t uniform in [1, T - tau - 1]; keep units with t + tau <= active_len - 1."""
    T = data.T
    for _ in range(tries):
        t = int(rng.integers(1, T - tau))
        keep = idx[data.active_len[idx] - 1 >= t + tau]
        if len(keep) >= 2:
            t0 = int(rng.integers(1, t + 1))
            return BatchView(data.U[keep], data.mask()[keep], t, tau, t0)
    return None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def csv(self, header):
        lines = [",".join(header)]
        for r in self.rows:
            lines.append(",".join(_fmt(x) for x in r))
        return "\n".join(lines) + "\n"


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def _val_views(data: SeqData, tau, seed, batch_size, count=4):
    rng = substream(seed, "val-anchors")
    idx = np.arange(data.n)
    views = []
    for k in range(count):
        sub_idx = idx if data.n <= batch_size else np.sort(rng.choice(idx, batch_size, replace=False))
        v = draw_view(data, sub_idx, tau, rng)
        if v is not None:
            views.append(v)
    return views


def evaluate_encoder(params: EncoderParams, views, cfg: ModelConfig):
    P = L.as_leaves(params.store, track=False)
    vals = []
    for v in views:
        total, _, _ = encoder_objective(v, P, cfg)
        vals.append(total.data)
    return float(np.mean(vals)) if vals else float("nan")


def pretrain_encoder(train: SeqData, val: SeqData | None, cfg: ModelConfig, seed, epochs=None,
                     params: EncoderParams | None = None, progress=None):
    """Algorithm-1 style pretraining; returns (best params, TrainLog).

    Early stopping monitors the held-out encoder loss on fixed validation
    anchors; the best-loss parameters are returned.
    """
    from .evalkit import EarlyStopMonitor

    if train.T < cfg.tau + 2:
        raise ValueError(f"sequence length {train.T} < tau + 2")
    epochs = cfg.enc_max_epochs if epochs is None else epochs
    params = params or init_encoder(train.d_u, cfg.z_dim, cfg.c_dim, cfg.tau, substream(seed, "init-encoder"))
    best = params.copy()
    log = TrainLog()
    if epochs <= 0 or (cfg.has("no_cpc") and cfg.has("no_infomax")):
        return best, log
    state = OptimizerState()
    batch_rng = substream(seed, "batching-encoder")
    views_val = _val_views(val if val is not None else train, cfg.tau, seed, cfg.enc_batch_size)
    monitor = EarlyStopMonitor(cfg.enc_min_delta, cfg.enc_patience)
    for epoch in range(1, epochs + 1):
        order = batch_rng.permutation(train.n)
        cpc_sum = im_sum = 0.0
        n_batches = 0
        for start in range(0, train.n, cfg.enc_batch_size):
            view = draw_view(train, order[start: start + cfg.enc_batch_size], cfg.tau, batch_rng)
            if view is None:
                continue
            P = L.as_leaves(params.store)
            total, cpc, im = encoder_objective(view, P, cfg)
            if not np.isfinite(total.data):
                raise FloatingPointError(f"non-finite encoder loss at epoch {epoch} (anchor t={view.t})")
            grads = _clip(L.gradients(P, backward(total)), cfg.grad_clip)
            adamw_step(params.store, grads, state, cfg.enc_lr, weight_decay=cfg.weight_decay)
            cpc_sum += 0.0 if cpc is None else float(cpc.data)
            im_sum += 0.0 if im is None else float(im.data)
            n_batches += 1
        val_loss = evaluate_encoder(params, views_val, cfg)
        nb = max(n_batches, 1)
        log.rows.append((epoch, None if cfg.has("no_cpc") else cpc_sum / nb,
                         None if cfg.has("no_infomax") else im_sum / nb, val_loss))
        stop = monitor.update(val_loss)
        if monitor.best_epoch == epoch:
            best = params.copy()
        if progress:
            progress(epoch, log.rows[-1])
        if stop:
            break
    return best, log


ENCODER_LOG_HEADER = ("step", "loss_cpc", "loss_infomax", "val_loss")
