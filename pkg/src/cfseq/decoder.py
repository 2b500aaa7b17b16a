"""Balanced representation, autoregressive counterfactual decoder and the CLUB game."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .config import ModelConfig
from .data import SeqData, usable_origins
from .diffcore import (
    OptimizerState, Value, adamw_step, add, backward, concat, log_softmax, log_sum_exp, mean, mul,
    one_hot_gather, power_iteration, selu, sgd_momentum_step, stop_gradient, sub, sum_, take,
)
from .encoder import EncoderParams, TrainLog, _clip, encode_context, encode_local, init_encoder
from .rng import substream

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
SN_LAYERS = ("dec.w.0", "dec.w.1")
REP_PREFIXES = ("enc.local", "enc.gru", "dec.phi", "dec.hphi", "dec.gru", "dec.plan", "dec.y")


@dataclass
class CausalCPC:
    """Full model: encoder store, decoder store, spectral-norm state and dimensions."""

    enc: EncoderParams
    dec: dict
    sn_u: dict
    K: int
    d_v: int
    r_dim: int
    plan_hidden: int
    sigma: float
    y_scale: float

    @property
    def tau(self):
        return self.enc.tau

    def all_params(self):
        return {**self.enc.store, **self.dec}

    def copy(self):
        return CausalCPC(self.enc.copy(), {k: v.copy() for k, v in self.dec.items()},
                         {k: v.copy() for k, v in self.sn_u.items()}, self.K, self.d_v, self.r_dim,
                         self.plan_hidden, self.sigma, self.y_scale)

    def names(self, prefixes):
        return {k for k in self.all_params() if k.startswith(tuple(p + "." for p in prefixes))}

    def sn_vectors(self, update=False, n_iter=1):
        """Power-iteration vectors per spectral-norm layer; ``update`` persists u."""
        out = {}
        for name in SN_LAYERS:
            u, v, _ = power_iteration(self.dec[f"{name}.W"], self.sn_u[name], n_iter)
            if update:
                self.sn_u[name] = u
            out[name] = (u, v)
        return out


def init_decoder(enc: EncoderParams, K, d_v, cfg: ModelConfig, y_scale, rng) -> CausalCPC:
    s = {}
    r = cfg.r_dim
    L.init_affine(s, rng, "dec.phi", enc.c_dim, r)
    L.init_affine(s, rng, "dec.hphi", r, r)
    L.init_gru(s, rng, "dec.plan", K, cfg.plan_hidden)
    L.init_gru(s, rng, "dec.gru", K + cfg.plan_hidden + 1 + d_v, r)
    L.init_wn_affine(s, rng, "dec.y.0", r + K, cfg.fc_hidden)
    L.init_wn_affine(s, rng, "dec.y.1", cfg.fc_hidden, 1)
    L.init_sn_affine(s, rng, "dec.w.0", r, cfg.fc_hidden)
    L.init_sn_affine(s, rng, "dec.w.1", cfg.fc_hidden, K)
    sn_u = {"dec.w.0": L.init_sn_state(rng, cfg.fc_hidden), "dec.w.1": L.init_sn_state(rng, K)}
    return CausalCPC(enc, s, sn_u, K, d_v, r, cfg.plan_hidden, cfg.sigma, y_scale)


# ---------------------------------------------------------------- forward pieces

def represent(c, P, prefix="dec.phi"):
    """Phi = SELU(affine(C))."""
    return selu(L.affine(c, P, prefix))


def outcome_head(phi, onehot_w, P):
    x = concat([phi, Value(onehot_w)], axis=1)
    return L.wn_affine(selu(L.wn_affine(x, P, "dec.y.0")), P, "dec.y.1")


def treatment_logits(phi, P, sn_vectors):
    return L.sn_affine(selu(L.sn_affine(phi, P, "dec.w.0", sn_vectors)), P, "dec.w.1", sn_vectors)


@dataclass
class RolloutResult:
    y_hat: Value        # (R, tau)
    phis: list          # tau - 1 Values (R, r): Phi_{t+1..t+tau-1}
    logits: list        # tau Values (R, K) from stop-gradient Phi_{t+j-1}
    phi_t: Value        # Phi_t, the rollout seed


def _check_codes(codes, K):
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= K or not np.issubdtype(codes.dtype, np.integer)):
        raise ValueError(f"treatment codes must be integers in [0, {K - 1}]")
    return codes


def decode_rollout(phi_t, v, w_t, plan, P, K, sn_vectors=None):
    """Autoregressive rollout under ``plan`` (R, tau); never consumes observed outcomes.

    ``y_hat[:, j-1] = G_Y([Phi_{t+j-1}, onehot(plan_j)])``; the decoder GRU (seeded
    with Phi_t) then consumes [onehot(plan_j), plan-encoder state, y_hat_j, v] to
    emit Phi_{t+j}. The plan encoder reads w_t first, then the plan.
    """
    plan = _check_codes(plan, K)
    w_t = _check_codes(w_t, K)
    R, tau = plan.shape
    if tau < 1:
        raise ValueError("plan length must be >= 1")
    eye = np.eye(K)
    v = np.asarray(v, dtype=np.float64)
    plan_h = L.gru_step(Value(eye[w_t]), Value(np.zeros((R, P["dec.plan.Ur"].shape[0]))), P, "dec.plan")
    h = phi_t
    phi_prev = phi_t
    preds, phis, logits = [], [], []
    for j in range(tau):
        oh = eye[plan[:, j]]
        y_j = outcome_head(phi_prev, oh, P)
        preds.append(y_j)
        if sn_vectors is not None:
            logits.append(treatment_logits(stop_gradient(phi_prev), P, sn_vectors))
        if j == tau - 1:
            break
        plan_h = L.gru_step(Value(oh), plan_h, P, "dec.plan")
        x = concat([Value(oh), plan_h, y_j, Value(v)], axis=1)
        h = L.gru_step(x, h, P, "dec.gru")
        phi_prev = selu(L.affine(h, P, "dec.hphi"))
        phis.append(phi_prev)
    return RolloutResult(concat(preds, axis=1), phis, logits, phi_t)


def outcome_nll(y_hat, y, sigma=0.05, mask=None):
    """Gaussian NLL summed over horizon, averaged over the batch."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y_hat = y_hat if isinstance(y_hat, Value) else Value(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    m = np.ones(y.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    err = sub(y_hat, y)
    per = add(mul(mul(err, err), 1.0 / (2 * sigma * sigma)), math.log(sigma * math.sqrt(2 * math.pi)))
    return mul(sum_(mul(per, m)), 1.0 / y.shape[0])


def treatment_ce(logits, w):
    """Mean cross-entropy of softmax(logits) against codes ``w``."""
    logits = logits if isinstance(logits, Value) else Value(logits)
    w = np.asarray(w)
    return mean(sub(log_sum_exp(logits, axis=1), one_hot_gather(logits, w)))


def floored_log_probs(logits):
    """log softmax with a 1e-12 probability floor; floored entries carry no gradient."""
    lp = log_softmax(logits, axis=1)
    low = lp.data < LOG_FLOOR
    if np.any(low):
        warnings.warn(f"classifier probability floored at {PROB_FLOOR} for {int(low.sum())} entries",
                      RuntimeWarning)
        keep = (~low).astype(np.float64)
        lp = add(mul(lp, keep), (1.0 - keep) * LOG_FLOOR)
    return lp


def club_from_logprobs(logq, w, w_perm):
    """(1/n) sum log q(w_i|Phi_i) - (1/n) sum log q(w'_i|Phi_i)."""
    logq = logq if isinstance(logq, Value) else Value(logq)
    return sub(mean(one_hot_gather(logq, np.asarray(w))), mean(one_hot_gather(logq, np.asarray(w_perm))))


def draw_permutation(n, rng):
    if n < 2:
        raise ValueError("CLUB needs n >= 2")
    while True:
        p = rng.permutation(n)
        if np.any(p != np.arange(n)):
            return p


def club_estimate(phi, w, P, sn_vectors, perm):
    """CLUB upper-bound estimate; ``P`` should hold theta_W as untracked leaves."""
    w = np.asarray(w)
    logq = floored_log_probs(treatment_logits(phi, P, sn_vectors))
    return club_from_logprobs(logq, w, w[np.asarray(perm)])


def cdc_stand_in(phi, P, sn_vectors):
    """Uniform-target cross-entropy; an approximation of domain-confusion balancing."""
    logq = floored_log_probs(treatment_logits(phi, P, sn_vectors))
    K = logq.shape[1]
    return mul(sum_(logq), -1.0 / (K * logq.shape[0]))


# ---------------------------------------------------------------- batched model pass

def contexts_at(model: CausalCPC, P, U, mask, units, ctx_index):
    """Context vectors C at (units[r], ctx_index[r]); the GRU runs only as far as needed."""
    T_need = int(np.max(ctx_index)) + 1
    ub = np.unique(units)
    pos = np.searchsorted(ub, units)
    z = encode_local(U[ub, :T_need], P)
    ctx = encode_context(z, mask[ub, :T_need], P)
    stacked = concat(ctx, axis=0)                       # row t * B + b
    return take(stacked, ctx_index * len(ub) + pos)


def rollout_for(model: CausalCPC, P, data: SeqData, units, origins, plans, sn_vectors=None):
    c = contexts_at(model, P, data.U, data.mask(), units, origins + 1)
    phi_t = represent(c, P)
    return decode_rollout(phi_t, data.V[units], data.W[units, origins], plans, P, model.K, sn_vectors)


def representations(model: CausalCPC, data: SeqData, units, origins, chunk=2048):
    """Frozen Phi_t arrays (R, r) at the given origins."""
    P = L.as_leaves(model.all_params(), track=False)
    units, origins = np.asarray(units), np.asarray(origins)
    out = np.empty((len(units), model.r_dim))
    for s in range(0, len(units), chunk):
        sl = slice(s, s + chunk)
        out[sl] = represent(contexts_at(model, P, data.U, data.mask(), units[sl], origins[sl] + 1), P).data
    return out


def sample_origins(active_len, tau, fraction, rng):
    """Per unit, ceil(fraction * usable) distinct origins; returns (units, origins)."""
    units, origins = [], []
    for i, n_use in enumerate(usable_origins(active_len, tau)):
        if n_use <= 0:
            continue
        m = max(1, math.ceil(fraction * n_use))
        picks = np.sort(rng.choice(n_use, size=m, replace=False))
        units.extend([i] * m)
        origins.extend(picks.tolist())
    return np.asarray(units, dtype=np.int64), np.asarray(origins, dtype=np.int64)


def factual_targets(data: SeqData, units, origins, tau):
    steps = origins[:, None] + np.arange(1, tau + 1)[None, :]
    return data.W[units[:, None], steps], data.y[units[:, None], steps]


def predict_batch(model: CausalCPC, data: SeqData, units, origins, plans, chunk=2048):
    """Scaled predictions (R, tau) for queries, evaluated in fixed-size chunks without a graph."""
    P = L.as_leaves(model.all_params(), track=False)
    units, origins, plans = np.asarray(units), np.asarray(origins), np.asarray(plans)
    _check_codes(plans, model.K)
    out = np.empty(plans.shape)
    for s in range(0, len(units), chunk):
        sl = slice(s, s + chunk)
        res = rollout_for(model, P, data, units[sl], origins[sl], plans[sl])
        out[sl] = res.y_hat.data
    return out


def predict_counterfactual(model: CausalCPC, data: SeqData, unit, t, plan):
    """Unscaled predicted outcomes for one unit's history up to origin ``t`` under ``plan``."""
    if t < 0:
        raise ValueError("origin must be >= 0 (prefix length >= 1)")
    y = predict_batch(model, data, [unit], [t], np.asarray([plan]))
    return y[0] * model.y_scale


# ---------------------------------------------------------------- training

def _val_set(data: SeqData, tau, fraction, seed):
    units, origins = sample_origins(data.active_len, tau, fraction, substream(seed, "val-origins"))
    plans, ys = factual_targets(data, units, origins, tau)
    return units, origins, plans, ys


def factual_mse(model, data, val_set, chunk=2048):
    """Validation factual MSE with outcomes in percent of the scale constant."""
    units, origins, plans, ys = val_set
    pred = predict_batch(model, data, units, origins, plans, chunk)
    return float(np.mean((100.0 * (pred - ys)) ** 2))


def draw_step_permutations(n, tau, rng):
    """One fresh non-identity permutation per rollout step."""
    return [draw_permutation(n, rng) for _ in range(tau)]


def representation_objective(model: CausalCPC, P, batch: SeqData, units, origins, cfg: ModelConfig, sn,
                             perms=None):
    """L_dec = L_Y + weight * balancing term; theta_W enters only as untracked leaves.

    Returns (loss, l_y, balancing or None, rollout, plans).
    """
    plans, ys = factual_targets(batch, units, origins, model.tau)
    res = rollout_for(model, P, batch, units, origins, plans)
    l_y = outcome_nll(res.y_hat, ys, model.sigma)
    phis = [res.phi_t] + res.phis
    terms = []
    if not cfg.has("no_balancing"):
        for j, phi in enumerate(phis):
            if cfg.has("cdc_loss"):
                terms.append(cdc_stand_in(phi, P, sn))
            else:
                terms.append(club_estimate(phi, plans[:, j], P, sn, perms[j]))
    if not terms:
        return l_y, l_y, None, res, plans
    bal = terms[0]
    for b in terms[1:]:
        bal = add(bal, b)
    bal = mul(bal, 1.0 / len(terms))
    return add(l_y, mul(bal, cfg.club_weight)), l_y, bal, res, plans


def representation_update(model: CausalCPC, batch, units, origins, cfg, sn, perms, state, lr_map):
    """Adaptive-moment step on theta_R, theta_Phi, theta_4 and theta_Y; theta_W is left untouched."""
    P = L.as_leaves(model.all_params(), names=model.names(REP_PREFIXES))
    loss, l_y, bal, res, plans = representation_objective(model, P, batch, units, origins, cfg, sn, perms)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite decoder loss")
    grads = _clip(L.gradients(P, backward(loss)), cfg.grad_clip)
    store = model.all_params()
    adamw_step(store, grads, state, lr_map, weight_decay=cfg.weight_decay)
    _sync(model, store)
    phis = [res.phi_t] + res.phis
    return l_y, bal, [p.data for p in phis], plans


def classifier_update(model: CausalCPC, phis, plans, cfg, sn, state):
    """Momentum-SGD step on theta_W against L_W over detached representations."""
    Pw = L.as_leaves(model.dec, names=model.names(("dec.w",)))
    phi_det = np.concatenate(phis, axis=0)
    l_w = treatment_ce(treatment_logits(Value(phi_det), Pw, sn), plans.T.reshape(-1))
    sgd_momentum_step(model.dec, L.gradients(Pw, backward(l_w)), state, cfg.treat_lr, cfg.treat_momentum)
    return l_w


def decoder_step(model: CausalCPC, batch: SeqData, units, origins, cfg: ModelConfig, rng,
                 rep_state, w_state, lr_map):
    """One alternating update; returns a dict of scalar diagnostics."""
    sn = model.sn_vectors(update=True, n_iter=cfg.sn_iterations)
    perms = None
    if not cfg.has("no_balancing") and not cfg.has("cdc_loss"):
        perms = draw_step_permutations(len(units), model.tau, rng)
    l_y, bal, phis, plans = representation_update(model, batch, units, origins, cfg, sn, perms, rep_state, lr_map)
    l_w = classifier_update(model, phis, plans, cfg, sn, w_state)
    return {"loss_y": float(l_y.data), "club": None if bal is None else float(bal.data), "loss_w": float(l_w.data)}


def _sync(model, store):
    for k in model.enc.store:
        model.enc.store[k] = store[k]
    for k in model.dec:
        if not k.startswith("dec.w."):
            model.dec[k] = store[k]


def train_decoder(train: SeqData, val: SeqData | None, enc: EncoderParams | None, cfg: ModelConfig, seed,
                  epochs=None, progress=None):
    """Algorithm-2 style training; returns (best model by validation factual MSE, TrainLog)."""
    from .evalkit import EarlyStopMonitor

    if enc is None:
        enc = init_encoder(train.d_u, cfg.z_dim, cfg.c_dim, cfg.tau, substream(seed, "init-encoder"))
    if enc.d_u != train.d_u or enc.tau != cfg.tau:
        raise ValueError("encoder checkpoint incompatible with data/config (d_u or tau differ)")
    model = init_decoder(enc.copy(), train.K, train.V.shape[1], cfg, train.y_scale, substream(seed, "init-decoder"))
    epochs = cfg.dec_max_epochs if epochs is None else epochs
    log = TrainLog()
    best = model.copy()
    if epochs <= 0:
        return best, log
    enc_names = set(model.enc.store)
    lr_map = {k: (cfg.dec_lr * cfg.finetune_lr_ratio if k in enc_names else cfg.dec_lr)
              for k in model.all_params()}
    rep_state, w_state = OptimizerState(), OptimizerState()
    batch_rng = substream(seed, "batching-decoder")
    perm_rng = substream(seed, "club-permutation")
    vdata = val if val is not None else train
    vset = _val_set(vdata, cfg.tau, cfg.origin_fraction, seed)
    monitor = EarlyStopMonitor(cfg.dec_min_delta, cfg.dec_patience)
    init_mse = factual_mse(model, vdata, vset)
    log.rows.append((0, None, None, None, init_mse))
    for epoch in range(1, epochs + 1):
        order = batch_rng.permutation(train.n)
        sums = {"loss_y": 0.0, "club": 0.0, "loss_w": 0.0}
        nb = 0
        for start in range(0, train.n, cfg.dec_batch_size):
            idx = np.sort(order[start: start + cfg.dec_batch_size])
            batch = train.subset(idx)
            units, origins = sample_origins(batch.active_len, cfg.tau, cfg.origin_fraction, batch_rng)
            if len(units) < 2:
                continue
            stats = decoder_step(model, batch, units, origins, cfg, perm_rng, rep_state, w_state, lr_map)
            for k in sums:
                sums[k] += stats[k] or 0.0
            nb += 1
        mse = factual_mse(model, vdata, vset)
        nb = max(nb, 1)
        log.rows.append((epoch, sums["loss_y"] / nb, None if cfg.has("no_balancing") else sums["club"] / nb,
                         sums["loss_w"] / nb, mse))
        stop = monitor.update(mse)
        if monitor.best_epoch == epoch:
            best = model.copy()
        if progress:
            progress(epoch, log.rows[-1])
        if stop:
            break
    return best, log


DECODER_LOG_HEADER = ("step", "loss_y", "club", "loss_w", "val_mse")
