"""Counterfactual queries, per-horizon metrics, early stopping and experiment orchestration."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ABLATION_FLAGS, ExperimentConfig, ModelConfig
from .data import SeqData, build_seqdata, outcome_scale, usable_origins
from .rng import substream
from .simkit import Cohort, ground_truth_batch, simulate_ehr_cohort, simulate_tumor_cohort

STRATEGIES = ("sliding", "random", "factual")


# ---------------------------------------------------------------- early stopping

class EarlyStopMonitor:
    """Stop after ``patience`` epochs without improvement strictly greater than ``min_delta``.

    ``best_epoch`` (1-based) tracks the global minimizer.
    """

    def __init__(self, min_delta, patience):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.min_delta, self.patience = float(min_delta), int(patience)
        self.reference = math.inf
        self.best_value = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, value) -> bool:
        self.epoch += 1
        if value < self.best_value:
            self.best_value, self.best_epoch = value, self.epoch
        if self.reference - value > self.min_delta:
            self.reference = value
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def early_stop_monitor(history, min_delta, patience):
    """Replay ``history``; returns (stop flag, stop epoch or None, best 1-based index)."""
    m = EarlyStopMonitor(min_delta, patience)
    for v in history:
        if m.update(v):
            return True, m.epoch, m.best_epoch
    return False, None, m.best_epoch


# ---------------------------------------------------------------- queries

@dataclass
class CFQuery:
    unit_id: int
    t: int
    plan: tuple
    ground_truth: np.ndarray | None
    strategy: str


@dataclass
class QuerySet:
    """Columnar queries: row ``r`` asks about cohort row ``units[r]`` at origin ``origins[r]``."""

    units: np.ndarray
    origins: np.ndarray
    plans: np.ndarray          # (R, tau)
    truth: np.ndarray | None   # (R, tau) unscaled
    strategy: str
    unit_ids: np.ndarray

    def __len__(self):
        return len(self.units)

    def __getitem__(self, r) -> CFQuery:
        gt = None if self.truth is None else self.truth[r]
        return CFQuery(int(self.unit_ids[r]), int(self.origins[r]), tuple(int(w) for w in self.plans[r]), gt,
                       self.strategy)


def _origins(cohort: Cohort, tau):
    units, origins = [], []
    for i, n_use in enumerate(usable_origins(cohort.active_len, tau)):
        units.extend([i] * int(n_use))
        origins.extend(range(int(n_use)))
    return np.asarray(units, dtype=np.int64), np.asarray(origins, dtype=np.int64)


def attach_ground_truth(cohort: Cohort, units, origins, plans):
    return ground_truth_batch(cohort, units, origins, plans)


def _finish(cohort, units, origins, plans, strategy, with_truth):
    truth = None
    if with_truth and cohort.has_sim_state():
        truth = attach_ground_truth(cohort, units, origins, plans)
    return QuerySet(units, origins, plans, truth, strategy, cohort.unit_id[units])


def gen_queries_sliding(cohort: Cohort, tau, with_truth=True) -> QuerySet:
    """Single non-null treatment k at offset d, no treatment elsewhere; all (k, d) pairs."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    u, o = _origins(cohort, tau)
    pairs = [(k, d) for k in range(1, cohort.K) for d in range(tau)]
    base = np.zeros((len(pairs), tau), dtype=np.int64)
    for r, (k, d) in enumerate(pairs):
        base[r, d] = k
    units = np.repeat(u, len(pairs))
    origins = np.repeat(o, len(pairs))
    plans = np.tile(base, (len(u), 1))
    return _finish(cohort, units, origins, plans, "sliding", with_truth)


def gen_queries_random(cohort: Cohort, tau, rng, with_truth=True) -> QuerySet:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    u, o = _origins(cohort, tau)
    plans = rng.integers(0, cohort.K, size=(len(u), tau))
    return _finish(cohort, u, o, plans, "random", with_truth)


def gen_queries_factual(cohort: Cohort, tau) -> QuerySet:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    u, o = _origins(cohort, tau)
    steps = o[:, None] + np.arange(1, tau + 1)[None, :]
    return QuerySet(u, o, cohort.W[u[:, None], steps], cohort.Y[u[:, None], steps], "factual", cohort.unit_id[u])


def gen_queries(cohort, tau, strategy, seed=0, with_truth=True) -> QuerySet:
    if strategy == "sliding":
        return gen_queries_sliding(cohort, tau, with_truth)
    if strategy == "random":
        return gen_queries_random(cohort, tau, substream(seed, "queries-random"), with_truth)
    if strategy == "factual":
        return gen_queries_factual(cohort, tau)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


# ---------------------------------------------------------------- metrics

def rmse_by_horizon(predictions, queries):
    truth = queries.truth if isinstance(queries, QuerySet) else _stack_truth(queries)
    if truth is None:
        raise ValueError("queries carry no ground truth")
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    return np.sqrt(np.mean((pred - truth) ** 2, axis=0))


def _stack_truth(queries):
    if any(q.ground_truth is None for q in queries):
        raise ValueError("a query is missing ground truth")
    return np.array([q.ground_truth for q in queries], dtype=np.float64)


def nrmse(rmse, normalization):
    if not normalization > 0:
        raise ValueError("normalization must be positive")
    return np.asarray(rmse, dtype=np.float64) / normalization


def normalization_constant(cohort: Cohort, percent=True):
    """Maximum observed outcome over the cohort; divided by 100 to report percent."""
    active = np.arange(cohort.max_len)[None, :] < cohort.active_len[:, None]
    m = float(np.max(cohort.Y[active]))
    return m / 100.0 if percent else m


@dataclass
class EvalReport:
    variant: str
    rmse: np.ndarray          # seed mean per horizon
    nrmse: np.ndarray
    n_queries: int
    norm_const: float
    seeds: tuple
    per_seed_rmse: np.ndarray  # (n_seeds, tau)
    per_seed_nrmse: np.ndarray
    config_fingerprint: str = ""
    model_fingerprints: tuple = ()

    @property
    def nrmse_sd(self):
        return self.per_seed_nrmse.std(axis=0, ddof=1) if len(self.seeds) > 1 else np.zeros_like(self.nrmse)

    def mean_nrmse(self, max_h=10):
        return float(np.mean(self.nrmse[:max_h]))

    def rows(self):
        return [(self.variant, h + 1, float(self.rmse[h]), float(self.nrmse[h]), self.n_queries,
                 len(self.seeds), self.norm_const) for h in range(len(self.rmse))]


REPORT_HEADER = ("variant", "horizon", "rmse", "nrmse", "n_queries", "seed_count", "norm_const")


def report_csv(reports) -> str:
    lines = [",".join(REPORT_HEADER)]
    for rep in reports:
        for row in rep.rows():
            lines.append(",".join([row[0], str(row[1]), repr(row[2]), repr(row[3]), str(row[4]), str(row[5]),
                                   repr(row[6])]))
    return "\n".join(lines) + "\n"


def per_seed_csv(reports) -> str:
    lines = ["variant,seed,horizon,rmse,nrmse"]
    for rep in reports:
        for s, seed in enumerate(rep.seeds):
            for h in range(rep.per_seed_rmse.shape[1]):
                lines.append(f"{rep.variant},{seed},{h + 1},{rep.per_seed_rmse[s, h]!r},{rep.per_seed_nrmse[s, h]!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- confounder masking

def mask_confounders(cohort: Cohort, indices) -> Cohort:
    """Copy of ``cohort`` with covariate columns zeroed; sim_state (ground truth) untouched."""
    indices = list(indices)
    if any(i < 0 or i >= cohort.d_x for i in indices):
        raise IndexError(f"covariate index out of range for d_x={cohort.d_x}: {indices}")
    if not indices:
        return cohort
    X = cohort.X.copy()
    X[:, :, indices] = 0.0
    return replace(cohort, X=X)


# ---------------------------------------------------------------- experiment orchestration

def simulate_splits(gcfg, tau, seed, workers=1):
    """Train/val/test cohorts with disjoint unit ids drawn from one root seed."""
    sizes = (("train", gcfg.n_train), ("val", gcfg.n_val), ("test", gcfg.n_test))
    out, offset, y_scale = {}, 0, None
    for name, n in sizes:
        if gcfg.kind == "tumor":
            c = simulate_tumor_cohort(n, gcfg.max_len, gcfg.gamma, seed, gcfg.tumor, tau=tau,
                                      min_len=gcfg.min_len, unit_offset=offset, workers=workers)
        elif gcfg.kind == "ehr":
            c = simulate_ehr_cohort(gcfg.ehr, n, gcfg.max_len, seed, tau=tau, min_len=gcfg.min_len,
                                    unit_offset=offset, workers=workers, y_scale=y_scale)
            y_scale = c.y_scale
        else:
            raise ValueError(f"unknown generator kind {gcfg.kind!r}")
        c.meta["split"] = name
        out[name] = c
        offset += n
    return out


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant in ("full", ""):
        return base
    flags = tuple(f for f in variant.split("+") if f)
    bad = [f for f in flags if f not in ABLATION_FLAGS]
    if bad:
        raise ValueError(f"unknown ablation flag(s) {bad}; supported: {list(ABLATION_FLAGS)}")
    return replace(base, ablations=tuple(sorted(set(base.ablations) | set(flags))))


def fit_model(mcfg: ModelConfig, train: SeqData, val: SeqData, seed, naive=False):
    from .decoder import train_decoder
    from .encoder import pretrain_encoder

    if naive:
        mcfg = replace(mcfg, ablations=tuple(sorted(set(mcfg.ablations) | {"no_cpc", "no_infomax", "no_balancing"})))
    enc, enc_log = pretrain_encoder(train, val, mcfg, seed)
    model, dec_log = train_decoder(train, val, enc, mcfg, seed)
    return model, enc_log, dec_log


def evaluate_model(model, data: SeqData, queries: QuerySet, chunk=2048):
    """Unscaled predictions for ``queries``."""
    from .decoder import predict_batch

    return predict_batch(model, data, queries.units, queries.origins, queries.plans, chunk) * model.y_scale


@dataclass
class SeedResult:
    rmse: np.ndarray
    n_queries: int
    norm_const: float
    model_fingerprint: str = ""


def run_seed(cfg: ExperimentConfig, variant: str, seed: int, strategy="sliding", cohorts=None, queries=None,
             naive=False):
    mcfg = variant_config(cfg.model, variant)
    cohorts = cohorts or simulate_splits(cfg.generator, mcfg.tau, seed, cfg.run.workers)
    masked = mcfg.masked_covariates
    tr = build_seqdata(cohorts["train"], masked, y_scale=outcome_scale(cohorts["train"], mcfg.outcome_scaling))
    va = build_seqdata(cohorts["val"], masked, y_scale=tr.y_scale)
    te = build_seqdata(cohorts["test"], masked, y_scale=tr.y_scale)
    model, _, _ = fit_model(mcfg, tr, va, seed, naive=naive)
    q = queries if queries is not None else gen_queries(cohorts["test"], mcfg.tau, strategy, seed)
    pred = evaluate_model(model, te, q, cfg.run.eval_chunk)
    return SeedResult(rmse_by_horizon(pred, q), len(q), normalization_constant(cohorts["test"]))


def aggregate(variant, results, seeds, config_fp="") -> EvalReport:
    rm = np.stack([r.rmse for r in results])
    nr = np.stack([nrmse(r.rmse, r.norm_const) for r in results])
    return EvalReport(variant, rm.mean(axis=0), nr.mean(axis=0), results[0].n_queries,
                      float(np.mean([r.norm_const for r in results])), tuple(seeds), rm, nr, config_fp,
                      tuple(r.model_fingerprint for r in results))


def run_ablation(cfg: ExperimentConfig, variants, strategy="sliding", progress=None):
    """Train/evaluate the base model and each variant on shared per-seed data and initialization."""
    variants = [v for v in variants if v not in ("full", "")]
    for v in variants:
        variant_config(cfg.model, v)   # validate early
    names = ["full"] + list(variants)
    results = {v: [] for v in names}
    for seed in cfg.run.seeds:
        cohorts = simulate_splits(cfg.generator, cfg.model.tau, seed, cfg.run.workers)
        q = gen_queries(cohorts["test"], cfg.model.tau, strategy, seed)
        for v in names:
            res = run_seed(cfg, v, seed, strategy, cohorts, q)
            results[v].append(res)
            if progress:
                progress(v, seed, res)
    return {v: aggregate(v, results[v], cfg.run.seeds) for v in names}


def run_naive_baseline(cfg: ExperimentConfig, strategy="sliding"):
    """Factual GRU regressor without contrastive pretraining or balancing (sanity lower bar)."""
    res = []
    for seed in cfg.run.seeds:
        cohorts = simulate_splits(cfg.generator, cfg.model.tau, seed, cfg.run.workers)
        res.append(run_seed(cfg, "full", seed, strategy, cohorts, naive=True))
    return aggregate("naive", res, cfg.run.seeds)


# ---------------------------------------------------------------- balance probe

def history_features(data: SeqData, units, origins, lags=3):
    """Raw history features: the last ``lags`` components up to context index t + 1, flattened."""
    units, origins = np.asarray(units), np.asarray(origins)
    rows = []
    for k in range(lags):
        idx = np.maximum(origins + 1 - k, 0)
        rows.append(data.U[units, idx])
    return np.concatenate(rows, axis=1)


def fit_probe(train_x, train_w, test_x, test_w, K, steps=400, lr=0.05, seed=0):
    """Freshly fit multinomial logistic probe on standardized features.

    Returns (held-out accuracy, held-out mean log-likelihood in nats).
    """
    from . import layers as L
    from .decoder import treatment_ce
    from .diffcore import OptimizerState, Value, adamw_step, backward

    mu, sd = train_x.mean(axis=0), train_x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xtr, xte = (train_x - mu) / sd, (test_x - mu) / sd
    store = {}
    L.init_affine(store, substream(seed, "probe"), "probe", xtr.shape[1], K)
    state = OptimizerState()
    for _ in range(steps):
        P = L.as_leaves(store)
        loss = treatment_ce(L.affine(Value(xtr), P, "probe"), train_w)
        adamw_step(store, L.gradients(P, backward(loss)), state, lr)
    logits = xte @ store["probe.W"] + store["probe.b"]
    test_w = np.asarray(test_w)
    loglik = -float(treatment_ce(Value(logits), test_w).data)
    return float(np.mean(np.argmax(logits, axis=1) == test_w)), loglik


def probe_accuracy(train_x, train_w, test_x, test_w, K, steps=400, lr=0.05, seed=0):
    return fit_probe(train_x, train_w, test_x, test_w, K, steps, lr, seed)[0]


def marginal_entropy(w, K):
    """-sum_k p(k) log p(k) of the empirical treatment distribution."""
    p = np.bincount(np.asarray(w), minlength=K) / len(w)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def majority_rate(train_w, test_w, K):
    """Held-out accuracy of always predicting the training majority class."""
    top = int(np.argmax(np.bincount(np.asarray(train_w), minlength=K)))
    return float(np.mean(np.asarray(test_w) == top))
