"""Experiment recipes shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from .config import ExperimentConfig, GeneratorConfig, ModelConfig, RunConfig
from .data import build_seqdata, outcome_scale
from .decoder import representations, sample_origins, train_decoder
from .encoder import pretrain_encoder
from .evalkit import (
    fit_probe, history_features, majority_rate, marginal_entropy, nrmse, probe_accuracy, run_ablation, run_seed, simulate_splits,
)
from .mibench import (
    club_estimate_gaussian, fit_gaussian_conditional, fit_infonce_critic, gaussian_mi, infonce_estimate,
)
from .rng import substream

# cohort sizes per profile; "full" is the desk-scale reproduction
PROFILES = {
    "smoke": dict(n_train=40, n_val=10, n_test=20),
    "reduced": dict(n_train=200, n_val=50, n_test=100),
    "full": dict(n_train=1000, n_val=100, n_test=500),
}


def tumor_config(profile="reduced", gamma=1.0, seeds=(0, 1, 2, 3, 4), **model) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    g = GeneratorConfig(kind="tumor", gamma=gamma, max_len=60, **PROFILES[profile])
    return ExperimentConfig(g, replace(ModelConfig(), **model), RunConfig(seeds=tuple(seeds)))


def ehr_config(profile="reduced", seeds=(0, 1, 2, 3, 4), **model) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    g = GeneratorConfig(kind="ehr", max_len=40, **PROFILES[profile])
    return ExperimentConfig(g, replace(ModelConfig(), **model), RunConfig(seeds=tuple(seeds)))


# ---------------------------------------------------------------- horizon curve

def horizon_trend(nrmse_curve) -> float:
    """Spearman rank correlation between horizon and NRMSE."""
    curve = np.asarray(nrmse_curve, dtype=float)
    return float(spearmanr(np.arange(1, len(curve) + 1), curve).statistic)


def horizon_benchmark(cfg: ExperimentConfig, variants=(), progress=None):
    """Base model (plus optional ablation variants) over the configured seeds; returns {variant: report}."""
    return run_ablation(cfg, list(variants), progress=progress)


# ---------------------------------------------------------------- balancing probe

@dataclass
class ProbeResult:
    acc_phi: float
    acc_raw: float
    majority: float
    loglik_phi: float     # held-out mean log-likelihood of the probe on Phi
    entropy: float        # marginal entropy of the held-out treatments


def balance_probe(cfg: ExperimentConfig, seed=0) -> ProbeResult:
    """Predict the next treatment W_{t+1} from frozen Phi_t and from raw history, on held-out units."""
    m = cfg.model
    cohorts = simulate_splits(cfg.generator, m.tau, seed, cfg.run.workers)
    tr = build_seqdata(cohorts["train"], m.masked_covariates, outcome_scale(cohorts["train"], m.outcome_scaling))
    va = build_seqdata(cohorts["val"], m.masked_covariates, y_scale=tr.y_scale)
    te = build_seqdata(cohorts["test"], m.masked_covariates, y_scale=tr.y_scale)
    enc, _ = pretrain_encoder(tr, va, m, seed)
    model, _ = train_decoder(tr, va, enc, m, seed)

    def split(data, name):
        units, origins = sample_origins(data.active_len, m.tau, 1.0, substream(seed, f"probe-origins-{name}"))
        return units, origins, data.W[units, origins + 1]

    fit_u, fit_o, fit_w = split(tr, "train")
    ho_u, ho_o, ho_w = split(te, "test")
    acc_phi, loglik_phi = fit_probe(representations(model, tr, fit_u, fit_o), fit_w,
                                    representations(model, te, ho_u, ho_o), ho_w, tr.K, seed=seed)
    acc_raw = probe_accuracy(history_features(tr, fit_u, fit_o), fit_w,
                             history_features(te, ho_u, ho_o), ho_w, tr.K, seed=seed)
    return ProbeResult(acc_phi, acc_raw, majority_rate(fit_w, ho_w, tr.K), loglik_phi,
                       marginal_entropy(ho_w, tr.K))


# ---------------------------------------------------------------- MI bounds

@dataclass
class MIBoundResult:
    true_mi: float
    infonce: float
    club: float
    log_batch: float


def mi_bounds(rho=0.8, dim=1, batch=128, seed=0) -> MIBoundResult:
    critic = fit_infonce_critic(rho, dim, batch=batch, seed=seed)
    q = fit_gaussian_conditional(rho, dim, seed=seed)
    return MIBoundResult(gaussian_mi(rho, dim), infonce_estimate(critic, rho, dim, batch=batch, seed=seed + 1),
                         club_estimate_gaussian(q, rho, dim, seed=seed + 1), float(np.log(batch)))


# ---------------------------------------------------------------- falsifiability

def masking_experiment(cfg: ExperimentConfig, progress=None):
    """Paired per-seed mean NRMSE without and with the assignment-driving covariates masked."""
    cols = tuple(cfg.generator.ehr.assign_columns)
    masked_model = replace(cfg.model, masked_covariates=cols)
    base, masked = [], []
    for seed in cfg.run.seeds:
        cohorts = simulate_splits(cfg.generator, cfg.model.tau, seed, cfg.run.workers)
        a = run_seed(cfg, "full", seed, cohorts=cohorts)
        b = run_seed(replace(cfg, model=masked_model), "full", seed, cohorts=cohorts)
        base.append(float(np.mean(nrmse(a.rmse, a.norm_const))))
        masked.append(float(np.mean(nrmse(b.rmse, b.norm_const))))
        if progress:
            progress(seed, base[-1], masked[-1])
    return np.array(base), np.array(masked)
