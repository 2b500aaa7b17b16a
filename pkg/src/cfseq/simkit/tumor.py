"""Discrete-time PK-PD tumor-growth simulator with volume-confounded treatment."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..rng import substream
from .cohort import Cohort

D_MAX = 13.0  # cm; also the diameter used for the volume ceiling
STAGES = ("I", "II", "IIIA", "IIIB", "IV")


def volume_from_diameter(d):
    return math.pi / 6.0 * d ** 3


def diameter_from_volume(v):
    return 2.0 * (3.0 * v / (4.0 * math.pi)) ** (1.0 / 3.0)


@dataclass
class TumorConfig:
    """Priors and dosing for the tumor simulator.

    Normal priors are truncated to positive values by rejection. The
    defaults follow the widely used open replications of the lung-cancer
    PK-PD model.
    """

    growth_mean: float = 7.0e-5
    growth_sd: float = 7.23e-3
    k_cap_mean: float = volume_from_diameter(30.0)
    k_cap_sd: float = 0.0
    chemo_mean: float = 0.028
    chemo_sd: float = 7.0e-4
    radio_mean: float = 0.0398
    radio_sd: float = 0.168
    alpha_beta_ratio: float = 10.0
    type_boost: float = 1.1
    noise_sd: float = 0.01
    chemo_dose: float = 5.0
    radio_dose: float = 2.0
    chemo_decay: float = 0.5
    window: int = 15
    v_min: float = 1e-3
    v_max: float = volume_from_diameter(D_MAX)
    # (mu, sd, lower, upper) of the initial diameter (cm) per stage
    stage_diameter: tuple = ((1.72, 4.70, 0.3, 5.0), (1.96, 1.63, 0.3, 13.0), (1.91, 9.40, 0.3, 13.0),
                             (2.76, 6.87, 0.3, 13.0), (3.86, 8.82, 0.3, 13.0))
    stage_weights: tuple = (1432, 128, 1306, 7248, 12840)
    max_retries: int = 1000


@dataclass
class PKPDParams:
    growth: float      # Lambda
    k_cap: float       # K
    chemo: float       # kappa_c
    radio: float       # kappa_rd
    radio_sq: float    # upsilon
    noise_sd: float

    def __post_init__(self):
        if self.k_cap <= 0:
            raise ValueError("k_cap must be positive")
        if min(self.chemo, self.radio, self.radio_sq) < 0:
            raise ValueError("sensitivities must be nonnegative")


def _positive_normal(rng, mean, sd, retries, name):
    if sd == 0:
        if mean <= 0:
            raise ValueError(f"degenerate prior for {name} has nonpositive mean {mean}")
        return float(mean)
    for _ in range(retries):
        x = rng.normal(mean, sd)
        if x > 0:
            return float(x)
    raise RuntimeError(f"prior for {name} produced no positive draw in {retries} tries")


def _truncated_normal(rng, mu, sd, lo, hi, retries):
    for _ in range(retries):
        x = rng.normal(mu, sd)
        if lo <= x <= hi:
            return float(x)
    raise RuntimeError("initial-diameter prior produced no in-range draw")


def sample_pkpd_patient(cfg: TumorConfig, rng):
    """Draw one patient's parameters and static covariates.

    Returns ``(params, static)`` with ``static = {"ptype", "stage", "v_init"}``;
    patient type 0 is baseline, type 1 is radio-sensitive and type 2 is
    chemo-sensitive (sensitivity scaled by ``type_boost``).
    """
    r = cfg.max_retries
    growth = _positive_normal(rng, cfg.growth_mean, cfg.growth_sd, r, "growth")
    k_cap = _positive_normal(rng, cfg.k_cap_mean, cfg.k_cap_sd, r, "k_cap")
    chemo = _positive_normal(rng, cfg.chemo_mean, cfg.chemo_sd, r, "chemo")
    radio = _positive_normal(rng, cfg.radio_mean, cfg.radio_sd, r, "radio")
    ptype = int(rng.integers(0, 3))
    if ptype == 1:
        radio *= cfg.type_boost
    elif ptype == 2:
        chemo *= cfg.type_boost
    w = np.asarray(cfg.stage_weights, dtype=np.float64)
    stage = int(rng.choice(len(w), p=w / w.sum()))
    mu, sd, lo, hi = cfg.stage_diameter[stage]
    d0 = _truncated_normal(rng, mu, sd, lo, hi, r)
    v_init = min(max(volume_from_diameter(d0), cfg.v_min), cfg.v_max)
    params = PKPDParams(growth, k_cap, chemo, radio, radio / cfg.alpha_beta_ratio, cfg.noise_sd)
    return params, {"ptype": ptype, "stage": stage, "v_init": v_init}


def step_tumor(v_prev, chemo_conc, radiation_dose, noise, params: PKPDParams,
               v_min=1e-3, v_max=volume_from_diameter(D_MAX)):
    if not v_prev > 0:
        raise ValueError(f"v_prev must be positive, got {v_prev}")
    factor = (1.0 + params.growth * math.log(params.k_cap / v_prev) - params.chemo * chemo_conc
              - (params.radio * radiation_dose + params.radio_sq * radiation_dose * radiation_dose) + noise)
    return min(max(factor * v_prev, v_min), v_max)


def treatment_probability(diameter_window, gamma):
    if len(diameter_window) == 0:
        raise ValueError("diameter window is empty")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    d_bar = math.fsum(diameter_window) / len(diameter_window)
    pi = gamma / D_MAX * (d_bar - D_MAX / 2.0)
    return 1.0 / (1.0 + math.exp(-pi))


def assign_treatment_tumor(diameter_window, gamma, rng):
    """Return ``(chemo, radio, p)``; both flags are Bernoulli(p) independently."""
    p = treatment_probability(diameter_window, gamma)
    u = rng.random(2)
    return int(u[0] < p), int(u[1] < p), p


def _roll(params, v_start, c_start, w_codes, noise, cfg, t_from):
    """Forced-treatment rollout from state (v, C) at ``t_from - 1``; returns volumes."""
    v, c = v_start, c_start
    out = []
    for t, code in zip(range(t_from, t_from + len(w_codes)), w_codes):
        c = c * cfg.chemo_decay + cfg.chemo_dose * (code & 1)
        rd = cfg.radio_dose * ((code >> 1) & 1)
        v = step_tumor(v, c, rd, noise[t], params, cfg.v_min, cfg.v_max)
        out.append(v)
    return out


def _simulate_patient(uid, seed, gamma, max_len, min_len, cfg):
    rng = substream(seed, "sim-tumor", uid)
    params, static = sample_pkpd_patient(cfg, rng)
    noise = rng.normal(0.0, cfg.noise_sd, size=max_len)
    active_len = int(rng.integers(min_len, max_len + 1))
    v, c = static["v_init"], 0.0
    diam = [diameter_from_volume(v)]
    vols_prev, W, Y, P = [], [], [], []
    for t in range(max_len):
        chemo, radio, p = assign_treatment_tumor(diam[-cfg.window:], gamma, rng)
        code = chemo + 2 * radio
        vols_prev.append(v)
        c = c * cfg.chemo_decay + cfg.chemo_dose * chemo
        v = step_tumor(v, c, cfg.radio_dose * radio, noise[t], params, cfg.v_min, cfg.v_max)
        diam.append(diameter_from_volume(v))
        W.append(code)
        Y.append(v)
        P.append(p)
    return dict(uid=uid, params=params, static=static, noise=noise, active_len=active_len,
                W=W, Y=Y, P=P, v_prev=vols_prev)


def _simulate_chunk(args):
    uids, seed, gamma, max_len, min_len, cfg = args
    return [_simulate_patient(u, seed, gamma, max_len, min_len, cfg) for u in uids]


def simulate_tumor_cohort(n, max_len, gamma, seed, cfg: TumorConfig | None = None, tau=10,
                          min_len=None, unit_offset=0, workers=1) -> Cohort:
    """Simulate ``n`` patients with ids ``unit_offset .. unit_offset + n - 1``.

    Each patient draws from its own substream, so the result does not depend
    on ``workers``.
    """
    cfg = cfg or TumorConfig()
    if n < 1:
        raise ValueError("n must be >= 1")
    if max_len < tau + 1:
        raise ValueError(f"max_len={max_len} must be >= tau + 1 = {tau + 1}")
    min_len = min(tau + 5, max_len) if min_len is None else min_len
    uids = list(range(unit_offset, unit_offset + n))
    if workers > 1 and n > 1:
        chunks = [uids[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_chunk, [(c, seed, gamma, max_len, min_len, cfg) for c in chunks]))
        by_id = {r["uid"]: r for part in parts for r in part}
        recs = [by_id[u] for u in uids]
    else:
        recs = _simulate_chunk((uids, seed, gamma, max_len, min_len, cfg))

    ptype = np.array([r["static"]["ptype"] for r in recs])
    stage = np.array([r["static"]["stage"] for r in recs], dtype=np.float64)
    onehot = np.eye(3)[ptype]
    V = np.concatenate([onehot, stage[:, None] / (len(STAGES) - 1)], axis=1)
    v_prev = np.array([r["v_prev"] for r in recs])
    X = np.concatenate([v_prev[:, :, None], np.repeat(onehot[:, None, :], max_len, axis=1)], axis=2)
    P = np.array([r["P"] for r in recs])
    if P.min() <= 0.01 or P.max() >= 0.99:
        warnings.warn(f"overlap violated: assignment probability range [{P.min():.4f}, {P.max():.4f}]",
                      RuntimeWarning)
    unit_state = {
        "growth": np.array([r["params"].growth for r in recs]),
        "k_cap": np.array([r["params"].k_cap for r in recs]),
        "chemo": np.array([r["params"].chemo for r in recs]),
        "radio": np.array([r["params"].radio for r in recs]),
        "radio_sq": np.array([r["params"].radio_sq for r in recs]),
        "noise_sd": np.array([r["params"].noise_sd for r in recs]),
        "v_init": np.array([r["static"]["v_init"] for r in recs]),
        "ptype": ptype.astype(np.float64),
        "stage": stage,
    }
    step_state = {"noise": np.array([r["noise"] for r in recs]), "p_treat": P}
    meta = {"seed": int(seed), "gamma": float(gamma), "tau": int(tau),
            "p_min": float(P.min()), "p_max": float(P.max()),
            "tumor_config": {k: (list(map(list, v)) if k == "stage_diameter" else
                                 (list(v) if isinstance(v, tuple) else v))
                             for k, v in cfg.__dict__.items()}}
    return Cohort("tumor", np.array(uids, dtype=np.int64), V, X,
                  np.array([r["W"] for r in recs], dtype=np.int64), np.array([r["Y"] for r in recs]),
                  np.array([r["active_len"] for r in recs], dtype=np.int64), K=4, y_scale=cfg.v_max,
                  x_scale=np.array([cfg.v_max, 1.0, 1.0, 1.0]), meta=meta,
                  unit_state=unit_state, step_state=step_state)


def _config_from_meta(meta) -> TumorConfig:
    raw = dict(meta.get("tumor_config", {}))
    if "stage_diameter" in raw:
        raw["stage_diameter"] = tuple(tuple(s) for s in raw["stage_diameter"])
    if "stage_weights" in raw:
        raw["stage_weights"] = tuple(raw["stage_weights"])
    return TumorConfig(**raw)


def _unit_params(u):
    return PKPDParams(float(u["growth"]), float(u["k_cap"]), float(u["chemo"]), float(u["radio"]),
                      float(u["radio_sq"]), float(u["noise_sd"]))


def _chemo_history(W, cfg):
    """Concentration after each factual step."""
    c, out = 0.0, []
    for code in W:
        c = c * cfg.chemo_decay + cfg.chemo_dose * (int(code) & 1)
        out.append(c)
    return out


def tumor_counterfactual(traj, t, plan):
    """Potential volumes ``Y_{t+1..t+tau}`` under ``plan`` with the recorded noise."""
    st = traj.sim_state
    cfg = _config_from_meta(st["meta"])
    u = st["unit"]
    c = _chemo_history(traj.W[: t + 1], cfg)[-1] if t >= 0 else 0.0
    v = float(traj.Y[t]) if t >= 0 else float(u["v_init"])
    return _roll(_unit_params(u), v, c, [int(w) for w in plan], st["step"]["noise"], cfg, t + 1)


def tumor_counterfactual_batch(cohort, units, origins, plans):
    """Vector of rollouts sharing per-unit state; same arithmetic as :func:`tumor_counterfactual`."""
    cfg = _config_from_meta(cohort.meta)
    out = np.empty(np.shape(plans))
    cache = {}
    for r, (i, t) in enumerate(zip(units, origins)):
        i, t = int(i), int(t)
        if i not in cache:
            u = {k: v[i] for k, v in cohort.unit_state.items()}
            cache[i] = (_unit_params(u), _chemo_history(cohort.W[i], cfg), cohort.step_state["noise"][i].tolist(),
                        cohort.Y[i].tolist())
        params, chemo, noise, Y = cache[i]
        out[r] = _roll(params, Y[t], chemo[t], plans[r].tolist(), noise, cfg, t + 1)
    return out
