"""Acceptance criteria 1-9, one test each, each printing a PASS/FAIL verdict line.

The training-based criteria (4, 5, 6, 8) use the ``reduced`` profile (n = 200)
by default. Set ``CFSEQ_ACCEPTANCE_PROFILE=full`` for the desk-scale run
(n = 1000 train / 500 test).
"""
import math
import os
import time

import numpy as np
import pytest

from cfseq import diffcore as dc, layers as L
from cfseq.config import ModelConfig
from cfseq.decoder import (
    REP_PREFIXES, club_estimate, club_from_logprobs, draw_permutation, draw_step_permutations, init_decoder,
    outcome_nll, representation_objective, treatment_ce, treatment_logits,
)
from cfseq.diffcore import Value, grad_check, power_iteration
from cfseq.encoder import (
    BatchView, encode_context, encode_local, infomax_loss, infonce_cpc_loss, infonce_from_scores, init_encoder,
)
from cfseq.experiments import (
    balance_probe, ehr_config, horizon_trend, masking_experiment, mi_bounds, horizon_benchmark, tumor_config,
)
from cfseq.expcli.cli import main as cli_main
from cfseq.simkit import (
    PKPDParams, ground_truth_counterfactual, matern32, rff_function, sample_gp_matern, simulate_tumor_cohort,
    step_tumor,
)

from conftest import random_seqdata

PROFILE = os.environ.get("CFSEQ_ACCEPTANCE_PROFILE", "reduced")
BUDGET_4 = {"reduced": 15 * 60, "full": 60 * 60}


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        line = f"ACCEPTANCE criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} | {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


# ---------------------------------------------------------------- 1. gradient correctness

UNARY = {"exp": dc.exp, "log": dc.log, "sigmoid": dc.sigmoid, "tanh": dc.tanh, "selu": dc.selu,
         "softplus": dc.softplus}


def _primitive_errors(rng):
    errs = {}
    for name, op in UNARY.items():
        x = rng.normal(size=(3, 4))
        x = np.abs(x) + 0.2 if name == "log" else x + 0.05 * np.sign(x)
        w = rng.normal(size=x.shape)
        errs[name] = grad_check(lambda a: dc.sum_(dc.mul(op(a), w)), x)
    pt = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)), "c": rng.normal(size=(3, 1))}
    idx, rows = rng.integers(0, 2, size=3), rng.integers(0, 2, size=4)

    def structural(p):
        m = dc.matmul(p["a"], p["b"])
        m = dc.sub(dc.add(m, p["c"]), dc.mul(m, p["c"]))
        cat = dc.concat([m, dc.broadcast(p["c"], (3, 2))], axis=1)
        flat = dc.reshape(p["a"], (12,))
        part = dc.slice_(cat, (slice(None), slice(1, 3)))
        # stop_gradient is excluded: its derivative is zero by definition, not by finite differences
        terms = [dc.mean(dc.log_sum_exp(cat, axis=1)), dc.sum_(dc.one_hot_gather(part, idx)),
                 dc.mul(dc.dot(flat, flat), 0.1), dc.sum_(dc.mean(dc.take(dc.transpose(p["b"]), rows), axis=0))]
        out = terms[0]
        for t in terms[1:]:
            out = dc.add(out, t)
        return out

    errs["structural"] = grad_check(structural, pt)
    v, g = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=3)
    wv = rng.normal(size=(3, 4))
    errs["weight_norm"] = grad_check(lambda p: dc.sum_(dc.mul(dc.weight_norm_apply(p["v"], p["g"]), wv)),
                                     {"v": v, "g": g})
    W = rng.normal(size=(3, 4))
    u, vv, _ = power_iteration(W, rng.normal(size=3), 1)
    errs["spectral_norm"] = grad_check(lambda a: dc.sum_(dc.mul(dc.spectral_normalize(a, u, vv), wv)), W)
    return errs


def _selu_inputs_clear(view, store):
    P = L.as_leaves(store, track=False)
    u = view.U[:, : view.t + view.tau + 1]
    pre = L.wn_affine(Value(u.reshape(-1, u.shape[-1])), P, "enc.local.0").data
    ctx = encode_context(encode_local(u, P), view.mask[:, : u.shape[1]], P)
    eta = L.affine(ctx[view.t0 - 1], P, "enc.eta.0").data
    return min(np.abs(pre).min(), np.abs(eta).min()) > 1e-3


def _loss_errors(rng, seed):
    errs = {}
    n, K = int(rng.integers(2, 6)), 3
    yh, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    errs["L_Y"] = grad_check(lambda a: outcome_nll(a, y), yh)
    w = rng.integers(0, K, size=n)
    errs["L_W"] = grad_check(lambda a: treatment_ce(a, w), rng.normal(size=(n, K)))

    store = {}
    L.init_sn_affine(store, rng, "dec.w.0", 2, 3)
    L.init_sn_affine(store, rng, "dec.w.1", 3, K)
    vec = {k: power_iteration(store[f"{k}.W"], L.init_sn_state(rng, store[f"{k}.W"].shape[0]), 1)[:2]
           for k in ("dec.w.0", "dec.w.1")}
    fixed = L.as_leaves(store, track=False)
    phi = rng.normal(size=(n, 2))
    if np.abs(phi @ store["dec.w.0.W"].T).min() > 1e-3:
        perm = draw_permutation(n, rng)
        errs["I_CLUB"] = grad_check(lambda a: club_estimate(a, w, fixed, vec, perm), phi)
        errs["L_W(theta_W)"] = grad_check(lambda p: treatment_ce(treatment_logits(Value(phi), p, vec), w), store)

    data = random_seqdata(3, 5, d_v=1, d_x=1, K=2, seed=seed % 997, min_len=4)
    ep = init_encoder(data.d_u, 2, 2, 2, rng)
    view = BatchView(data.U, data.mask(), 2, 2, int(rng.integers(1, 3)))
    if _selu_inputs_clear(view, ep.store):
        probe = set(rng.choice(sorted(ep.store), size=3, replace=False))
        efix = L.as_leaves({k: v for k, v in ep.store.items() if k not in probe}, track=False)
        pt = {k: ep.store[k] for k in probe}
        errs["L_CPC"] = grad_check(lambda p: infonce_cpc_loss(view, {**efix, **p}), pt)
        errs["L_InfoMax"] = grad_check(lambda p: infomax_loss(view, {**efix, **p}), pt)
    return errs


def _ldec_error(rng, seed):
    from test_decoder import _selu_recorder

    data = random_seqdata(3, 6, d_x=1, K=2, seed=seed % 991)
    cfg = ModelConfig(tau=2, z_dim=2, c_dim=2, r_dim=2, fc_hidden=2, plan_hidden=2)
    enc = init_encoder(data.d_u, 2, 2, 2, rng)
    model = init_decoder(enc, data.K, data.V.shape[1], cfg, 1.0, rng)
    units, origins = np.arange(3), rng.integers(0, 4, size=3)
    sn = model.sn_vectors()
    perms = draw_step_permutations(3, 2, rng)
    params = model.all_params()
    probe = {str(rng.choice(sorted(model.names(REP_PREFIXES))))}
    fixed = L.as_leaves({k: v for k, v in params.items() if k not in probe}, track=False)

    def f(p):
        return representation_objective(model, {**fixed, **p}, data, units, origins, cfg, sn, perms)[0]

    with _selu_recorder() as margin:
        f(L.as_leaves({k: params[k] for k in probe}, track=False))
    if margin[0] <= 1e-3:
        return None
    return grad_check(f, {k: params[k] for k in probe})


def test_criterion_1_gradient_correctness(verdict):
    start = time.perf_counter()
    worst, counts = {}, {}
    seed = 0
    while min(counts.values(), default=0) < 100 or len(counts) < 15:
        rng = np.random.default_rng(seed)
        errs = {**_primitive_errors(rng), **_loss_errors(rng, seed)}
        e = _ldec_error(rng, seed)
        if e is not None:
            errs["L_dec"] = e
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
            counts[k] = counts.get(k, 0) + 1
        seed += 1
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v >= (1e-4 if k == "L_dec" else 1e-5)}
    ok = not bad and min(counts.values()) >= 100 and elapsed < 60
    verdict(1, "gradient correctness", ok,
            f"{len(worst)} checks, >= {min(counts.values())} instances each, worst L_dec {worst['L_dec']:.1e}, "
            f"worst other {max(v for k, v in worst.items() if k != 'L_dec'):.1e}, failing {sorted(bad)}, "
            f"{elapsed:.1f} s")


# ---------------------------------------------------------------- 2. analytic identities

def test_criterion_2_analytic_identities(verdict):
    devs = {}
    for n in (2, 4, 256):
        devs[f"infonce_n{n}"] = abs(float(infonce_from_scores(Value(np.zeros((n, n)))).data) - math.log(n))
    rng = np.random.default_rng(0)
    row = rng.normal(size=4)
    logq = dc.log_softmax(Value(np.tile(row, (32, 1))), axis=1)
    w = rng.integers(0, 4, size=32)
    devs["club_phi_independent"] = abs(float(club_from_logprobs(logq, w, w[draw_permutation(32, rng)]).data))
    for K in (2, 4, 7):
        devs[f"ce_uniform_K{K}"] = abs(float(treatment_ce(Value(np.zeros((5, K))), np.arange(5) % K).data)
                                       - math.log(K))
    worst = max(devs.values())
    verdict(2, "analytic loss identities", worst <= 1e-9, f"max deviation {worst:.1e} over {len(devs)} identities")


# ---------------------------------------------------------------- 3. simulator fidelity

def test_criterion_3_simulator_fidelity(verdict):
    start = time.perf_counter()
    c = simulate_tumor_cohort(1000, 60, 0.0, seed=1, tau=10)
    chemo, radio = (c.W & 1).mean(), ((c.W >> 1) & 1).mean()
    rate_ok = abs(chemo - 0.5) <= 0.02 and abs(radio - 0.5) <= 0.02
    p = PKPDParams(growth=0.05, k_cap=100.0, chemo=0.02, radio=0.0, radio_sq=0.0, noise_sd=0.0)
    fixed_ok = step_tumor(100.0, 0.0, 0.0, 0.0, p, v_max=1e9) == 100.0
    small = c.subset(np.arange(100))
    factual_ok = all(
        ground_truth_counterfactual(small[i], 4, small.W[i, 5:15]) == list(small.Y[i, 5:15])
        for i in range(small.n))
    draws = sample_gp_matern(np.array([0.0, 1.5]), 2.0, 1.3, np.random.default_rng(0), n_draws=5000)
    emp = np.cov(draws.T)
    matern_ok = (abs(emp[0, 1] - matern32(1.5, 2.0, 1.3)) < 0.05 * matern32(1.5, 2.0, 1.3)
                 and abs(emp[0, 0] - 1.3) < 0.05 * 1.3)
    f = rff_function(2, 100_000, 1.5, np.random.default_rng(0))
    x, y = np.array([0.3, -0.2]), np.array([1.1, 0.4])
    exact = math.exp(-np.sum((x - y) ** 2) / (2 * 1.5 ** 2))
    rff_ok = abs(float((f.features(x) @ f.features(y).T)[0, 0]) - exact) < 0.02 * exact
    elapsed = time.perf_counter() - start
    ok = rate_ok and fixed_ok and factual_ok and matern_ok and rff_ok and elapsed < 120
    verdict(3, "simulator fidelity", ok,
            f"treated rates {chemo:.4f}/{radio:.4f}, fixed point {fixed_ok}, factual replay {factual_ok}, "
            f"Matern MC {matern_ok}, RFF MC {rff_ok}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 4/5. horizon benchmark and ablations

@pytest.fixture(scope="module")
def horizon_run():
    cfg = tumor_config(PROFILE, gamma=1.0)
    spent = {}
    clock = [time.perf_counter()]

    def progress(variant, seed, res):
        now = time.perf_counter()
        spent[variant] = spent.get(variant, 0.0) + now - clock[0]
        clock[0] = now
        print(f"[horizon] {variant} seed {seed}: mean NRMSE {np.mean(res.rmse / res.norm_const):.3f}", flush=True)

    reports = horizon_benchmark(cfg, ["no_infomax", "no_balancing"], progress=progress)
    return reports, spent


def test_criterion_4_horizon_benchmark(verdict, horizon_run):
    reports, spent = horizon_run
    full = reports["full"]
    tau1, tau10 = float(full.nrmse[0]), float(full.nrmse[9])
    rho = horizon_trend(full.nrmse)
    elapsed = spent["full"]
    ok = 0.70 <= tau1 <= 1.00 and 1.05 <= tau10 <= 1.50 and rho > 0.9 and elapsed <= BUDGET_4[PROFILE]
    sd = full.nrmse_sd
    verdict(4, f"horizon benchmark, {PROFILE} profile", ok,
            f"NRMSE tau=1 {tau1:.3f} +/- {sd[0]:.3f} (band 0.70-1.00), tau=10 {tau10:.3f} +/- {sd[9]:.3f} "
            f"(band 1.05-1.50), Spearman {rho:.3f}, {elapsed / 60:.1f} min for {len(full.seeds)} seeds")


def test_criterion_5_ablation_ordering(verdict, horizon_run):
    reports, _ = horizon_run
    full, no_im, no_bal = (reports[k].mean_nrmse() for k in ("full", "no_infomax", "no_balancing"))
    ok = full <= no_im - 0.01 and full <= no_bal + 0.02
    verdict(5, "ablation ordering", ok,
            f"mean NRMSE full {full:.3f}, w/o InfoMax {no_im:.3f} (need >= {full + 0.01:.3f}), "
            f"w/o balancing {no_bal:.3f} (need >= {full - 0.02:.3f})")


# ---------------------------------------------------------------- 6. balancing equilibrium

def test_criterion_6_balancing_probe(verdict):
    r = balance_probe(tumor_config(PROFILE, gamma=3.0, seeds=(0,)), seed=0)
    ok = abs(r.acc_phi - r.majority) <= 0.05 and r.acc_raw >= r.majority + 0.10
    verdict(6, "balancing equilibrium", ok,
            f"majority {r.majority:.3f}, probe on Phi {r.acc_phi:.3f} (need within 0.05), "
            f"probe on raw history {r.acc_raw:.3f} (need >= {r.majority + 0.10:.3f})")


# ---------------------------------------------------------------- 7. MI bound direction

def test_criterion_7_mi_bounds(verdict):
    parts, ok = [], True
    for rho, dim in ((0.5, 1), (0.8, 1), (0.9, 2)):
        r = mi_bounds(rho, dim)
        ok &= r.infonce <= r.true_mi + 0.05 and r.infonce <= r.log_batch and r.club >= r.true_mi - 0.05
        parts.append(f"rho={rho} dim={dim}: MI {r.true_mi:.3f}, InfoNCE {r.infonce:.3f}, CLUB {r.club:.3f}")
    verdict(7, "MI bound direction", ok, "; ".join(parts))


# ---------------------------------------------------------------- 8. falsifiability

def test_criterion_8_confounder_masking(verdict):
    base, masked = masking_experiment(ehr_config(PROFILE))
    ok = masked.mean() > base.mean()
    verdict(8, "falsifiability direction", ok,
            f"mean NRMSE unmasked {base.mean():.4f}, masked {masked.mean():.4f}, "
            f"paired diffs {np.round(masked - base, 4).tolist()}")


# ---------------------------------------------------------------- 9. determinism

CONFIG_9 = """\
[generator]
n_train = 24
n_val = 8
n_test = 8
max_len = 18

[model]
z_dim = 4
c_dim = 4
r_dim = 4
fc_hidden = 4
plan_hidden = 2
tau = 3
enc_max_epochs = 2
dec_max_epochs = 2
enc_batch_size = 12
dec_batch_size = 12

[run]
seeds = [0, 1]
workers = 4
"""


def _all_stages(root, monkeypatch, workers):
    monkeypatch.setenv("CFSEQ_WORKERS", workers)
    root.mkdir()
    cfg = root / "cfg.toml"
    cfg.write_text(CONFIG_9)
    steps = [
        ["simulate", "--config", cfg, "--seed", 21, "--out", root / "data"],
        ["pretrain", "--config", cfg, "--data", root / "data", "--out", root / "enc"],
        ["train", "--config", cfg, "--data", root / "data", "--encoder", root / "enc/encoder.ckpt",
         "--out", root / "model"],
        *[["evaluate", "--config", cfg, "--data", root / "data", "--model", root / "model/model.ckpt",
           "--strategy", s, "--out", root / "eval"] for s in ("sliding", "random", "factual")],
        ["ablate", "--config", cfg, "--variants", "no_cpc,cdc_loss", "--out", root / "ablate"],
        ["report", "--in", root / "eval", "--out", root / "eval/plot.svg"],
    ]
    for s in steps:
        assert cli_main([str(a) for a in s]) == 0, s
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(verdict, tmp_path, monkeypatch):
    runs = [_all_stages(tmp_path / name, monkeypatch, w) for name, w in (("a", "1"), ("b", "1"), ("c", "3"))]
    same = runs[0] == runs[1] == runs[2]
    differing = sorted(k for k in runs[0] if not (runs[0][k] == runs[1].get(k) == runs[2].get(k)))
    verdict(9, "determinism", same,
            f"{len(runs[0])} artifacts over 3 runs (CFSEQ_WORKERS 1, 1, 3); differing {differing}")
