import os
import time
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from cfseq.config import ExperimentConfig, ModelConfig
from cfseq.decoder import init_decoder
from cfseq.encoder import init_encoder
from cfseq.expcli.checkpoint import (
    dumps_checkpoint, encoder_from, encoder_meta, load_checkpoint, loads_checkpoint, model_from, model_meta,
)
from cfseq.expcli.cli import git_blob_hash, main, read_report_csvs
from cfseq.expcli.config_io import (
    ConfigError, config_fingerprint, dumps_config, loads_config,
)
from cfseq.expcli.svg import nice_ticks, render_nrmse_svg
from cfseq.rng import substream

SMALL = """\
[generator]
n_train = 32
n_val = 8
n_test = 8
max_len = 20

[model]
z_dim = 4
c_dim = 4
r_dim = 4
fc_hidden = 4
plan_hidden = 2
tau = 3
enc_max_epochs = 2
dec_max_epochs = 2
enc_batch_size = 16
dec_batch_size = 16

[run]
seeds = [0]
"""


# ---------------------------------------------------------------- config files

def test_minimal_config_uses_defaults():
    cfg = loads_config("[model]\ntau = 5\n")
    assert cfg.model.tau == 5
    assert cfg.model.z_dim == ModelConfig().z_dim
    assert cfg.generator.kind == "tumor" and cfg.run.seeds == (0, 1, 2, 3, 4)
    assert loads_config("") == ExperimentConfig()


def test_invalid_tau_names_key_and_line():
    with pytest.raises(ConfigError) as info:
        loads_config("[generator]\ngamma = 2.0\n\n[model]\ntau = 0\n")
    assert info.value.key == "model.tau" and info.value.line == 5
    assert "model.tau" in str(info.value) and "line 5" in str(info.value)


@pytest.mark.parametrize("text, key", [
    ("[model]\nbogus = 1\n", "model.bogus"),
    ("[nope]\nx = 1\n", "nope"),
    ("[generator.tumor]\nfoo = 2\n", "generator.tumor.foo"),
    ("[model]\nz_dim = 'big'\n", "model.z_dim"),
    ("[model]\nablations = ['no_decoder']\n", "model.ablations"),
    ("[model]\nmasked_covariates = [7]\n", "model.masked_covariates"),
    ("[generator]\nkind = 'ward'\n", "generator.kind"),
    ("[model]\ntreat_momentum = 1.0\n", "model.treat_momentum"),
    ("[model\n", "<syntax>"),
])
def test_config_rejections(text, key):
    with pytest.raises(ConfigError) as info:
        loads_config(text)
    assert info.value.key == key


def test_config_round_trip():
    cfg = loads_config(SMALL + "\n[generator.tumor]\nchemo_mean = 0.03\n")
    cfg.model.ablations = ("no_cpc",)
    cfg.model.grad_clip = 5.0
    again = loads_config(dumps_config(cfg))
    assert again == cfg
    assert config_fingerprint(again) == config_fingerprint(cfg)


def test_fingerprint_scope():
    a = loads_config(SMALL)
    b = loads_config(SMALL.replace("seeds = [0]", "seeds = [0, 1]\nworkers = 3"))
    assert config_fingerprint(a) == config_fingerprint(b)
    c = loads_config(SMALL.replace("tau = 3", "tau = 4"))
    assert config_fingerprint(a) != config_fingerprint(c)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip():
    mcfg = ModelConfig(z_dim=3, c_dim=3, r_dim=3, fc_hidden=3, plan_hidden=2, tau=2)
    enc = init_encoder(6, 3, 3, 2, substream(0, "enc"))
    model = init_decoder(enc, 3, 1, mcfg, 12.5, substream(0, "dec"))
    text = dumps_checkpoint(model_meta(model, seed=4), model.all_params(), model.sn_u)
    assert text == dumps_checkpoint(model_meta(model, seed=4), model.all_params(), model.sn_u)
    meta, params, state = loads_checkpoint(text)
    assert meta["seed"] == 4
    back = model_from(meta, params, state)
    for k, v in model.all_params().items():
        npt.assert_array_equal(back.all_params()[k], v)
    for k, v in model.sn_u.items():
        npt.assert_array_equal(back.sn_u[k], v)
    assert back.y_scale == 12.5 and back.K == 3 and back.tau == 2
    e_meta, e_params, _ = loads_checkpoint(dumps_checkpoint(encoder_meta(enc), enc.store))
    e2 = encoder_from(e_meta, e_params)
    for k, v in enc.store.items():
        npt.assert_array_equal(e2.store[k], v)
    with pytest.raises(ValueError, match="not a trained model"):
        model_from(e_meta, e_params, {})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=0, max_size=12))
def test_checkpoint_floats_are_exact(values):
    arr = np.array(values, dtype=np.float64)
    _, params, _ = loads_checkpoint(dumps_checkpoint({}, {"a": arr, "s": np.float64(1.5)}))
    npt.assert_array_equal(params["a"], arr)
    assert params["s"].shape == () and float(params["s"]) == 1.5


def test_checkpoint_rejections(tmp_path):
    with pytest.raises(ValueError, match="not a cfseq checkpoint"):
        loads_checkpoint("hello\n")
    with pytest.raises(ValueError, match="values for shape"):
        loads_checkpoint('cfseq-checkpoint 1\nmeta {}\nparam a 2,2 1.0 2.0\n')
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")


# ---------------------------------------------------------------- plotting

def test_nice_ticks():
    assert nice_ticks(0.0, 1.0) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    t = nice_ticks(0.0, 3.7)
    assert t[0] == 0.0 and t[-1] >= 3.7


def test_svg_render():
    svg = render_nrmse_svg({"full": [(1, 0.8), (2, 1.0)], "no_cpc": [(1, 0.9), (2, 1.3)]},
                           sd={"full": [0.1, 0.1]})
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 2 and "no_cpc" in svg
    with pytest.raises(ValueError):
        render_nrmse_svg({})


# ---------------------------------------------------------------- pipeline

def _run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.toml"
    cfg.write_text(SMALL)
    start = time.perf_counter()
    assert _run("simulate", "--config", cfg, "--seed", 11, "--out", root / "data") == 0
    assert _run("pretrain", "--config", cfg, "--data", root / "data", "--out", root / "enc") == 0
    assert _run("train", "--config", cfg, "--data", root / "data", "--encoder", root / "enc/encoder.ckpt",
                "--out", root / "model") == 0
    for strategy in ("sliding", "random", "factual"):
        assert _run("evaluate", "--config", cfg, "--data", root / "data", "--model", root / "model/model.ckpt",
                    "--strategy", strategy, "--out", root / "eval") == 0
    assert _run("report", "--in", root / "eval", "--out", root / "eval/plot.svg") == 0
    return root, time.perf_counter() - start


def test_smoke_pipeline(pipeline):
    root, elapsed = pipeline
    assert elapsed < 120
    lines = (root / "eval/eval_sliding.csv").read_text().splitlines()
    assert lines[0] == "variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const"
    assert len(lines) == 4
    assert all(np.isfinite(float(x)) for row in lines[1:] for x in row.split(",")[1:])
    assert (root / "eval/plot.svg").read_text().count("<polyline") == 3
    assert set(read_report_csvs(root / "eval")) == {"full (eval_factual)", "full (eval_random)",
                                                     "full (eval_sliding)"}


def test_manifests(pipeline):
    root, _ = pipeline
    fp = config_fingerprint(loads_config(SMALL))
    for path in ("data/simulate.manifest.txt", "enc/pretrain.manifest.txt", "model/train.manifest.txt",
                 "eval/evaluate_sliding.manifest.txt"):
        text = (root / path).read_text()
        assert f"config_fingerprint {fp}" in text and "seeds 11" in text
    ev = (root / "eval/evaluate_sliding.manifest.txt").read_text()
    assert f"input {git_blob_hash(root / 'data/test.csv')} test.csv" in ev
    assert load_checkpoint(root / "model/model.ckpt")[0]["config_fingerprint"] == fp


def test_git_blob_hash(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"hello\n")
    assert git_blob_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_evaluate_is_byte_identical_across_runs_and_workers(pipeline, tmp_path, monkeypatch):
    root, _ = pipeline
    args = ("evaluate", "--config", root / "cfg.toml", "--data", root / "data", "--model",
            root / "model/model.ckpt", "--strategy", "sliding")
    for workers in ("1", "4"):
        monkeypatch.setenv("CFSEQ_WORKERS", workers)
        assert _run(*args, "--out", tmp_path / workers) == 0
    ref = (root / "eval/eval_sliding.csv").read_bytes()
    for workers in ("1", "4"):
        assert (tmp_path / workers / "eval_sliding.csv").read_bytes() == ref
        assert ((tmp_path / workers / "evaluate_sliding.manifest.txt").read_bytes()
                == (root / "eval/evaluate_sliding.manifest.txt").read_bytes())


def test_simulate_is_identical_across_workers(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(SMALL.replace("[run]\n", "[run]\nworkers = 4\n"))
    for workers in ("1", "3"):
        monkeypatch.setenv("CFSEQ_WORKERS", workers)
        assert _run("simulate", "--config", cfg, "--seed", 2, "--out", tmp_path / workers) == 0
    for name in sorted(os.listdir(tmp_path / "1")):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "3" / name).read_bytes()


def test_fingerprint_mismatch_is_refused(pipeline, tmp_path, capsys):
    root, _ = pipeline
    other = tmp_path / "other.toml"
    other.write_text(SMALL.replace("tau = 3", "tau = 3\nsigma = 0.1"))
    rc = _run("train", "--config", other, "--data", root / "data", "--encoder", root / "enc/encoder.ckpt",
              "--out", tmp_path / "m")
    assert rc == 1
    assert "refusing mismatched artifacts" in capsys.readouterr().err
    assert not (tmp_path / "m" / "model.ckpt").exists()


def test_tampered_cohort_is_refused(pipeline, tmp_path, capsys):
    root, _ = pipeline
    data = tmp_path / "data"
    data.mkdir()
    for p in (root / "data").iterdir():
        (data / p.name).write_bytes(p.read_bytes())
    (data / "test.csv").write_text((data / "test.csv").read_text() + "\n")
    rc = _run("evaluate", "--config", root / "cfg.toml", "--data", data, "--model", root / "model/model.ckpt",
              "--strategy", "sliding", "--out", tmp_path / "ev")
    assert rc == 1 and "does not match the hash" in capsys.readouterr().err


def test_missing_predecessor_names_path(pipeline, tmp_path, capsys):
    root, _ = pipeline
    missing = tmp_path / "nowhere" / "encoder.ckpt"
    rc = _run("train", "--config", root / "cfg.toml", "--data", root / "data", "--encoder", missing,
              "--out", tmp_path / "m")
    assert rc == 1 and str(missing) in capsys.readouterr().err
    rc = _run("pretrain", "--config", root / "cfg.toml", "--data", tmp_path / "empty", "--out", tmp_path / "e")
    assert rc == 1 and str(tmp_path / "empty" / "dataset.json") in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[model]\ntau = 0\n")
    assert _run("simulate", "--config", cfg, "--seed", 0, "--out", tmp_path / "d") == 1
    assert "model.tau" in capsys.readouterr().err
    assert not Path(tmp_path / "d").exists()


def test_bad_worker_cap(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(SMALL)
    monkeypatch.setenv("CFSEQ_WORKERS", "zero")
    assert _run("simulate", "--config", cfg, "--seed", 0, "--out", tmp_path / "d") == 1
    assert "CFSEQ_WORKERS" in capsys.readouterr().err


def test_ablate_command(tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(SMALL.replace("n_train = 32", "n_train = 12").replace("max_len = 20", "max_len = 12")
                   .replace("enc_max_epochs = 2", "enc_max_epochs = 1").replace("dec_max_epochs = 2",
                                                                                "dec_max_epochs = 1"))
    assert _run("ablate", "--config", cfg, "--variants", "no_cpc,no_balancing", "--out", tmp_path / "a") == 0
    rows = (tmp_path / "a/ablation.csv").read_text().splitlines()
    assert {r.split(",")[0] for r in rows[1:]} == {"full", "no_cpc", "no_balancing"}
    assert (tmp_path / "a/ablation_per_seed.csv").exists()
    assert _run("report", "--in", tmp_path / "a", "--out", tmp_path / "a/plot.svg") == 0
    assert _run("ablate", "--config", cfg, "--variants", "bogus", "--out", tmp_path / "b") == 1


def test_report_without_csvs_fails(tmp_path, capsys):
    assert _run("report", "--in", tmp_path, "--out", tmp_path / "x.svg") == 1
    assert "no report CSVs" in capsys.readouterr().err
