"""``cfseq`` command line: simulate -> pretrain -> train -> evaluate, plus ablate and report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from ..data import build_seqdata, outcome_scale
from ..decoder import DECODER_LOG_HEADER, train_decoder
from ..encoder import ENCODER_LOG_HEADER, pretrain_encoder
from ..evalkit import (
    REPORT_HEADER, STRATEGIES, SeedResult, aggregate, evaluate_model, gen_queries, normalization_constant,
    per_seed_csv, report_csv, rmse_by_horizon, run_ablation, simulate_splits,
)
from ..simkit.cohort import atomic_write_text, load_cohort, save_cohort
from .checkpoint import encoder_from, encoder_meta, load_checkpoint, model_from, model_meta, save_checkpoint
from .config_io import ConfigError, canonical_json, config_fingerprint, parse_config
from .svg import render_nrmse_svg

SPLITS = ("train", "val", "test")
DATASET_MANIFEST = "dataset.json"


class CLIError(Exception):
    pass


def git_blob_hash(path) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def resolve_workers(cfg) -> int:
    workers = cfg.run.workers
    env = os.environ.get("CFSEQ_WORKERS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise CLIError(f"CFSEQ_WORKERS must be a positive integer, got {env!r}") from None
        if cap < 1:
            raise CLIError(f"CFSEQ_WORKERS must be a positive integer, got {env!r}")
        workers = min(workers, cap)
    return workers


def _variant_name(mcfg):
    return "+".join(mcfg.ablations) if mcfg.ablations else "full"


def _write_manifest(out_dir, stage, fp, seeds, inputs, outputs, extra=None):
    lines = [f"stage {stage}", f"config_fingerprint {fp}", "seeds " + ",".join(str(s) for s in seeds)]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} {v}")
    for p in inputs:
        lines.append(f"input {git_blob_hash(p)} {Path(p).name}")
    for p in outputs:
        lines.append(f"output {git_blob_hash(p)} {Path(p).name}")
    atomic_write_text(Path(out_dir) / f"{stage}.manifest.txt", "\n".join(lines) + "\n")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise CLIError(f"missing {what}: expected {path}")
    return path


# ---------------------------------------------------------------- dataset handling

def _load_dataset(data_dir, fp):
    """Verify the dataset manifest against the config and file contents; returns (manifest, data_hash)."""
    mpath = _require(Path(data_dir) / DATASET_MANIFEST, "dataset manifest (run `cfseq simulate` first)")
    manifest = json.loads(mpath.read_text())
    if manifest["config_fingerprint"] != fp:
        raise CLIError(f"dataset {data_dir} was simulated under config {manifest['config_fingerprint'][:12]}, "
                       f"current config is {fp[:12]}; refusing mismatched artifacts")
    for name, h in manifest["files"].items():
        p = _require(Path(data_dir) / name, "cohort file")
        if git_blob_hash(p) != h:
            raise CLIError(f"{p} does not match the hash recorded in {mpath}")
    return manifest, hashlib.sha256(canonical_json(manifest["files"]).encode()).hexdigest()


def _seqdata(cfg, data_dir):
    masked = cfg.model.masked_covariates
    cohort = load_cohort(data_dir, "train")
    train = build_seqdata(cohort, masked, y_scale=outcome_scale(cohort, cfg.model.outcome_scaling))
    val = build_seqdata(load_cohort(data_dir, "val"), masked, y_scale=train.y_scale)
    return train, val


def _check_ckpt(meta, path, fp, data_hash):
    if meta.get("config_fingerprint") != fp:
        raise CLIError(f"checkpoint {path} was produced under config {str(meta.get('config_fingerprint'))[:12]}, "
                       f"current config is {fp[:12]}; refusing mismatched artifacts")
    if meta.get("data_hash") != data_hash:
        raise CLIError(f"checkpoint {path} was trained on different data than {meta.get('data_dir', 'given')}")


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg, seed, out):
    fp = config_fingerprint(cfg)
    out = Path(out)
    cohorts = simulate_splits(cfg.generator, cfg.model.tau, seed, resolve_workers(cfg))
    files = []
    for split in SPLITS:
        cohorts[split].meta["config_fingerprint"] = fp
        files += save_cohort(cohorts[split], out, split)
    manifest = {"config_fingerprint": fp, "seed": seed, "splits": list(SPLITS),
                "files": {Path(p).name: git_blob_hash(p) for p in files}}
    atomic_write_text(out / DATASET_MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "simulate", fp, [seed], [], files + [out / DATASET_MANIFEST])
    return 0


def cmd_pretrain(cfg, data, out):
    fp = config_fingerprint(cfg)
    manifest, data_hash = _load_dataset(data, fp)
    seed = manifest["seed"]
    train, val = _seqdata(cfg, data)
    enc, log = pretrain_encoder(train, val, cfg.model, seed, progress=_progress("pretrain"))
    out = Path(out)
    ckpt, log_path = out / "encoder.ckpt", out / "encoder_log.csv"
    save_checkpoint(ckpt, encoder_meta(enc, config_fingerprint=fp, data_hash=data_hash, seed=seed), enc.store)
    atomic_write_text(log_path, log.csv(ENCODER_LOG_HEADER))
    _write_manifest(out, "pretrain", fp, [seed], [Path(data) / DATASET_MANIFEST], [ckpt, log_path])
    return 0


def cmd_train(cfg, data, encoder, out):
    fp = config_fingerprint(cfg)
    manifest, data_hash = _load_dataset(data, fp)
    seed = manifest["seed"]
    enc_path = _require(encoder, "encoder checkpoint (run `cfseq pretrain` first)")
    meta, params, _ = load_checkpoint(enc_path)
    _check_ckpt(meta, enc_path, fp, data_hash)
    train, val = _seqdata(cfg, data)
    model, log = train_decoder(train, val, encoder_from(meta, params), cfg.model, seed,
                               progress=_progress("train"))
    out = Path(out)
    ckpt, log_path = out / "model.ckpt", out / "decoder_log.csv"
    save_checkpoint(ckpt, model_meta(model, config_fingerprint=fp, data_hash=data_hash, seed=seed,
                                     encoder_hash=git_blob_hash(enc_path)),
                    model.all_params(), model.sn_u)
    atomic_write_text(log_path, log.csv(DECODER_LOG_HEADER))
    _write_manifest(out, "train", fp, [seed], [Path(data) / DATASET_MANIFEST, enc_path], [ckpt, log_path])
    return 0


def cmd_evaluate(cfg, data, model_path, strategy, out):
    fp = config_fingerprint(cfg)
    manifest, data_hash = _load_dataset(data, fp)
    seed = manifest["seed"]
    model_path = _require(model_path, "model checkpoint (run `cfseq train` first)")
    meta, params, state = load_checkpoint(model_path)
    _check_ckpt(meta, model_path, fp, data_hash)
    model = model_from(meta, params, state)
    test = load_cohort(data, "test")
    te = build_seqdata(test, cfg.model.masked_covariates, y_scale=model.y_scale)
    queries = gen_queries(test, model.tau, strategy, seed)
    pred = evaluate_model(model, te, queries, cfg.run.eval_chunk)
    res = SeedResult(rmse_by_horizon(pred, queries), len(queries), normalization_constant(test),
                     git_blob_hash(model_path))
    rep = aggregate(_variant_name(cfg.model), [res], (seed,), fp)
    out = Path(out)
    csv_path = out / f"eval_{strategy}.csv"
    atomic_write_text(csv_path, report_csv([rep]))
    inputs = [Path(data) / f"test{sfx}" for sfx in (".csv", ".meta.json", ".units.csv", ".steps.csv")]
    _write_manifest(out, f"evaluate_{strategy}", fp, [seed], [p for p in inputs if p.exists()] + [model_path],
                    [csv_path], {"model_fingerprint": res.model_fingerprint, "norm_const": repr(res.norm_const)})
    return 0


def cmd_ablate(cfg, variants, out):
    fp = config_fingerprint(cfg)
    names = [v.strip() for v in variants.split(",") if v.strip()]
    cfg.run.workers = resolve_workers(cfg)

    def progress(variant, seed, res):
        print(f"[ablate] {variant} seed={seed} mean NRMSE={float((res.rmse / res.norm_const).mean()):.4f}",
              file=sys.stderr)

    reports = run_ablation(cfg, names, progress=progress)
    out = Path(out)
    main_csv, seed_csv = out / "ablation.csv", out / "ablation_per_seed.csv"
    atomic_write_text(main_csv, report_csv(reports.values()))
    atomic_write_text(seed_csv, per_seed_csv(reports.values()))
    summary = {v: f"{r.mean_nrmse():.6f}" for v, r in reports.items()}
    _write_manifest(out, "ablate", fp, cfg.run.seeds, [], [main_csv, seed_csv],
                    {f"mean_nrmse.{v}": s for v, s in summary.items()})
    return 0


def read_report_csvs(in_dir):
    """Collect ``{label: [(horizon, nrmse), ...]}`` from every report CSV in ``in_dir``."""
    series = {}
    for path in sorted(Path(in_dir).glob("*.csv")):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != REPORT_HEADER:
            continue
        for r in rows[1:]:
            label = r[0] if len(list(Path(in_dir).glob("*.csv"))) == 1 else f"{r[0]} ({path.stem})"
            series.setdefault(label, []).append((int(r[1]), float(r[3])))
    return series


def cmd_report(in_dir, out):
    _require(in_dir, "report directory")
    series = read_report_csvs(in_dir)
    if not series:
        raise CLIError(f"no report CSVs with header {','.join(REPORT_HEADER)} found in {in_dir}")
    atomic_write_text(out, render_nrmse_svg(series))
    return 0


def _progress(stage):
    def cb(epoch, row):
        if epoch % 10 == 0:
            vals = " ".join("-" if x is None else f"{x:.4g}" for x in row[1:])
            print(f"[{stage}] epoch {epoch}: {vals}", file=sys.stderr)
    return cb


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="cfseq", description="Counterfactual sequence forecasting experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="simulate train/val/test cohorts")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", required=True, type=_u64)
    s.add_argument("--out", required=True)
    s = sub.add_parser("pretrain", help="pretrain the history encoder")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s = sub.add_parser("train", help="train the decoder on a pretrained encoder")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", required=True)
    s.add_argument("--out", required=True)
    s = sub.add_parser("evaluate", help="score a trained model on counterfactual queries")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--strategy", required=True, choices=STRATEGIES)
    s.add_argument("--out", required=True)
    s = sub.add_parser("ablate", help="train and evaluate ablation variants over the configured seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", required=True, help="comma-separated flags; '+' combines flags in one variant")
    s.add_argument("--out", required=True)
    s = sub.add_parser("report", help="render report CSVs as an SVG line chart")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    return p


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.in_dir, args.out)
        cfg = parse_config(_require(args.config, "config file"))
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed, args.out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.data, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.encoder, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.data, args.model, args.strategy, args.out)
        return cmd_ablate(cfg, args.variants, args.out)
    except (CLIError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
