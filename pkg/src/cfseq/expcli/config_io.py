"""TOML experiment configs: strict parsing, serialization and fingerprints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re

import tomli
import tomli_w

from ..data import OUTCOME_SCALINGS
from ..config import ABLATION_FLAGS, ExperimentConfig, GeneratorConfig, ModelConfig, RunConfig
from ..simkit.ehr import EHRGenConfig
from ..simkit.tumor import TumorConfig

# dataclass type of each table, keyed by dotted path
SECTIONS = {
    "generator": GeneratorConfig,
    "generator.tumor": TumorConfig,
    "generator.ehr": EHRGenConfig,
    "model": ModelConfig,
    "run": RunConfig,
}
# optional scalars (default None) and element types of tuples whose default is empty
OPTIONAL = {"generator.min_len": int, "model.grad_clip": float}
ELEMENT = {"model.ablations": str, "model.masked_covariates": int, "run.seeds": int}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted name and ``line`` its 1-based line (if known)."""

    def __init__(self, key, message, line=None):
        self.key, self.line = key, line
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}: {message}{where}")


def _key_lines(text):
    """Map dotted key -> line number by scanning table headers and assignments."""
    lines, table = {}, ""
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\s]+?)\s*\]", s)
        if m:
            table = re.sub(r"\s+", "", m.group(1))
            lines.setdefault(table, no)
            continue
        m = re.match(r"^([A-Za-z0-9_.\-]+)\s*=", s)
        if m:
            lines.setdefault(f"{table}.{m.group(1)}" if table else m.group(1), no)
    return lines


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _coerce_elem(key, x, kind, line):
    if kind is float:
        if not _is_number(x):
            raise ConfigError(key, f"expected numbers, got {x!r}", line)
        return float(x)
    if kind is int:
        if not isinstance(x, int) or isinstance(x, bool):
            raise ConfigError(key, f"expected integers, got {x!r}", line)
        return x
    if not isinstance(x, kind):
        raise ConfigError(key, f"expected {kind.__name__} entries, got {x!r}", line)
    return x


def _coerce_tuple(key, value, template, line):
    if not isinstance(value, list):
        raise ConfigError(key, f"expected an array, got {type(value).__name__}", line)
    if key in ELEMENT:
        return tuple(_coerce_elem(key, x, ELEMENT[key], line) for x in value)
    probe = template[0] if template else None
    out = []
    for x in value:
        if isinstance(probe, tuple):
            out.append(_coerce_tuple(key, x, probe, line))
        else:
            out.append(_coerce_elem(key, x, float if isinstance(probe, float) else type(probe), line))
    return tuple(out)


def _coerce(key, value, default, line):
    if key in OPTIONAL:
        return _coerce_elem(key, value, OPTIONAL[key], line)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}", line)
        return value
    if isinstance(default, int):
        return _coerce_elem(key, value, int, line)
    if isinstance(default, float):
        return _coerce_elem(key, value, float, line)
    if isinstance(default, str):
        return _coerce_elem(key, value, str, line)
    if isinstance(default, tuple):
        return _coerce_tuple(key, value, default, line)
    raise ConfigError(key, "unsupported field type", line)


def _build(path, cls, table, lines):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    base = cls()
    kwargs = {}
    for name, value in table.items():
        key = f"{path}.{name}"
        if name not in fields:
            raise ConfigError(key, "unknown key", lines.get(key))
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "expected a table", lines.get(key))
            kwargs[name] = _build(key, SECTIONS[key], value, lines)
        else:
            kwargs[name] = _coerce(key, value, getattr(base, name), lines.get(key))
    return cls(**kwargs)


def validate_config(cfg: ExperimentConfig, lines=None):
    """Raise :class:`ConfigError` on the first constraint violation."""
    lines = lines or {}

    def need(ok, key, msg):
        if not ok:
            raise ConfigError(key, msg, lines.get(key))

    g, m, r = cfg.generator, cfg.model, cfg.run
    need(g.kind in ("tumor", "ehr"), "generator.kind", f"must be 'tumor' or 'ehr', got {g.kind!r}")
    need(g.gamma >= 0, "generator.gamma", "must be >= 0")
    need(g.n_train >= 2, "generator.n_train", "must be >= 2")
    need(g.n_val >= 2, "generator.n_val", "must be >= 2")
    need(g.n_test >= 1, "generator.n_test", "must be >= 1")
    need(m.tau >= 1, "model.tau", "must be >= 1")
    need(g.max_len >= m.tau + 2, "generator.max_len", f"must be >= model.tau + 2 = {m.tau + 2}")
    if g.min_len is not None:
        need(m.tau + 1 <= g.min_len <= g.max_len, "generator.min_len", "must lie in [model.tau + 1, max_len]")
    try:
        g.ehr.validate()
    except ValueError as exc:
        raise ConfigError("generator.ehr", str(exc), lines.get("generator.ehr")) from None
    for name in ("z_dim", "c_dim", "r_dim", "fc_hidden", "plan_hidden", "enc_patience", "dec_patience",
                 "sn_iterations"):
        need(getattr(m, name) >= 1, f"model.{name}", "must be >= 1")
    for name in ("enc_max_epochs", "dec_max_epochs"):
        need(getattr(m, name) >= 0, f"model.{name}", "must be >= 0")
    for name in ("enc_batch_size", "dec_batch_size"):
        need(getattr(m, name) >= 2, f"model.{name}", "must be >= 2")
    for name in ("sigma", "enc_lr", "dec_lr", "treat_lr", "finetune_lr_ratio"):
        need(getattr(m, name) > 0, f"model.{name}", "must be > 0")
    for name in ("enc_min_delta", "dec_min_delta", "weight_decay", "club_weight"):
        need(getattr(m, name) >= 0, f"model.{name}", "must be >= 0")
    need(m.outcome_scaling in OUTCOME_SCALINGS, "model.outcome_scaling", f"must be one of {list(OUTCOME_SCALINGS)}")
    need(0 <= m.treat_momentum < 1, "model.treat_momentum", "must lie in [0, 1)")
    need(0 < m.origin_fraction <= 1, "model.origin_fraction", "must lie in (0, 1]")
    need(m.grad_clip is None or m.grad_clip > 0, "model.grad_clip", "must be > 0")
    bad = [f for f in m.ablations if f not in ABLATION_FLAGS]
    need(not bad, "model.ablations", f"unknown flag(s) {bad}; supported: {list(ABLATION_FLAGS)}")
    d_x = 4 if g.kind == "tumor" else g.ehr.d_x
    need(all(0 <= i < d_x for i in m.masked_covariates), "model.masked_covariates",
         f"indices must lie in [0, {d_x - 1}]")
    need(len(r.seeds) >= 1 and all(s >= 0 for s in r.seeds), "run.seeds", "must be a non-empty list of seeds >= 0")
    need(r.workers >= 1, "run.workers", "must be >= 1")
    need(r.eval_chunk >= 1, "run.eval_chunk", "must be >= 1")
    return cfg


def loads_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<syntax>", str(exc)) from None
    lines = _key_lines(text)
    kwargs = {}
    for name, table in raw.items():
        if name not in ("generator", "model", "run"):
            raise ConfigError(name, "unknown section", lines.get(name))
        if not isinstance(table, dict):
            raise ConfigError(name, "expected a table", lines.get(name))
        kwargs[name] = _build(name, SECTIONS[name], table, lines)
    return validate_config(ExperimentConfig(**kwargs), lines)


def parse_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())


def config_dict(cfg) -> dict:
    """Nested plain dict (tuples as lists, ``None`` dropped) suitable for TOML and JSON."""
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)
                    if getattr(x, f.name) is not None}
        if isinstance(x, (tuple, list)):
            return [conv(v) for v in x]
        return x
    return conv(cfg)


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_dict(cfg))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_fingerprint(cfg: ExperimentConfig) -> str:
    """sha256 over the generator and model sections; run bookkeeping is excluded."""
    d = config_dict(cfg)
    return hashlib.sha256(canonical_json({"generator": d["generator"], "model": d["model"]}).encode()).hexdigest()
