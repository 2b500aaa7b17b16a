"""Plain-text checkpoint container: a JSON header line plus one row per named array.

Format::

    cfseq-checkpoint 1
    meta {"kind": "model", ...}
    param enc.gru.Wr 16,16 0.1 -0.2 ...
    state dec.w.0 16 0.3 ...

Floats are written as shortest round-trip reprs, so save -> load is exact and
identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..decoder import CausalCPC
from ..encoder import EncoderParams
from ..simkit.cohort import atomic_write_text

MAGIC = "cfseq-checkpoint 1"


def _row(tag, name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    shape = ",".join(str(s) for s in arr.shape) or "-"
    return f"{tag} {name} {shape} " + " ".join(repr(float(x)) for x in arr.reshape(-1))


def dumps_checkpoint(meta: dict, params: dict, state: dict | None = None) -> str:
    lines = [MAGIC, "meta " + json.dumps(meta, sort_keys=True, separators=(",", ":"))]
    lines += [_row("param", k, params[k]) for k in sorted(params)]
    lines += [_row("state", k, v) for k, v in sorted((state or {}).items())]
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str, source="<checkpoint>"):
    """Returns (meta, params, state)."""
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{source}: not a cfseq checkpoint")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise ValueError(f"{source}: missing meta line")
    meta = json.loads(lines[1][5:])
    params, state = {}, {}
    for no, line in enumerate(lines[2:], start=3):
        parts = line.split(" ")
        if len(parts) < 3 or parts[0] not in ("param", "state"):
            raise ValueError(f"{source}:{no}: malformed row")
        tag, name, shape = parts[:3]
        shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        values = np.array([float(x) for x in parts[3:] if x], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{source}:{no}: {name} has {values.size} values for shape {shape}")
        (params if tag == "param" else state)[name] = values.reshape(shape)
    return meta, params, state


def save_checkpoint(path, meta, params, state=None):
    atomic_write_text(path, dumps_checkpoint(meta, params, state))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return loads_checkpoint(path.read_text(), str(path))


def encoder_meta(enc: EncoderParams, **extra):
    return {"kind": "encoder", "d_u": enc.d_u, "z_dim": enc.z_dim, "c_dim": enc.c_dim, "tau": enc.tau, **extra}


def encoder_from(meta, params) -> EncoderParams:
    if meta.get("kind") not in ("encoder", "model"):
        raise ValueError(f"checkpoint kind {meta.get('kind')!r} holds no encoder")
    store = {k: v for k, v in params.items() if k.startswith("enc.")}
    return EncoderParams(store, meta["d_u"], meta["z_dim"], meta["c_dim"], meta["tau"])


def model_meta(model: CausalCPC, **extra):
    return {"kind": "model", "d_u": model.enc.d_u, "z_dim": model.enc.z_dim, "c_dim": model.enc.c_dim,
            "r_dim": model.r_dim, "K": model.K, "tau": model.tau, "sigma": model.sigma, "d_v": model.d_v,
            "plan_hidden": model.plan_hidden, "y_scale": model.y_scale, **extra}


def model_from(meta, params, state) -> CausalCPC:
    if meta.get("kind") != "model":
        raise ValueError(f"checkpoint kind {meta.get('kind')!r} is not a trained model")
    enc = encoder_from(meta, params)
    dec = {k: v for k, v in params.items() if k.startswith("dec.")}
    return CausalCPC(enc, dec, dict(state), meta["K"], meta["d_v"], meta["r_dim"], meta["plan_hidden"],
                     meta["sigma"], meta["y_scale"])
