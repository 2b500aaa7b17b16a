"""Trajectory/cohort containers and their CSV + sidecar persistence."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Trajectory:
    unit_id: int
    V: np.ndarray
    X: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    active_len: int
    sim_state: dict | None = None


@dataclass
class Cohort:
    """Columnar cohort: row ``i`` of every array belongs to ``unit_id[i]``.

    Arrays span the full simulated length ``T``; steps at or beyond
    ``active_len`` are unobserved by the model but kept so ground-truth
    rollouts can extend past the observed window.
    """

    generator: str
    unit_id: np.ndarray      # (n,) int
    V: np.ndarray            # (n, d_v)
    X: np.ndarray            # (n, T, d_x)
    W: np.ndarray            # (n, T) int
    Y: np.ndarray            # (n, T)
    active_len: np.ndarray   # (n,) int
    K: int
    y_scale: float
    x_scale: np.ndarray      # (d_x,)
    meta: dict = field(default_factory=dict)
    unit_state: dict | None = None   # name -> (n,) array
    step_state: dict | None = None   # name -> (n, T) array

    @property
    def n(self) -> int:
        return len(self.unit_id)

    @property
    def max_len(self) -> int:
        return self.Y.shape[1]

    @property
    def d_x(self) -> int:
        return self.X.shape[2]

    @property
    def d_v(self) -> int:
        return self.V.shape[1]

    def has_sim_state(self) -> bool:
        return self.unit_state is not None and self.step_state is not None

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Trajectory:
        state = None
        if self.has_sim_state():
            state = {"generator": self.generator, "meta": self.meta,
                     "unit": {k: v[i] for k, v in self.unit_state.items()},
                     "step": {k: v[i] for k, v in self.step_state.items()}}
        return Trajectory(int(self.unit_id[i]), self.V[i], self.X[i], self.W[i], self.Y[i],
                          int(self.active_len[i]), state)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        pick = lambda d: None if d is None else {k: v[idx] for k, v in d.items()}
        return Cohort(self.generator, self.unit_id[idx], self.V[idx], self.X[idx], self.W[idx],
                      self.Y[idx], self.active_len[idx], self.K, self.y_scale, self.x_scale,
                      dict(self.meta), pick(self.unit_state), pick(self.step_state))

    def without_sim_state(self) -> "Cohort":
        return Cohort(self.generator, self.unit_id, self.V, self.X, self.W, self.Y,
                      self.active_len, self.K, self.y_scale, self.x_scale, dict(self.meta))


def atomic_write_text(path, text: str) -> None:
    """Write to a sibling temp file, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(a) -> np.ndarray:
    """Shortest repr that round-trips every float64 exactly."""
    return np.array([repr(float(x)) for x in np.ravel(a)], dtype=object)


def _csv_text(header, columns) -> str:
    lines = [",".join(header)]
    cols = [c if c.dtype == object else c.astype(str) for c in columns]
    lines.extend(",".join(row) for row in zip(*cols))
    return "\n".join(lines) + "\n"


def _read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    return header, data


def save_cohort(cohort: Cohort, directory, split: str) -> list[Path]:
    """Write ``<split>.csv``, ``<split>.meta.json`` and, if present, sim_state sidecars."""
    directory = Path(directory)
    n, T = cohort.n, cohort.max_len
    uid = np.repeat(cohort.unit_id, T)
    t = np.tile(np.arange(T), n)
    active = (t < np.repeat(cohort.active_len, T)).astype(np.int64)
    header = ["unit_id", "t", "active", "w", "y"]
    header += [f"x_{k}" for k in range(cohort.d_x)] + [f"v_{k}" for k in range(cohort.d_v)]
    cols = [uid, t, active, cohort.W.reshape(-1), _fmt(cohort.Y)]
    cols += [_fmt(cohort.X[:, :, k]) for k in range(cohort.d_x)]
    cols += [_fmt(np.repeat(cohort.V[:, k], T)) for k in range(cohort.d_v)]
    written = []
    p = directory / f"{split}.csv"
    atomic_write_text(p, _csv_text(header, cols))
    written.append(p)

    meta = dict(cohort.meta)
    meta.update({"generator": cohort.generator, "n": n, "max_len": T, "d_x": cohort.d_x,
                 "d_v": cohort.d_v, "K": cohort.K, "y_scale": cohort.y_scale,
                 "x_scale": [float(s) for s in cohort.x_scale]})
    p = directory / f"{split}.meta.json"
    atomic_write_text(p, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)

    if cohort.has_sim_state():
        names = sorted(cohort.unit_state)
        p = directory / f"{split}.units.csv"
        atomic_write_text(p, _csv_text(["unit_id"] + names,
                                       [cohort.unit_id] + [_fmt(cohort.unit_state[k]) for k in names]))
        written.append(p)
        names = sorted(cohort.step_state)
        p = directory / f"{split}.steps.csv"
        atomic_write_text(p, _csv_text(["unit_id", "t"] + names,
                                       [uid, t] + [_fmt(cohort.step_state[k]) for k in names]))
        written.append(p)
    return written


def load_cohort(directory, split: str) -> Cohort:
    directory = Path(directory)
    path = directory / f"{split}.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing cohort file {path}")
    meta = json.loads((directory / f"{split}.meta.json").read_text())
    n, T, d_x, d_v = meta["n"], meta["max_len"], meta["d_x"], meta["d_v"]
    header, data = _read_csv(path)
    col = {h: i for i, h in enumerate(header)}
    data = data.reshape(n, T, -1)
    unit_id = data[:, 0, col["unit_id"]].astype(np.int64)
    active_len = data[:, :, col["active"]].sum(axis=1).astype(np.int64)
    W = data[:, :, col["w"]].astype(np.int64)
    Y = data[:, :, col["y"]].copy()
    X = np.stack([data[:, :, col[f"x_{k}"]] for k in range(d_x)], axis=2)
    V = np.stack([data[:, 0, col[f"v_{k}"]] for k in range(d_v)], axis=1) if d_v else np.zeros((n, 0))
    unit_state = step_state = None
    up, sp = directory / f"{split}.units.csv", directory / f"{split}.steps.csv"
    if up.exists() and sp.exists():
        h, d = _read_csv(up)
        unit_state = {name: d[:, j].copy() for j, name in enumerate(h) if name != "unit_id"}
        h, d = _read_csv(sp)
        d = d.reshape(n, T, -1)
        step_state = {name: d[:, :, j].copy() for j, name in enumerate(h) if name not in ("unit_id", "t")}
    core = {"generator", "n", "max_len", "d_x", "d_v", "K", "y_scale", "x_scale"}
    return Cohort(meta["generator"], unit_id, V, X, W, Y, active_len, int(meta["K"]),
                  float(meta["y_scale"]), np.asarray(meta["x_scale"], dtype=np.float64),
                  {k: v for k, v in meta.items() if k not in core}, unit_state, step_state)
