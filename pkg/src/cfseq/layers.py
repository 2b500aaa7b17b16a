"""Parameter initialization and the small network blocks shared by encoder and decoder.

Parameters live in flat ``dict[str, np.ndarray]`` stores keyed by dotted
names (``"enc.gru.Wr"``). Forward functions receive the same keys mapped to
:class:`Value` leaves.
"""
from __future__ import annotations

import numpy as np

from .diffcore import (
    Value, add, matmul, mul, selu, sigmoid, spectral_normalize, sub, tanh, transpose,
    weight_norm_apply,
)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def init_affine(store, rng, prefix, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    store[f"{prefix}.W"] = _uniform(rng, bound, (fan_in, fan_out))
    store[f"{prefix}.b"] = _uniform(rng, bound, (fan_out,))


def init_wn_affine(store, rng, prefix, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    v = _uniform(rng, bound, (fan_out, fan_in))
    store[f"{prefix}.v"] = v
    store[f"{prefix}.g"] = np.linalg.norm(v, axis=1)
    store[f"{prefix}.b"] = _uniform(rng, bound, (fan_out,))


def init_sn_affine(store, rng, prefix, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    store[f"{prefix}.W"] = _uniform(rng, bound, (fan_out, fan_in))
    store[f"{prefix}.b"] = _uniform(rng, bound, (fan_out,))


def init_gru(store, rng, prefix, n_in, n_hidden):
    bound = 1.0 / np.sqrt(n_hidden)
    for gate in "rzh":
        store[f"{prefix}.W{gate}"] = _uniform(rng, bound, (n_in, n_hidden))
        store[f"{prefix}.U{gate}"] = _uniform(rng, bound, (n_hidden, n_hidden))
        store[f"{prefix}.b{gate}"] = _uniform(rng, bound, (n_hidden,))


def init_sn_state(rng, n):
    u = rng.normal(size=n)
    return u / np.linalg.norm(u)


def affine(x, P, prefix):
    return add(matmul(x, P[f"{prefix}.W"]), P[f"{prefix}.b"])


def wn_affine(x, P, prefix):
    w = weight_norm_apply(P[f"{prefix}.v"], P[f"{prefix}.g"])
    return add(matmul(x, transpose(w)), P[f"{prefix}.b"])


def sn_affine(x, P, prefix, sn_vectors):
    u, v = sn_vectors[prefix]
    w = spectral_normalize(P[f"{prefix}.W"], u, v)
    return add(matmul(x, transpose(w)), P[f"{prefix}.b"])


def gru_step(x, h_prev, P, prefix):
    """One GRU update; ``h = (1 - z) * h_prev + z * candidate``."""
    r = sigmoid(add(add(matmul(x, P[f"{prefix}.Wr"]), matmul(h_prev, P[f"{prefix}.Ur"])), P[f"{prefix}.br"]))
    z = sigmoid(add(add(matmul(x, P[f"{prefix}.Wz"]), matmul(h_prev, P[f"{prefix}.Uz"])), P[f"{prefix}.bz"]))
    cand = tanh(add(add(matmul(x, P[f"{prefix}.Wh"]), matmul(mul(r, h_prev), P[f"{prefix}.Uh"])),
                    P[f"{prefix}.bh"]))
    return add(h_prev, mul(z, sub(cand, h_prev)))


def mlp_selu(x, P, prefix):
    """affine -> SELU -> affine."""
    return affine(selu(affine(x, P, f"{prefix}.0")), P, f"{prefix}.1")


def as_leaves(store, names=None, track=True):
    """Wrap stored arrays as graph leaves; only ``names`` (or all) require grad."""
    out = {}
    for k, a in store.items():
        req = track and (names is None or k in names)
        out[k] = Value(a, requires_grad=req, name=k)
    return out


def gradients(leaves, grad_map):
    """Collect ``{name: grad}`` for tracked leaves present in ``grad_map``."""
    return {k: grad_map[v] for k, v in leaves.items() if v in grad_map}
