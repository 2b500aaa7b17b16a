"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

import numpy as np

from .value import Value, backward


def grad_check(f, point, eps=1e-5):
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``point`` is an array or a dict of named arrays; ``f`` receives the same
    structure with :class:`Value` leaves and must return a scalar Value.
    """
    named = isinstance(point, dict)
    base = {k: np.array(v, dtype=np.float64) for k, v in (point.items() if named else [("x", point)])}

    def call(arrays, track):
        vals = {k: Value(a, requires_grad=track, name=k) for k, a in arrays.items()}
        out = f(vals if named else vals["x"])
        return out, vals

    out, leaves = call(base, True)
    backward(out)
    worst = 0.0
    for key, arr in base.items():
        analytic = leaves[key].grad
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                hi = float(call(base, False)[0].data)
                flat[i] = orig - eps
                lo = float(call(base, False)[0].data)
            except (ValueError, FloatingPointError) as exc:
                raise ValueError(f"objective failed when probing {key}[{i}]: {exc}") from exc
            finally:
                flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError(f"non-finite objective when probing {key}[{i}]")
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
