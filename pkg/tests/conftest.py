import numpy as np
import pytest

from cfseq.data import SeqData


def random_seqdata(n, T, d_v=1, d_x=2, K=3, seed=0, min_len=None):
    """Small random dataset with the component layout of ``build_seqdata``."""
    rng = np.random.default_rng(seed)
    min_len = T if min_len is None else min_len
    active = rng.integers(min_len, T + 1, size=n)
    V = rng.normal(size=(n, d_v))
    X = rng.normal(size=(n, T, d_x))
    W = rng.integers(0, K, size=(n, T))
    y = rng.uniform(0.1, 1.0, size=(n, T))
    for i, a in enumerate(active):
        X[i, a:] = 0.0
        W[i, a:] = 0
        y[i, a:] = 0.0
    w_prev = np.zeros((n, T), dtype=np.int64)
    w_prev[:, 1:] = W[:, :-1]
    y_prev = np.zeros((n, T))
    y_prev[:, 1:] = y[:, :-1]
    U = np.concatenate([np.repeat(V[:, None], T, axis=1), X, np.eye(K)[w_prev], y_prev[:, :, None]], axis=2)
    return SeqData(U, W, y, V, active, K, 1.0)


@pytest.fixture
def toy_data():
    return random_seqdata(6, 8)
