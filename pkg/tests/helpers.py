import numpy as np

from fednpr import nn_core


def small_net(rng, d_in=4, hidden=(5,), d=3, C=3):
    params = nn_core.init_params(d_in, hidden, d, C, rng)
    # non-zero biases so every gradient path is exercised
    for k, t in params.tensors.items():
        if k.endswith("bias"):
            params.tensors[k] = 0.1 * rng.standard_normal(t.shape)
    return params


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f w.r.t. every entry of array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def entropic_2x2_oracle(S, eps, grid=200001):
    """Maximise <Q,S> + eps*H(Q) over the 2x2 polytope with unit marginals by enumeration.

    Every feasible plan is [[t, 1-t], [1-t, t]] for t in [0, 1].
    """
    t = np.linspace(0.0, 1.0, grid)
    ent = lambda q: np.where(q > 0, -q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    obj = t * (S[0, 0] + S[1, 1]) + (1 - t) * (S[0, 1] + S[1, 0]) + eps * 2 * (ent(t) + ent(1 - t))
    best = t[np.argmax(obj)]
    return np.array([[best, 1 - best], [1 - best, best]])


def lp_2x2_oracle(S):
    """Unregularised optimum: the better of the two permutation vertices."""
    keep = S[0, 0] + S[1, 1] >= S[0, 1] + S[1, 0]
    return np.eye(2) if keep else np.eye(2)[::-1]
