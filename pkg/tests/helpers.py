"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np

from stgnn_lab.stgnn import forward
from stgnn_lab.training import model_backward


def dense_generalized_filter(x, seq, c, h):
    """``sum_k h_k S_k ... S_1 X C^k`` with explicit matrix products, feature by feature."""
    n, _, f = x.shape
    out = np.zeros_like(x)
    for g in range(f):
        prod = np.eye(n)
        for k, hk in enumerate(h):
            if k > 0:
                prod = seq[k - 1] @ prod
            out[:, :, g] += hk * prod @ x[:, :, g] @ np.linalg.matrix_power(c, k)
    return out


def velocity_cost_oracle(v):
    total = 0.0
    steps, n, _ = v.shape
    for t in range(steps):
        mean = sum(v[t, j] for j in range(n)) / n
        for i in range(n):
            total += float(np.sum((v[t, i] - mean) ** 2))
    return total


def gradient_check(model, x, seq, tso, rng, coords=100, eps=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    The loss is ``<W, output>`` for a fixed random ``W``.  Up to ``coords``
    random coordinates are checked in every parameter block and in the input.
    Returns ``{block: max relative error}``.
    """
    x = np.array(x, dtype=float)
    w = rng.standard_normal(forward(x, seq, tso, model).output.shape)

    def loss():
        return float(np.sum(w * forward(x, seq, tso, model).output))

    grads, gx = model_backward(model, forward(x, seq, tso, model), seq, tso, w)
    blocks = dict(model.parameters())
    blocks["input"] = x
    grads = dict(grads, input=gx)
    worst = {}
    for name, arr in blocks.items():
        flat, gflat = arr.reshape(-1), grads[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        errs = []
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            dn = loss()
            flat[i] = old
            fd = (up - dn) / (2 * eps)
            errs.append(abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8))
        worst[name] = max(errs)
    return worst
