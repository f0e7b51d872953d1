"""Shared test helpers: finite-difference gradient checking and RNG."""

import numpy as np
import pytest

from ibcomm import engine as eg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(build, inputs, eps=1e-6, rtol=1e-6, atol=1e-9):
    """Central finite-difference check of reverse-mode gradients.

    ``build`` maps a list of leaf tensors to a scalar loss tensor;
    ``inputs`` is a list of float64 ndarrays. Every analytic gradient is
    compared entry-by-entry against (f(x+eps) - f(x-eps)) / (2 eps).
    Returns the worst relative error seen.
    """
    leaves = [eg.Tensor(x) for x in inputs]
    loss = build(leaves)
    grads = eg.backward(loss, wrt=leaves)
    worst = 0.0
    for leaf, x in zip(leaves, inputs):
        analytic = np.asarray(grads[leaf], dtype=np.float64)
        numeric = np.zeros_like(analytic, dtype=np.float64).reshape(-1)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(build([eg.Tensor(v) for v in inputs]).data)
            flat[i] = orig - eps
            fm = float(build([eg.Tensor(v) for v in inputs]).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        numeric = numeric.reshape(analytic.shape)
        denom = np.maximum(np.abs(numeric), np.abs(analytic))
        err = np.abs(analytic - numeric)
        rel = np.where(denom > atol / rtol, err / np.maximum(denom, 1e-300), err)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst
