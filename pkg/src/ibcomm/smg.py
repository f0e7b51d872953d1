"""Sparse mask generation.

A multi-scale convolutional head produces a dense spatial-importance mask
in (0, 1); top-k filtering keeps the most important positions and a
uniform b-bit quantizer turns the kept values into integer codes. The
straight-through estimator makes the filter + quantize chain trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg

DEFAULT_ALPHA = 0.1
DEFAULT_BITS = 4
BRANCH_KERNELS = (3, 5, 7)


@dataclass(frozen=True)
class SparseMask:
    """Top-k retained positions (strictly increasing row-major indices)."""

    indices: np.ndarray
    values: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        idx = self.indices
        if len(idx) == 0:
            raise ValueError("SparseMask: needs at least one retained position")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("SparseMask: indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.height * self.width:
            raise ValueError("SparseMask: index out of range")

    @property
    def k(self):
        return len(self.indices)


@dataclass(frozen=True)
class QuantizedSparseMask:
    """b-bit codes at the retained positions; step = 1 / (2^b - 1)."""

    indices: np.ndarray
    codes: np.ndarray
    bit_width: int
    height: int
    width: int

    def __post_init__(self):
        if not 1 <= self.bit_width <= 8:
            raise ValueError(f"bit width {self.bit_width} outside [1, 8]")
        top = (1 << self.bit_width) - 1
        if np.any(self.codes < 0) or np.any(self.codes > top):
            raise ValueError(f"codes exceed [0, {top}]")

    @property
    def k(self):
        return len(self.indices)

    @property
    def step(self):
        return 1.0 / ((1 << self.bit_width) - 1)


def init_params(graph, rng, c, prefix="smg", simple=False):
    """Register the mask-generator parameters.

    Three same-padded branches (kernels 3/5/7, C->C), a 1x1 merge back to
    C channels, a residual add of the input, and a 1x1 projection to one
    channel. ``simple`` keeps only the 3x3 branch.
    """
    kernels = BRANCH_KERNELS[:1] if simple else BRANCH_KERNELS
    p = {"c": c, "kernels": kernels, "prefix": prefix}

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    for k in kernels:
        p[f"branch{k}"] = (
            graph.parameter(f"{prefix}.branch{k}.w", he((c, c, k, k), c * k * k)),
            graph.parameter(f"{prefix}.branch{k}.b", np.zeros(c)),
        )
    cin = c * len(kernels)
    p["merge"] = (
        graph.parameter(f"{prefix}.merge.w", he((c, cin, 1, 1), cin)),
        graph.parameter(f"{prefix}.merge.b", np.zeros(c)),
    )
    p["proj"] = (
        graph.parameter(f"{prefix}.proj.w", he((1, c, 1, 1), c)),
        graph.parameter(f"{prefix}.proj.b", np.zeros(1)),
    )
    return p


def generate_mask(z, p):
    """Dense (1, H, W) importance mask in (0, 1) from a (C, H, W) feature."""
    if z.data.ndim != 3 or z.shape[0] != p["c"]:
        raise eg.ShapeError(f"generate_mask: expected ({p['c']},H,W), got {z.shape}")
    branches = [eg.conv2d(z, *p[f"branch{k}"]) for k in p["kernels"]]
    merged = eg.conv2d(eg.concat_channels(branches), *p["merge"], padding=0)
    merged = eg.add(merged, z)
    return eg.sigmoid(eg.conv2d(merged, *p["proj"], padding=0))


def topk_count(alpha, h, w):
    """k = max(1, floor(alpha * H * W))."""
    return max(1, int(np.floor(alpha * h * w)))


def topk_filter(mask_values, alpha):
    """Keep the k largest mask entries; ties go to the smaller linear index.

    ``mask_values`` is a (1, H, W) or (H, W) ndarray of the dense mask.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha {alpha} outside (0, 1]")
    m = np.asarray(mask_values, dtype=np.float64)
    if m.ndim == 3:
        m = m[0]
    h, w = m.shape
    flat = m.ravel()
    k = topk_count(alpha, h, w)
    # stable sort on (-value, index): equal values keep the smaller index
    order = np.argsort(-flat, kind="stable")[:k]
    idx = np.sort(order)
    return SparseMask(indices=idx, values=flat[idx], height=h, width=w)


def quantize(s, b=DEFAULT_BITS):
    """Uniform b-bit quantization: clamp(round_half_away(v / step), 0, 2^b - 1)."""
    if not 1 <= int(b) <= 8:
        raise ValueError(f"bit width {b} outside [1, 8]")
    b = int(b)
    levels = (1 << b) - 1
    scaled = s.values * levels
    codes = np.floor(np.abs(scaled) + 0.5) * np.sign(scaled)
    codes = np.clip(codes, 0, levels).astype(np.int64)
    return QuantizedSparseMask(indices=s.indices.copy(), codes=codes,
                               bit_width=b, height=s.height, width=s.width)


def dequantize(q):
    """Map codes back to values code * step at the retained positions."""
    return SparseMask(indices=q.indices.copy(), values=q.codes * q.step,
                      height=q.height, width=q.width)


def dense_mask_array(q):
    """Dense (1, H, W) ndarray of the dequantized mask; zeros off-support."""
    flat = np.zeros(q.height * q.width, dtype=np.float64)
    flat[q.indices] = q.codes * q.step
    return flat.reshape(1, q.height, q.width)


def quantize_ste(values, b=DEFAULT_BITS):
    """Differentiable quantize-dequantize with a straight-through backward.

    Forward applies the real quantizer; backward passes the downstream
    gradient to the input values unchanged.
    """
    if not 1 <= int(b) <= 8:
        raise ValueError(f"bit width {b} outside [1, 8]")
    levels = (1 << int(b)) - 1
    scaled = values.data * levels
    codes = np.clip(np.floor(np.abs(scaled) + 0.5) * np.sign(scaled), 0, levels)
    return eg.Tensor(codes / levels, (values,), lambda g: (g.copy(),), op="quantize_ste")


def sparse_dense_ste(mask, alpha, b=DEFAULT_BITS, ste=True):
    """Full filter + quantize chain as one differentiable dense node.

    Returns (dense tensor of shape (1, H, W), QuantizedSparseMask). The
    dense tensor carries dequantized values on the retained support and
    zeros elsewhere; with ``ste`` the gradient flows back to the retained
    mask entries, otherwise the node is a constant (gradient blocked).
    """
    _, h, w = mask.shape
    sparse = topk_filter(mask.data, alpha)
    q = quantize(sparse, b)
    if not ste:
        return eg.constant(dense_mask_array(q)), q
    flat = eg.reshape(mask, (h * w,))
    kept = eg.gather(flat, sparse.indices)
    deq = quantize_ste(kept, b)
    dense = eg.reshape(eg.scatter(deq, sparse.indices, h * w), (1, h, w))
    return dense, q
