"""Multi-scale decoding.

Rebuilds an actionable (C, H, W) feature from the transmitted latent and
the quantized sparse mask: a fully connected expansion seeds a coarse
(C*2^K, H/2^K, W/2^K) map, the mask is modulated in at every scale, and
K transposed-convolution stages double the resolution back up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from . import smg

DEFAULT_STAGES = 3


@dataclass(frozen=True)
class MsdConfig:
    """Target dims plus the derived resolution ladder."""

    c: int
    h: int
    w: int
    k: int = DEFAULT_STAGES
    d: int = 256

    def __post_init__(self):
        f = 1 << self.k
        if self.h % f or self.w % f:
            raise eg.ShapeError(
                f"MsdConfig: {self.h}x{self.w} not divisible by 2^{self.k}")

    def ladder(self):
        """(C^i, H^i, W^i) for i = 0..K; level K is the target resolution."""
        return [(self.c << (self.k - i), self.h >> (self.k - i), self.w >> (self.k - i))
                for i in range(self.k + 1)]


def init_params(graph, rng, cfg, prefix="msd"):
    """Register decoder parameters.

    The mask-downsampling convolutions (one per halving level) start as
    exact 2x2 average pooling so an all-ones mask stays all-ones before
    any training.
    """
    p = {"cfg": cfg, "prefix": prefix}
    c0, h0, w0 = cfg.ladder()[0]
    flat = c0 * h0 * w0
    p["expand"] = (
        graph.parameter(f"{prefix}.expand.w",
                        rng.standard_normal((flat, cfg.d)) * np.sqrt(2.0 / cfg.d)),
        graph.parameter(f"{prefix}.expand.b", np.zeros(flat)),
    )
    for lvl in range(cfg.k):
        p[f"maskdown{lvl}"] = graph.parameter(
            f"{prefix}.maskdown{lvl}.w", np.full((1, 1, 2, 2), 0.25))
    ladder = cfg.ladder()
    for i in range(1, cfg.k + 1):
        cin, cout = ladder[i - 1][0], ladder[i][0]
        p[f"up{i}"] = (
            graph.parameter(f"{prefix}.up{i}.w",
                            rng.standard_normal((cin, cout, 4, 4)) * np.sqrt(2.0 / (cin * 16))),
            graph.parameter(f"{prefix}.up{i}.b", np.zeros(cout)),
        )
    return p


def init_feature(e, cfg, p):
    """Expand the latent into the coarse (C^0, H^0, W^0) seed map."""
    if e.size != cfg.d:
        raise eg.ShapeError(f"init_feature: latent length {e.size} != D={cfg.d}")
    c0, h0, w0 = cfg.ladder()[0]
    return eg.reshape(eg.fully_connected(e, *p["expand"]), (c0, h0, w0))


def stage_mask(dense_mask, stage, cfg, p):
    """Mask at the resolution of stage ``stage`` (0 = coarsest, K = full).

    ``dense_mask`` is the (1, H, W) dequantized mask tensor; each halving
    applies one strided 2x2 convolution.
    """
    if not 0 <= stage <= cfg.k:
        raise eg.ShapeError(f"stage_mask: stage {stage} outside [0, {cfg.k}]")
    m = dense_mask
    for lvl in range(cfg.k - stage):
        m = eg.conv2d(m, p[f"maskdown{lvl}"], stride=2, padding=0)
    return m


def decode(e, mq, cfg, p, use_mask=True, final_stage_mask_only=False):
    """Reconstruct the (C, H, W) feature from latent + mask.

    ``use_mask=False`` drops all modulation; ``final_stage_mask_only``
    keeps modulation only at the last stage.
    """
    if isinstance(mq, smg.QuantizedSparseMask):
        if (mq.height, mq.width) != (cfg.h, cfg.w):
            raise eg.ShapeError(
                f"decode: mask {mq.height}x{mq.width} != target {cfg.h}x{cfg.w}")
        dense = eg.constant(smg.dense_mask_array(mq))
    else:
        dense = mq  # already a (1, H, W) tensor (training path keeps STE alive)
        if dense.shape != (1, cfg.h, cfg.w):
            raise eg.ShapeError(
                f"decode: mask shape {dense.shape} != (1, {cfg.h}, {cfg.w})")

    f = init_feature(e, cfg, p)
    if use_mask and not final_stage_mask_only:
        f = eg.broadcast_scale(f, stage_mask(dense, 0, cfg, p))
    for i in range(1, cfg.k + 1):
        f = eg.relu(eg.conv_transpose2d(f, *p[f"up{i}"], stride=2, padding=1))
        if use_mask and (not final_stage_mask_only or i == cfg.k):
            f = eg.broadcast_scale(f, stage_mask(dense, i, cfg, p))
    return eg.relu(f)
