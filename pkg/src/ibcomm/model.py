"""Single entry point assembling the full collaborative-perception model.

Every ablation variant is built here by flag alone; there is exactly one
builder so variants cannot drift apart structurally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detect, engine as eg, iae, msd, smg


@dataclass(frozen=True)
class ModelConfig:
    c: int = 16
    h: int = 64
    w: int = 64
    d: int = 64
    alpha: float = smg.DEFAULT_ALPHA
    bits: int = smg.DEFAULT_BITS
    stages: int = msd.DEFAULT_STAGES
    in_channels: int = 2
    beta: float = 0.01
    # ablation flags (Table-3-style variants)
    simple_encoder: bool = False
    simple_generator: bool = False
    no_ste: bool = False
    no_mask: bool = False
    single_scale_rec: bool = False

    def __post_init__(self):
        if self.h % (1 << self.stages) or self.w % (1 << self.stages):
            raise ValueError(f"dims {self.h}x{self.w} not divisible by 2^{self.stages}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        iae.check_latent_ratio(self.d, self.c, self.h, self.w)


@dataclass
class Model:
    cfg: ModelConfig
    graph: eg.Graph
    backbone_p: dict
    head_p: dict
    iae_p: dict
    smg_p: dict
    msd_p: dict
    msd_cfg: msd.MsdConfig = field(init=False)

    def __post_init__(self):
        self.msd_cfg = msd.MsdConfig(c=self.cfg.c, h=self.cfg.h, w=self.cfg.w,
                                     k=self.cfg.stages, d=self.cfg.d)


def build_model(cfg, seed=0):
    """Construct a model with deterministic, seed-controlled initialization."""
    rng = np.random.default_rng(seed)
    graph = eg.Graph()
    backbone_p = detect.init_backbone(graph, rng, cfg.c, cfg.in_channels)
    head_p = detect.init_head(graph, rng, cfg.c)
    iae_p = iae.init_params(graph, rng, cfg.c, cfg.d, simple=cfg.simple_encoder)
    smg_p = smg.init_params(graph, rng, cfg.c, simple=cfg.simple_generator)
    msd_p = msd.init_params(graph, rng, msd.MsdConfig(
        c=cfg.c, h=cfg.h, w=cfg.w, k=cfg.stages, d=cfg.d))
    return Model(cfg=cfg, graph=graph, backbone_p=backbone_p, head_p=head_p,
                 iae_p=iae_p, smg_p=smg_p, msd_p=msd_p)


def extract_feature(model, obs):
    """Observation array (in_channels, H, W) -> feature tensor Z."""
    return detect.backbone(eg.constant(obs), model.backbone_p)


def sender_encode(model, z, eps=None):
    """Sender side: latent posterior, transmitted latent, and sparse mask.

    With ``eps`` supplied the latent is the reparameterized sample
    (training); without it the deterministic mean is used (evaluation).
    Returns (posterior, latent tensor, dense mask tensor, quantized mask).
    """
    cfg = model.cfg
    g = iae.encode(z, model.iae_p)
    e = iae.sample(g, eps) if eps is not None else g.mu
    mask = smg.generate_mask(z, model.smg_p)
    dense, q = smg.sparse_dense_ste(mask, cfg.alpha, cfg.bits, ste=not cfg.no_ste)
    return g, e, dense, q


def receiver_decode(model, e, mask):
    """Receiver side: rebuild the feature from latent + mask.

    ``mask`` may be a live dense tensor (training, STE intact) or a
    QuantizedSparseMask decoded from the wire (evaluation).
    """
    cfg = model.cfg
    return msd.decode(e, mask, model.msd_cfg, model.msd_p,
                      use_mask=not cfg.no_mask,
                      final_stage_mask_only=cfg.single_scale_rec)


def fuse(features):
    """Deterministic permutation-invariant elementwise max over features."""
    if not features:
        raise ValueError("fuse: need at least one feature")
    out = features[0]
    for f in features[1:]:
        out = eg.maximum(out, f)
    return out


def predict(model, fused):
    return detect.head(fused, model.head_p)
