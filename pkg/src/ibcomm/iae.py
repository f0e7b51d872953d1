"""Information-aware encoding.

Condenses a dense (C, H, W) feature into a D-dimensional Gaussian latent
(mu, sigma) with a closed-form KL divergence to a standard-normal prior.
The heads predict log-variance, so sigma = exp(0.5 * logvar) is positive
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg


@dataclass(frozen=True)
class GaussianLatent:
    """Posterior parameters; ``mu``/``sigma`` are live graph tensors."""

    mu: eg.Tensor
    sigma: eg.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.data.ndim != 1:
            raise eg.ShapeError(
                f"GaussianLatent: mu {self.mu.shape} vs sigma {self.sigma.shape}")
        if not np.all(self.sigma.data > 0):
            raise ValueError("GaussianLatent: sigma must be strictly positive")


POOL_HW = (4, 4)


def _he_init(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _conv_param(graph, rng, name, cout, cin, k):
    w = graph.parameter(f"{name}.w", _he_init(rng, (cout, cin, k, k), cin * k * k))
    b = graph.parameter(f"{name}.b", np.zeros(cout))
    return w, b


def init_params(graph, rng, c, d, prefix="iae", simple=False):
    """Register encoder parameters on a graph and return a handle dict.

    The full encoder has three stride-2 stages (widths 2C, 4C, 4C), each
    followed by two residual basic blocks. The ``simple`` variant swaps
    the three stages for a single 3x3 conv + relu that still downsamples
    by 8 via strided application, keeping the head geometry unchanged.
    """
    p = {"c": c, "d": d, "simple": simple, "prefix": prefix}
    widths = [2 * c, 4 * c, 4 * c]
    if simple:
        p["stem"] = _conv_param(graph, rng, f"{prefix}.stem", widths[-1], c, 3)
    else:
        cin = c
        for s, cout in enumerate(widths):
            p[f"down{s}"] = _conv_param(graph, rng, f"{prefix}.down{s}", cout, cin, 3)
            for r in range(2):
                p[f"res{s}{r}a"] = _conv_param(graph, rng, f"{prefix}.res{s}{r}a", cout, cout, 3)
                p[f"res{s}{r}b"] = _conv_param(graph, rng, f"{prefix}.res{s}{r}b", cout, cout, 3)
            cin = cout
    flat = widths[-1] * POOL_HW[0] * POOL_HW[1]
    p["trunk"] = (
        graph.parameter(f"{prefix}.trunk.w", _he_init(rng, (2 * d, flat), flat)),
        graph.parameter(f"{prefix}.trunk.b", np.zeros(2 * d)),
    )
    for head in ("mu", "logvar"):
        p[head] = (
            graph.parameter(f"{prefix}.{head}.w", _he_init(rng, (d, 2 * d), 2 * d)),
            graph.parameter(f"{prefix}.{head}.b", np.zeros(d)),
        )
    return p


def _residual_block(x, pa, pb):
    h = eg.relu(eg.conv2d(x, *pa))
    h = eg.conv2d(h, *pb)
    return eg.relu(eg.add(h, x))


def encode(z, p):
    """Map a (C, H, W) feature to its Gaussian posterior (mu, sigma)."""
    c, h, w = z.shape
    if h % 8 or w % 8:
        raise eg.ShapeError(f"encode: spatial dims {h}x{w} must be divisible by 8")
    if c != p["c"]:
        raise eg.ShapeError(f"encode: expected {p['c']} channels, got {c}")
    if p["simple"]:
        x = eg.relu(eg.conv2d(z, *p["stem"], stride=2, padding=1))
    else:
        x = z
        for s in range(3):
            x = eg.relu(eg.conv2d(x, *p[f"down{s}"], stride=2, padding=1))
            x = _residual_block(x, p[f"res{s}0a"], p[f"res{s}0b"])
            x = _residual_block(x, p[f"res{s}1a"], p[f"res{s}1b"])
    x = eg.adaptive_max_pool(x, POOL_HW)
    x = eg.reshape(x, (x.size,))
    t = eg.relu(eg.fully_connected(x, *p["trunk"]))
    mu = eg.fully_connected(t, *p["mu"])
    logvar = eg.fully_connected(t, *p["logvar"])
    sigma = eg.exp(eg.scale(logvar, 0.5))
    return GaussianLatent(mu=mu, sigma=sigma)


def sample(g, eps):
    """Reparameterized draw e = mu + sigma * eps with externally supplied eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.mu.shape:
        raise eg.ShapeError(f"sample: eps shape {eps.shape} != mu shape {g.mu.shape}")
    return eg.add(g.mu, eg.mul_const(g.sigma, eps))


def kl_to_standard_normal(g):
    """KL(N(mu, sigma^2) || N(0, I)) in nats, as a differentiable scalar node.

    Closed form: 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1).
    """
    if not np.all(g.sigma.data > 0):
        raise ValueError("kl_to_standard_normal: sigma must be positive")
    d = g.mu.size
    quad = eg.add(eg.sum_all(eg.mul(g.mu, g.mu)), eg.sum_all(eg.mul(g.sigma, g.sigma)))
    logdet = eg.scale(eg.sum_all(eg.log(g.sigma)), 2.0)
    return eg.scale(eg.add_scalar(eg.sub(quad, logdet), -float(d)), 0.5)


def check_latent_ratio(d, c, h, w):
    """Enforce D << C*H*W (the whole point of the latent)."""
    if not d < c * h * w / 100:
        raise ValueError(f"latent dim {d} too large for feature size {c * h * w}")
