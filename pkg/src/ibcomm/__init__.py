"""Bandwidth-efficient multi-agent collaborative perception toolkit.

Pipeline: a variational encoder condenses each agent's BEV feature into a
small Gaussian latent, a multi-scale mask generator picks the spatial
cells worth transmitting (top-k, b-bit quantized), a bit-exact codec puts
the pair on the wire, and a mask-guided multi-scale decoder rebuilds an
actionable feature at the receiver. A toy detection task plus a
bandwidth-constrained simulator close the loop end to end.
"""

from . import codec, detect, engine, harness, iae, model, msd, sim, smg

__all__ = ["codec", "detect", "engine", "harness", "iae", "model", "msd",
           "sim", "smg"]
__version__ = "0.1.0"
