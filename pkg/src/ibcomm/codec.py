"""Message wire format, communication-volume accounting, and the
information-theoretic checks behind the compression bound.

The frame layout is normative and bit-exact:

    magic "ICM1" | u16 version=1 | u32 agent_id | u32 frame_id
    | u32 D | u32 C | u32 H | u32 W | u8 b | u32 k
    | D  float32 LE latent values
    | k  u32 LE strictly increasing linear indices
    | ceil(k*b/8) bytes of codes packed LSB-first in index order
    | u32 CRC-32 (IEEE, reflected) over all preceding bytes
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .smg import QuantizedSparseMask

MAGIC = b"ICM1"
VERSION = 1
HEADER_LEN = 4 + 2 + 4 * 6 + 1 + 4  # magic, version, six u32 fields, u8 b, u32 k


class EncodeError(ValueError):
    """Message unit violates an invariant; no frame is emitted."""


class FrameError(ValueError):
    """Base class for malformed incoming frames."""


class UnrecognizedFrame(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class ChecksumMismatch(FrameError):
    pass


class IndexMonotonicityError(FrameError):
    pass


@dataclass(frozen=True)
class MessageUnit:
    """The transmitted pair {E, M^q} plus routing metadata."""

    agent_id: int
    frame_id: int
    e: np.ndarray  # float32 latent, length D
    mq: QuantizedSparseMask
    c: int
    h: int
    w: int

    @property
    def d(self):
        return len(self.e)

    @property
    def k(self):
        return self.mq.k

    def __eq__(self, other):
        return (isinstance(other, MessageUnit)
                and (self.agent_id, self.frame_id, self.c, self.h, self.w)
                == (other.agent_id, other.frame_id, other.c, other.h, other.w)
                and self.mq.bit_width == other.mq.bit_width
                and np.array_equal(self.e.astype(np.float32).view(np.uint32),
                                   other.e.astype(np.float32).view(np.uint32))
                and np.array_equal(self.mq.indices, other.mq.indices)
                and np.array_equal(self.mq.codes, other.mq.codes))


@dataclass(frozen=True)
class VolumeReport:
    """Paper-formula payload size next to the true serialized size."""

    reported_bytes: float
    wire_bytes: int


def _pack_codes(codes, b):
    bits = ((codes.astype(np.uint64)[:, None] >> np.arange(b, dtype=np.uint64)) & 1)
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def _unpack_codes(payload, k, b):
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bits = bits[:k * b].reshape(k, b).astype(np.int64)
    return (bits << np.arange(b, dtype=np.int64)).sum(axis=1)


def encode_message(u):
    """Serialize a message unit to the bit-exact wire frame."""
    mq = u.mq
    if mq.k < 1:
        raise EncodeError("message must retain at least one mask position")
    if np.any(np.diff(mq.indices) <= 0):
        raise EncodeError("mask indices must be strictly increasing")
    if mq.indices[0] < 0 or mq.indices[-1] >= u.h * u.w:
        raise EncodeError("mask index out of spatial range")
    if len(mq.codes) != mq.k:
        raise EncodeError("codes/indices length mismatch")
    e32 = np.ascontiguousarray(u.e, dtype="<f4")
    if not np.all(np.isfinite(e32)):
        raise EncodeError("latent values must be finite")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<H", VERSION)
    body += struct.pack("<IIIIII", u.agent_id, u.frame_id, u.d, u.c, u.h, u.w)
    body += struct.pack("<B", mq.bit_width)
    body += struct.pack("<I", mq.k)
    body += e32.tobytes()
    body += np.ascontiguousarray(mq.indices, dtype="<u4").tobytes()
    body += _pack_codes(mq.codes, mq.bit_width)
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_message(frame):
    """Exact inverse of ``encode_message``; raises named FrameErrors."""
    if len(frame) < HEADER_LEN + 4:
        raise TruncatedFrame("unexpected end of frame")
    if frame[:4] != MAGIC:
        raise UnrecognizedFrame("unrecognized frame")
    (version,) = struct.unpack_from("<H", frame, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported frame version {version}")
    agent_id, frame_id, d, c, h, w = struct.unpack_from("<IIIIII", frame, 6)
    (b,) = struct.unpack_from("<B", frame, 30)
    (k,) = struct.unpack_from("<I", frame, 31)
    if not 1 <= b <= 8 or k < 1:
        raise FrameError(f"invalid frame parameters b={b}, k={k}")
    ncode = (k * b + 7) // 8
    total = HEADER_LEN + 4 * d + 4 * k + ncode + 4
    if len(frame) < total:
        raise TruncatedFrame("unexpected end of frame")
    (crc,) = struct.unpack_from("<I", frame, total - 4)
    if crc != (zlib.crc32(frame[:total - 4]) & 0xFFFFFFFF):
        raise ChecksumMismatch("frame checksum mismatch")
    off = HEADER_LEN
    e = np.frombuffer(frame, dtype="<f4", count=d, offset=off).copy()
    off += 4 * d
    idx = np.frombuffer(frame, dtype="<u4", count=k, offset=off).astype(np.int64)
    off += 4 * k
    if np.any(np.diff(idx) <= 0):
        raise IndexMonotonicityError("index monotonicity violated")
    codes = _unpack_codes(frame[off:off + ncode], k, b)
    mq = QuantizedSparseMask(indices=idx, codes=codes, bit_width=b, height=h, width=w)
    return MessageUnit(agent_id=agent_id, frame_id=frame_id, e=e, mq=mq, c=c, h=h, w=w)


# ---------------------------------------------------------------------------
# communication-volume accounting
# ---------------------------------------------------------------------------

def retained_positions(alpha, h, w):
    return max(1, int(math.floor(alpha * h * w)))


def reported_volume(d, h, w, alpha, b):
    """Payload-only size in bytes: ((D*32) + (floor(alpha*H*W) * b)) / 8."""
    k = int(math.floor(alpha * h * w))
    return (d * 32 + k * b) / 8


def baseline_volume(mode, c, h, w, n_boxes=0):
    """Bytes for the non-learned collaboration baselines."""
    if mode == "standard":
        return c * h * w * 32 / 8
    if mode == "late":
        return n_boxes * 20  # five float32 per box: cx, cy, w, h, score
    raise ValueError(f"unknown baseline mode {mode!r}")


def wire_volume(u):
    """True serialized size of a message unit in bytes."""
    return HEADER_LEN + 4 * u.d + 4 * u.k + (u.k * u.mq.bit_width + 7) // 8 + 4


def volume_report(u, alpha):
    return VolumeReport(reported_bytes=reported_volume(u.d, u.h, u.w, alpha,
                                                       u.mq.bit_width),
                        wire_bytes=wire_volume(u))


def format_bytes(nbytes):
    """Human-readable 1024-based rendering with three decimals."""
    if nbytes >= 1024 ** 2:
        return f"{nbytes / 1024 ** 2:.3f} MB"
    if nbytes >= 1024:
        return f"{nbytes / 1024:.3f} KB"
    return f"{nbytes:g} B"


# ---------------------------------------------------------------------------
# entropy bound of the sparse mask
# ---------------------------------------------------------------------------

def entropy_bound(h, w, k, b):
    """Upper bound on the mask entropy in bits: log2 C(HW, k) + k*b."""
    n = h * w
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    log2_choose = (math.lgamma(n + 1) - math.lgamma(k + 1)
                   - math.lgamma(n - k + 1)) / math.log(2.0)
    return log2_choose + k * b


# ---------------------------------------------------------------------------
# discrete mutual information (exact, brute force)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteJoint:
    """Exact joint pmf over a handful of small finite variables."""

    names: tuple
    pmf: np.ndarray

    def __post_init__(self):
        if len(self.names) != self.pmf.ndim:
            raise ValueError("names/pmf rank mismatch")
        if np.any(self.pmf < 0) or abs(self.pmf.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be nonnegative and sum to 1")

    def axes(self, variables):
        try:
            return tuple(self.names.index(v) for v in variables)
        except ValueError as exc:
            raise KeyError(f"unknown variable in {variables}") from exc

    def marginal(self, variables):
        keep = self.axes(variables)
        drop = tuple(i for i in range(self.pmf.ndim) if i not in keep)
        m = self.pmf.sum(axis=drop)
        # surviving axes come out in ascending original order; permute back
        # to the requested order
        return np.moveaxis(m, range(m.ndim), np.argsort(keep))


def _entropy(p):
    p = p.ravel()
    nz = p > 0
    return float(-(p[nz] * np.log2(p[nz])).sum())


def entropy(joint, variables):
    """Shannon entropy H(variables) in bits."""
    return _entropy(joint.marginal(tuple(variables)))


def mutual_information(joint, vars_a, vars_b):
    """Exact I(A;B) in bits from the definition, with 0*log 0 = 0."""
    vars_a, vars_b = tuple(vars_a), tuple(vars_b)
    if set(vars_a) & set(vars_b):
        raise ValueError("variable groups must be disjoint")
    pab = joint.marginal(vars_a + vars_b)
    na = len(vars_a)
    pa = pab.sum(axis=tuple(range(na, pab.ndim)))
    pb = pab.sum(axis=tuple(range(na)))
    denom = pa.reshape(pa.shape + (1,) * pb.ndim) * pb
    nz = pab > 0
    return float((pab[nz] * np.log2(pab[nz] / denom[nz])).sum())


def random_markov_joint(rng, ny=2, nyn=2, nz=3, ne=2, nm=2):
    """Random joint over (Y, YN, Z, E, M) factoring as (Y,YN) -> Z -> (E,M).

    Y and YN are independent by construction.
    """
    py = rng.dirichlet(np.ones(ny))
    pyn = rng.dirichlet(np.ones(nyn))
    pz_given = rng.dirichlet(np.ones(nz), size=(ny, nyn))
    pem_given = rng.dirichlet(np.ones(ne * nm), size=nz).reshape(nz, ne, nm)
    pmf = (py[:, None, None, None, None]
           * pyn[None, :, None, None, None]
           * pz_given[:, :, :, None, None]
           * pem_given[None, None, :, :, :])
    return DiscreteJoint(names=("Y", "YN", "Z", "E", "M"), pmf=pmf)


def verify_lemma1(joint, tol=1e-9):
    """Check I(E,M;YN) <= I(E,M;Z) - I(E,M;Y) on a Markov-factored joint.

    Requires the joint to satisfy Y independent of YN and the conditional
    independence (Y,YN) _||_ (E,M) | Z; both are validated structurally.
    """
    for name in ("Y", "YN", "Z", "E", "M"):
        if name not in joint.names:
            raise KeyError(f"joint lacks variable {name!r}")
    pyyn = joint.marginal(("Y", "YN"))
    py = pyyn.sum(axis=1)
    pyn = pyyn.sum(axis=0)
    if np.max(np.abs(pyyn - np.outer(py, pyn))) > 1e-9:
        raise ValueError("joint violates the Y independent-of-YN precondition")
    full = joint.marginal(("Y", "YN", "Z", "E", "M"))
    pz = full.sum(axis=(0, 1, 3, 4))
    pyynz = full.sum(axis=(3, 4))
    pzem = full.sum(axis=(0, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        factored = (pyynz[:, :, :, None, None] * pzem[None, None, :, :, :]
                    / pz[None, None, :, None, None])
    factored = np.where(pz[None, None, :, None, None] > 0, factored, 0.0)
    if np.max(np.abs(full - factored)) > 1e-9:
        raise ValueError("joint violates the (Y,YN) -> Z -> (E,M) Markov chain")
    lhs = mutual_information(joint, ("E", "M"), ("YN",))
    rhs = (mutual_information(joint, ("E", "M"), ("Z",))
           - mutual_information(joint, ("E", "M"), ("Y",)))
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs + tol}
