"""Wire codec, volume accounting, entropy bound, and discrete information."""

import math
import struct
import zlib

import mpmath
import numpy as np
import pytest

from ibcomm import codec, smg


def random_unit(rng, h=8, w=8, d=6, b=4):
    n = h * w
    k = int(rng.integers(1, n // 2))
    idx = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    return codec.MessageUnit(
        agent_id=int(rng.integers(0, 2**16)),
        frame_id=int(rng.integers(0, 2**16)),
        e=rng.standard_normal(d).astype(np.float32),
        mq=smg.QuantizedSparseMask(indices=idx,
                                   codes=rng.integers(0, 2**b, size=k),
                                   bit_width=b, height=h, width=w),
        c=4, h=h, w=w)


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

def test_frame_layout_matches_manual_packing():
    mq = smg.QuantizedSparseMask(indices=np.array([1, 4, 7]),
                                 codes=np.array([3, 15, 9]), bit_width=4,
                                 height=3, width=3)
    u = codec.MessageUnit(agent_id=11, frame_id=22,
                          e=np.array([0.5, -1.25], dtype=np.float32),
                          mq=mq, c=2, h=3, w=3)
    # independent construction straight from the documented layout
    want = b"ICM1" + struct.pack("<H", 1)
    want += struct.pack("<IIIIII", 11, 22, 2, 2, 3, 3)
    want += struct.pack("<B", 4) + struct.pack("<I", 3)
    want += struct.pack("<ff", 0.5, -1.25)
    want += struct.pack("<III", 1, 4, 7)
    want += bytes([0x3 | (0xF << 4), 0x9])  # codes 3, 15, 9 packed LSB-first
    want += struct.pack("<I", zlib.crc32(want))
    assert codec.encode_message(u) == want


@pytest.mark.parametrize("b", [1, 3, 4, 7, 8])
def test_roundtrip_randomized(rng, b):
    for _ in range(100):
        u = random_unit(rng, b=b)
        assert codec.decode_message(codec.encode_message(u)) == u


def test_wire_volume_matches_frame_length(rng):
    for _ in range(20):
        u = random_unit(rng, b=int(rng.integers(1, 9)))
        assert codec.wire_volume(u) == len(codec.encode_message(u))


def test_encode_rejects_invalid_units(rng):
    u = random_unit(rng)
    bad_idx = smg.QuantizedSparseMask(indices=np.array([0, 63]),
                                      codes=np.array([1, 1]), bit_width=4,
                                      height=8, width=8)
    object.__setattr__(bad_idx, "indices", np.array([5, 2]))
    with pytest.raises(codec.EncodeError):
        codec.encode_message(codec.MessageUnit(agent_id=0, frame_id=0, e=u.e,
                                               mq=bad_idx, c=4, h=8, w=8))
    with pytest.raises(codec.EncodeError):
        codec.encode_message(codec.MessageUnit(
            agent_id=0, frame_id=0, e=np.array([np.inf], dtype=np.float32),
            mq=u.mq, c=4, h=8, w=8))
    oob = smg.QuantizedSparseMask(indices=np.array([64]), codes=np.array([1]),
                                  bit_width=4, height=8, width=8)
    with pytest.raises(codec.EncodeError):
        codec.encode_message(codec.MessageUnit(agent_id=0, frame_id=0, e=u.e,
                                               mq=oob, c=4, h=8, w=8))


def test_decode_error_taxonomy(rng):
    frame = codec.encode_message(random_unit(rng))
    with pytest.raises(codec.UnrecognizedFrame):
        codec.decode_message(b"XXXX" + frame[4:])
    with pytest.raises(codec.UnsupportedVersion):
        codec.decode_message(frame[:4] + struct.pack("<H", 9) + frame[6:])
    for cut in (0, 3, codec.HEADER_LEN, len(frame) - 1):
        with pytest.raises(codec.TruncatedFrame):
            codec.decode_message(frame[:cut])
    corrupted = bytearray(frame)
    corrupted[40] ^= 0x01
    with pytest.raises(codec.ChecksumMismatch):
        codec.decode_message(bytes(corrupted))


def test_decode_rejects_nonmonotonic_indices():
    mq = smg.QuantizedSparseMask(indices=np.array([2, 5]), codes=np.array([1, 1]),
                                 bit_width=4, height=4, width=4)
    u = codec.MessageUnit(agent_id=0, frame_id=0,
                          e=np.zeros(1, dtype=np.float32), mq=mq, c=1, h=4, w=4)
    frame = bytearray(codec.encode_message(u))
    # swap the two u32 indices and re-sign the frame so only monotonicity fails
    off = codec.HEADER_LEN + 4
    frame[off:off + 8] = struct.pack("<II", 5, 2)
    frame[-4:] = struct.pack("<I", zlib.crc32(bytes(frame[:-4])))
    with pytest.raises(codec.IndexMonotonicityError):
        codec.decode_message(bytes(frame))


def test_single_bit_corruption_always_detected(rng):
    u = random_unit(rng, h=4, w=4, d=2)
    frame = codec.encode_message(u)
    for byte in range(len(frame)):
        for bit in range(8):
            corrupted = bytearray(frame)
            corrupted[byte] ^= 1 << bit
            with pytest.raises(codec.FrameError):
                codec.decode_message(bytes(corrupted))


def test_code_packing_lsb_first(rng):
    for b in range(1, 9):
        codes = rng.integers(0, 2**b, size=11)
        payload = codec._pack_codes(codes, b)
        assert len(payload) == (11 * b + 7) // 8
        assert np.array_equal(codec._unpack_codes(payload, 11, b), codes)
    # explicit: b=3 codes [5, 1] -> bits 101 100 -> byte 0b001101 = 0x0D
    assert codec._pack_codes(np.array([5, 1]), 3) == bytes([0x0D])


# ---------------------------------------------------------------------------
# volume accounting
# ---------------------------------------------------------------------------

def test_reported_volume_paper_rows():
    assert codec.reported_volume(256, 200, 704, 0.1, 4) == 8064
    assert codec.reported_volume(256, 200, 504, 0.1, 4) == 6064
    assert codec.reported_volume(256, 100, 352, 0.1, 4) == 2784


def test_baseline_volumes():
    assert codec.baseline_volume("standard", 64, 200, 704) == 36_044_800
    assert codec.baseline_volume("standard", 64, 200, 504) == 25_804_800
    assert codec.baseline_volume("late", 4, 8, 8, n_boxes=7) == 140
    with pytest.raises(ValueError):
        codec.baseline_volume("hologram", 1, 1, 1)


def test_wire_overhead_is_header_indices_padding_crc(rng):
    u = random_unit(rng, h=8, w=8, d=6, b=4)
    rep = codec.volume_report(u, alpha=u.k / 64)
    overhead = rep.wire_bytes - rep.reported_bytes
    # header (35) + crc (4) + 4 bytes per retained index + sub-byte padding
    padding = (u.k * 4 + 7) // 8 - u.k * 4 / 8
    assert overhead == 35 + 4 + 4 * u.k + padding


def test_format_bytes_units():
    assert codec.format_bytes(512) == "512 B"
    assert codec.format_bytes(8064) == "7.875 KB"
    assert codec.format_bytes(6064) == "5.922 KB"
    assert codec.format_bytes(36_044_800) == "34.375 MB"
    assert codec.format_bytes(25_804_800) == "24.609 MB"


# ---------------------------------------------------------------------------
# entropy bound
# ---------------------------------------------------------------------------

def test_entropy_bound_small_exact():
    want = math.log2(math.comb(16, 3)) + 3 * 4
    assert codec.entropy_bound(4, 4, 3, 4) == pytest.approx(want, rel=1e-12)
    assert codec.entropy_bound(2, 2, 4, 1) == pytest.approx(4.0, rel=1e-12)
    with pytest.raises(ValueError):
        codec.entropy_bound(4, 4, 0, 4)
    with pytest.raises(ValueError):
        codec.entropy_bound(4, 4, 17, 4)


def test_entropy_bound_matches_arbitrary_precision_oracle():
    mpmath.mp.dps = 60
    for (h, w, k, b) in [(200, 704, 14080, 4), (64, 64, 409, 4), (100, 352, 3520, 8)]:
        want = float(mpmath.log(mpmath.binomial(h * w, k), 2) + k * b)
        assert codec.entropy_bound(h, w, k, b) == pytest.approx(want, rel=1e-9)


# ---------------------------------------------------------------------------
# discrete joints and mutual information
# ---------------------------------------------------------------------------

def test_marginal_respects_requested_order(rng):
    pmf = rng.dirichlet(np.ones(24)).reshape(2, 3, 4)
    j = codec.DiscreteJoint(names=("A", "B", "C"), pmf=pmf)
    assert np.allclose(j.marginal(("C", "A")), np.einsum("abc->ca", pmf))
    assert np.allclose(j.marginal(("B",)), pmf.sum(axis=(0, 2)))
    with pytest.raises(KeyError):
        j.marginal(("A", "Z"))


def test_entropy_known_values():
    j = codec.DiscreteJoint(names=("X",), pmf=np.full(8, 1 / 8))
    assert codec.entropy(j, ("X",)) == pytest.approx(3.0, abs=1e-12)
    j2 = codec.DiscreteJoint(names=("X", "Y"),
                             pmf=np.array([[0.5, 0.0], [0.0, 0.5]]))
    assert codec.entropy(j2, ("X", "Y")) == pytest.approx(1.0, abs=1e-12)


def test_mutual_information_identities(rng):
    # independent pair: I = 0; perfectly correlated pair: I = H
    px, py = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
    indep = codec.DiscreteJoint(names=("X", "Y"), pmf=np.outer(px, py))
    assert codec.mutual_information(indep, ("X",), ("Y",)) == pytest.approx(0.0, abs=1e-12)
    p = rng.dirichlet(np.ones(4))
    copy = codec.DiscreteJoint(names=("X", "Y"), pmf=np.diag(p))
    assert codec.mutual_information(copy, ("X",), ("Y",)) == pytest.approx(
        codec.entropy(copy, ("X",)), abs=1e-12)
    with pytest.raises(ValueError):
        codec.mutual_information(copy, ("X",), ("X",))


def test_mutual_information_matches_entropy_decomposition(rng):
    # independent route: I(A;B) = H(A) + H(B) - H(A,B)
    for _ in range(25):
        pmf = rng.dirichlet(np.ones(36)).reshape(2, 3, 2, 3)
        j = codec.DiscreteJoint(names=("A", "B", "C", "D"), pmf=pmf)
        got = codec.mutual_information(j, ("A", "C"), ("B", "D"))
        want = (codec.entropy(j, ("A", "C")) + codec.entropy(j, ("B", "D"))
                - codec.entropy(j, ("A", "C", "B", "D")))
        assert got == pytest.approx(want, abs=1e-10)


def test_random_markov_joint_structure(rng):
    j = codec.random_markov_joint(rng)
    pyyn = j.marginal(("Y", "YN"))
    assert np.allclose(pyyn, np.outer(pyyn.sum(axis=1), pyyn.sum(axis=0)),
                       atol=1e-12)
    # conditional independence given Z means I((Y,YN); (E,M) | Z) = 0,
    # equivalently I(Y,YN; Z,E,M) = I(Y,YN; Z)
    lhs = codec.mutual_information(j, ("Y", "YN"), ("Z", "E", "M"))
    rhs = codec.mutual_information(j, ("Y", "YN"), ("Z",))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_verify_lemma1_holds_on_random_joints(rng):
    for _ in range(500):
        res = codec.verify_lemma1(codec.random_markov_joint(rng))
        assert res["holds"], f"lemma violated: {res}"


def test_verify_lemma1_rejects_broken_preconditions(rng):
    # E copies Y directly, bypassing Z: the Markov structural check must fire
    pmf = np.zeros((2, 2, 2, 2, 2))
    for y in range(2):
        for yn in range(2):
            for z in range(2):
                pmf[y, yn, z, y, 0] = 1 / 8
    j = codec.DiscreteJoint(names=("Y", "YN", "Z", "E", "M"), pmf=pmf)
    with pytest.raises(ValueError, match="Markov"):
        codec.verify_lemma1(j)
    # correlated Y and YN: the independence check must fire
    pmf2 = np.zeros((2, 2, 2, 2, 2))
    pmf2[0, 0, 0, 0, 0] = 0.5
    pmf2[1, 1, 0, 0, 0] = 0.5
    j2 = codec.DiscreteJoint(names=("Y", "YN", "Z", "E", "M"), pmf=pmf2)
    with pytest.raises(ValueError, match="independent"):
        codec.verify_lemma1(j2)
