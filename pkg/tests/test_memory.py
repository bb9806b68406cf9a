import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memscry import memory
from memscry.errors import (
    ConfigurationError,
    DegenerateDeltaError,
    EmptyInputError,
    InvalidInputError,
    NoCommonRegionsError,
)
from memscry.fixtures import FixtureSpec, NoiseModel, planted_addresses, synth_memory, synth_session
from memscry.memory import (
    EntropyConfig,
    ScanWindow,
    entropy_histogram,
    key_scan_segment_count,
    scan_ctr_iv_candidates,
    scan_key_candidates,
    shannon_entropy,
    window_entropies,
)
from memscry.model import C2S, S2C, IvCandidate, MemoryRegion, MemorySnapshot

from .conftest import build


def _snap(pos, regions, sid=None):
    return MemorySnapshot(sid or f"s{pos}", pos, tuple(MemoryRegion(b, len(d), bytes(d)) for b, d in regions))


def direct_entropy(seg: bytes) -> float:
    n = len(seg)
    counts = np.bincount(np.frombuffer(seg, np.uint8), minlength=256)
    p = counts[counts > 0] / n
    return float(-(p * np.log2(p)).sum())


# -- entropy ---------------------------------------------------------------------

def test_entropy_examples():
    assert shannon_entropy(bytes(32)) == 0.0
    assert abs(shannon_entropy(bytes(range(32))) - 5.0) < 1e-12
    assert abs(shannon_entropy(bytes(range(8)) * 2) - 3.0) < 1e-12


def test_entropy_empty():
    with pytest.raises(EmptyInputError):
        shannon_entropy(b"")


@given(st.binary(min_size=1, max_size=512))
def test_entropy_bounds(seg):
    h = shannon_entropy(seg)
    assert -1e-12 <= h <= min(8.0, math.log2(len(seg))) + 1e-12


@given(st.binary(min_size=1, max_size=256), st.randoms(use_true_random=False))
def test_entropy_permutation_invariant(seg, rnd):
    shuffled = bytearray(seg)
    rnd.shuffle(shuffled)
    assert abs(shannon_entropy(bytes(shuffled)) - shannon_entropy(seg)) < 1e-12


@given(st.binary(min_size=1, max_size=256))
def test_entropy_self_concat(seg):
    assert abs(shannon_entropy(seg + seg) - shannon_entropy(seg)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=40, max_size=600), st.sampled_from([16, 24, 32]), st.sampled_from([1, 4, 8]))
def test_window_entropies_match_direct(data, length, stride):
    got = window_entropies(np.frombuffer(data, np.uint8), length, stride)
    want = [direct_entropy(data[i:i + length]) for i in range(0, len(data) - length + 1, stride)]
    assert np.allclose(got, want, atol=1e-12)


def test_sorting_fallback_matches_kernel():
    data = np.random.default_rng(1).integers(0, 40, 5000, dtype=np.uint8)
    fast = window_entropies(data, 32, 4)
    slow = memory._entropies_by_sorting(data, 32, 4)
    assert np.allclose(fast, slow, atol=1e-12)


# -- config ---------------------------------------------------------------------

def test_entropy_config_defaults_and_validation():
    c = EntropyConfig()
    assert (c.threshold_for(32), c.threshold_for(24), c.threshold_for(16)) == (4.65, 4.0, 3.4)
    assert c.scan_stride == 4
    with pytest.raises(ConfigurationError):
        EntropyConfig(threshold_256=9)
    with pytest.raises(ConfigurationError):
        EntropyConfig(threshold_128=4.5)
    with pytest.raises(ConfigurationError):
        EntropyConfig(scan_stride=0)
    with pytest.raises(ConfigurationError):
        ScanWindow(True, 0)


# -- IV scan -------------------------------------------------------------------------

def test_iv_scan_worked_value():
    a = bytearray(4096)
    b = bytearray(4096)
    a[64:80] = (123456).to_bytes(16, "big")
    b[64:80] = (123471).to_bytes(16, "big")
    got = scan_ctr_iv_candidates(_snap(1, [(0x10000, a)]), _snap(2, [(0x10000, b)]), 15)
    assert [(c.address, c.counter, c.observed_delta) for c in got] == [(0x10000 + 64, 123456, 15)]


def test_iv_scan_identical_snapshots_empty():
    data = np.random.default_rng(2).bytes(1 << 14)
    assert scan_ctr_iv_candidates(_snap(1, [(0x1000, data)]), _snap(2, [(0x1000, data)]), 7) == []


def test_iv_scan_wraparound_and_little_endian():
    a, b = bytearray(256), bytearray(256)
    a[0:16] = (2**128 - 3).to_bytes(16, "big")
    b[0:16] = (4).to_bytes(16, "big")
    a[32:48] = (1000).to_bytes(16, "little")
    b[32:48] = (1007).to_bytes(16, "little")
    sa, sb = _snap(1, [(0, a)]), _snap(2, [(0, b)])
    assert [c.address for c in scan_ctr_iv_candidates(sa, sb, 7)] == [0]
    le = scan_ctr_iv_candidates(sa, sb, 7, byteorder="little")
    assert [c.address for c in le] == [32] and le[0].counter == 1000


def test_iv_scan_errors():
    a = _snap(1, [(0x1000, bytes(64))])
    with pytest.raises(DegenerateDeltaError):
        scan_ctr_iv_candidates(a, _snap(2, [(0x1000, bytes(64))]), 0)
    with pytest.raises(NoCommonRegionsError):
        scan_ctr_iv_candidates(a, _snap(2, [(0x9000, bytes(64))]), 1)
    with pytest.raises(InvalidInputError):
        scan_ctr_iv_candidates(_snap(2, [(0x1000, bytes(64))]), a, 1)


def brute_force_ivs(snap_a, snap_b, delta, stride, byteorder="big"):
    out = set()
    for ra in snap_a.regions:
        rb = snap_b.region_at(ra.base_address)
        if rb is None or rb.base_address != ra.base_address:
            continue
        n = min(ra.length, rb.length)
        for off in range(0, n - 15, stride):
            va = int.from_bytes(ra.data[off:off + 16], byteorder)
            vb = int.from_bytes(rb.data[off:off + 16], byteorder)
            if (vb - va) % (1 << 128) == delta:
                out.add(ra.base_address + off)
    return out


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), delta=st.integers(1, 50), stride=st.sampled_from([1, 4]))
def test_iv_scan_matches_brute_force(seed, delta, stride):
    rng = np.random.default_rng(seed)
    size = 2048
    a = bytearray(rng.integers(0, 4, size, dtype=np.uint8).tobytes())
    b = bytearray(a)
    for _ in range(6):
        off = int(rng.integers(0, size - 16))
        v = int.from_bytes(rng.bytes(16), "big")
        a[off:off + 16] = v.to_bytes(16, "big")
        b[off:off + 16] = ((v + (delta if rng.random() < 0.5 else delta + 1)) % 2**128).to_bytes(16, "big")
    sa, sb = _snap(1, [(0x4000, a)]), _snap(2, [(0x4000, b)])
    got = {c.address for c in scan_ctr_iv_candidates(sa, sb, delta, EntropyConfig(scan_stride=stride))}
    assert got == brute_force_ivs(sa, sb, delta, stride)


def test_fixture_ivs_found(ctr256):
    spec, _, truth, cap, snaps = ctr256
    where = planted_addresses(spec, truth)
    for d in (C2S, S2C):
        na, nb = (truth.records_before(C2S, p, d) for p in spec.snapshot_positions)
        delta = sum(truth.block_counts[d.short][na:nb])
        got = scan_ctr_iv_candidates(snaps[0], snaps[1], delta, direction=d)
        addrs = {c.address for c in got}
        assert where[("iv", d)] in addrs
        shadows = {a for dd, a in where["shadow"] if dd is d}
        assert shadows <= addrs
        hit = next(c for c in got if c.address == where[("iv", d)])
        assert hit.value == truth.iv_at(d, spec.snapshot_positions[0])


# -- key scan ---------------------------------------------------------------------------

def test_key_segment_example():
    seg = bytes(range(30)) + bytes([0, 1])  # 28 singletons, 2 pairs: 4.875 bits
    assert abs(shannon_entropy(seg) - 4.875) < 1e-12
    region = bytearray(256)
    region[64:96] = seg
    snap = _snap(1, [(0x1000, region)])
    got = scan_key_candidates(snap, snap, 32)
    assert any(k.value == seg and k.address == 0x1040 for k in got)
    assert all(k.entropy > 4.65 for k in got)


def test_zero_segment_excluded():
    snap = _snap(1, [(0x1000, bytes(4096))])
    assert scan_key_candidates(snap, None, 32) == []


def test_key_scan_staticity():
    rng = np.random.default_rng(5)
    key = rng.bytes(32)
    a, b = bytearray(1024), bytearray(1024)
    a[128:160] = key
    b[128:160] = key
    a[512:544] = rng.bytes(32)
    b[512:544] = rng.bytes(32)
    got = scan_key_candidates(_snap(1, [(0, a)]), _snap(2, [(0, b)]), 32)
    assert any(k.value == key for k in got)
    assert all(k.address < 512 - 32 or k.address > 544 for k in got)
    assert len(scan_key_candidates(_snap(1, [(0, a)]), None, 32)) > len(got)


def test_key_scan_dedup_lowest_address():
    key = np.random.default_rng(6).bytes(32)
    region = bytearray(2048)
    region[1024:1056] = key
    region[256:288] = key
    got = scan_key_candidates(_snap(1, [(0, region)]), None, 32)
    assert [k.address for k in got if k.value == key] == [256]


def test_window_requires_anchors():
    snap = _snap(1, [(0, bytes(1024))])
    with pytest.raises(ConfigurationError):
        scan_key_candidates(snap, None, 32, window=ScanWindow(True, 1024), anchors=[])


def test_window_subset_and_planted_distance():
    spec, _, truth, cap, snaps = build(seed=21, key_iv_distance=968, file_size=2000)
    where = planted_addresses(spec, truth)
    assert where[("key", C2S)] - where[("iv", C2S)] == 968
    anchors = [IvCandidate(snaps[0].snapshot_id, where[("iv", d)], truth.iv_at(d, 1), 1, d) for d in (C2S, S2C)]
    full = scan_key_candidates(snaps[0], snaps[1], 32)
    win = scan_key_candidates(snaps[0], snaps[1], 32, window=ScanWindow(True, 1024), anchors=anchors)
    assert truth.key(C2S) in {k.value for k in win}
    assert {(k.address, k.value) for k in win} <= {(k.address, k.value) for k in full}
    assert len(win) < len(full)
    n_win = key_scan_segment_count(snaps[0], snaps[1], 32, window=ScanWindow(True, 1024), anchors=anchors)
    n_full = key_scan_segment_count(snaps[0], snaps[1], 32)
    assert n_win < n_full


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), t1=st.floats(3.0, 4.6), bump=st.floats(0.0, 0.5))
def test_threshold_monotone(seed, t1, bump):
    data = np.random.default_rng(seed).integers(0, 64, 8192, dtype=np.uint8).tobytes()
    snap = _snap(1, [(0, data)])
    lo = scan_key_candidates(snap, None, 32, EntropyConfig(t1, t1, t1))
    t2 = min(8.0, t1 + bump)
    hi = scan_key_candidates(snap, None, 32, EntropyConfig(t2, t2, t2))
    assert {k.value for k in hi} <= {k.value for k in lo}


def test_regions_in_one_snapshot_ignored():
    a = _snap(1, [(0, bytes(64)), (0x8000, np.random.default_rng(0).bytes(256))])
    b = _snap(2, [(0, bytes(64))])
    assert scan_key_candidates(a, b, 32) == []
    assert memory.unmatched_regions(a, b) == [0x8000]


# -- histogram ----------------------------------------------------------------------------

def test_histogram_zeros():
    h = entropy_histogram(_snap(1, [(0, bytes(4096))]), 32, [0.0])
    assert h.counts == (0,)
    assert h.total_segments == (4096 - 32) // 4 + 1


def test_histogram_random():
    data = np.random.default_rng(7).bytes(1 << 16)
    h = entropy_histogram(_snap(1, [(0, data)]), 32, [2.0, 4.5])
    assert h.counts[0] == h.total_segments
    assert h.counts[1] > 0.99 * h.total_segments
    ents = [direct_entropy(data[i:i + 32]) for i in range(0, len(data) - 31, 4)]
    assert h.counts[1] == sum(e > 4.5 for e in ents)


def test_histogram_errors_and_tsv():
    snap = _snap(1, [(0, bytes(16))])
    with pytest.raises(EmptyInputError):
        entropy_histogram(snap, 32, [1.0])
    with pytest.raises(InvalidInputError):
        entropy_histogram(snap, 8, [2.0, 1.0])
    tsv = entropy_histogram(snap, 8, [0.0, 1.0]).to_tsv()
    assert tsv.splitlines()[1].split("\t")[:2] == ["0", "0"]


@settings(max_examples=20, deadline=None)
@given(st.binary(min_size=64, max_size=2048))
def test_histogram_cumulative_non_increasing(data):
    h = entropy_histogram(_snap(1, [(0, data)]), 32, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    assert all(a >= b for a, b in zip(h.counts, h.counts[1:]))


def test_mixed_noise_shape_small():
    spec = FixtureSpec(noise_model=NoiseModel.MIXED_REALISTIC, memory_size=2 << 20, seed=3)
    _, truth = synth_session(spec)
    h = entropy_histogram(synth_memory(spec, truth, 1), 32, [2.0, 4.5])
    f2, f45 = h.fractions()
    assert f45 < f2 / 10
