"""Memory-snapshot analysis: entropy filtering for keys, increment scan for CTR IVs."""
from __future__ import annotations

import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateDeltaError,
    EmptyInputError,
    InvalidInputError,
    NoCommonRegionsError,
)
from .model import C2S, Direction, IvCandidate, KeyCandidate, MemoryRegion, MemorySnapshot

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

MOD128 = 1 << 128


@dataclass(frozen=True)
class EntropyConfig:
    threshold_256: float = 4.65
    threshold_192: float = 4.0
    threshold_128: float = 3.4
    scan_stride: int = 4

    def __post_init__(self):
        for t in (self.threshold_128, self.threshold_192, self.threshold_256):
            if not 0.0 <= t <= 8.0:
                raise ConfigurationError(f"entropy threshold {t} outside [0, 8]")
        if not self.threshold_128 <= self.threshold_192 <= self.threshold_256:
            raise ConfigurationError("thresholds must not decrease with key length")
        if self.scan_stride < 1:
            raise ConfigurationError("scan stride must be >= 1")

    def threshold_for(self, key_length: int) -> float:
        try:
            return {16: self.threshold_128, 24: self.threshold_192, 32: self.threshold_256}[key_length]
        except KeyError:
            raise InvalidInputError(f"key length {key_length} is not 16, 24 or 32") from None


@dataclass(frozen=True)
class ScanWindow:
    enabled: bool = False
    radius: int = 1024

    def __post_init__(self):
        if self.enabled and self.radius <= 0:
            raise ConfigurationError("window radius must be positive")


@dataclass(frozen=True)
class EntropyHistogram:
    bucket_edges: tuple
    counts: tuple
    total_segments: int
    segment_length: int
    stride: int

    def fractions(self) -> list[float]:
        return [c / self.total_segments for c in self.counts]

    def to_json(self) -> dict:
        return {
            "segment_length": self.segment_length,
            "stride": self.stride,
            "total_segments": self.total_segments,
            "bucket_edges": list(self.bucket_edges),
            "counts": list(self.counts),
        }

    def to_tsv(self) -> str:
        lines = ["# entropy\tsegments_exceeding\tfraction"]
        for e, c in zip(self.bucket_edges, self.counts):
            lines.append(f"{e:g}\t{c}\t{c / self.total_segments:.6f}")
        return "\n".join(lines) + "\n"


# -- entropy ------------------------------------------------------------------

def shannon_entropy(segment) -> float:
    """Shannon entropy of a byte string in bits per byte."""
    n = len(segment)
    if n == 0:
        raise EmptyInputError("entropy of an empty segment")
    h = 0.0
    for f in Counter(bytes(segment)).values():
        p = f / n
        h -= p * math.log2(p)
    return h + 0.0


def _entropy_kernel(data, length, stride, out):
    # count-of-counts keeps each window's sum exact (no running float drift)
    glog = np.zeros(length + 1)
    for c in range(2, length + 1):
        glog[c] = c * math.log2(c)
    hmax = math.log2(length)
    counts = np.zeros(256, np.int64)
    ncount = np.zeros(length + 1, np.int64)
    n = out.shape[0]
    if n == 0:
        return
    for j in range(length):
        counts[data[j]] += 1
    for v in range(256):
        if counts[v] > 0:
            ncount[counts[v]] += 1
    for w in range(n):
        if w > 0:
            start = w * stride
            if stride >= length:
                for v in range(256):
                    counts[v] = 0
                for c in range(length + 1):
                    ncount[c] = 0
                for j in range(start, start + length):
                    counts[data[j]] += 1
                for v in range(256):
                    if counts[v] > 0:
                        ncount[counts[v]] += 1
            else:
                for j in range(stride):
                    b = data[start - stride + j]
                    c = counts[b]
                    ncount[c] -= 1
                    if c > 1:
                        ncount[c - 1] += 1
                    counts[b] = c - 1
                    b = data[start + length - stride + j]
                    c = counts[b]
                    if c > 0:
                        ncount[c] -= 1
                    ncount[c + 1] += 1
                    counts[b] = c + 1
        s = 0.0
        for c in range(2, length + 1):
            if ncount[c]:
                s += ncount[c] * glog[c]
        out[w] = hmax - s / length


if numba is not None:
    _entropy_kernel = numba.njit(cache=True, nogil=True)(_entropy_kernel)


def _entropies_by_sorting(data: np.ndarray, length: int, stride: int) -> np.ndarray:
    """Vectorised fallback: sort each window and sum c*log2(c) over runs."""
    windows = np.lib.stride_tricks.sliding_window_view(data, length)[::stride]
    out = np.empty(len(windows))
    idx = np.arange(length)
    r = np.arange(1, length + 1, dtype=float)
    g = r * np.log2(r)
    step = np.concatenate([[0.0], g - np.concatenate([[0.0], g[:-1]])])
    for a in range(0, len(windows), 1 << 16):
        x = np.sort(windows[a:a + (1 << 16)], axis=1)
        first = np.ones(x.shape, bool)
        first[:, 1:] = x[:, 1:] != x[:, :-1]
        run_start = np.maximum.accumulate(np.where(first, idx, 0), axis=1)
        out[a:a + len(x)] = math.log2(length) - step[idx - run_start + 1].sum(axis=1) / length
    return out


def window_entropies(data, length: int, stride: int = 4) -> np.ndarray:
    """Entropy of every ``length``-byte window starting at multiples of ``stride``."""
    arr = np.frombuffer(data, np.uint8) if isinstance(data, (bytes, bytearray, memoryview)) else data
    if length <= 0 or stride <= 0:
        raise InvalidInputError("window length and stride must be positive")
    if len(arr) < length:
        return np.empty(0)
    n = (len(arr) - length) // stride + 1
    if numba is None:
        return _entropies_by_sorting(arr, length, stride)
    out = np.empty(n)
    _entropy_kernel(arr, length, stride, out)
    return out


# -- helpers ------------------------------------------------------------------

def _as_array(region: MemoryRegion) -> np.ndarray:
    return np.frombuffer(region.data, np.uint8)


def common_regions(snap_a: MemorySnapshot, snap_b: MemorySnapshot):
    """Pair regions by base address; regions present in only one snapshot are dropped."""
    by_base = {r.base_address: r for r in snap_b.regions}
    return [(r, by_base[r.base_address]) for r in snap_a.regions if r.base_address in by_base]


def unmatched_regions(snap_a: MemorySnapshot, snap_b: MemorySnapshot) -> list[int]:
    a = {r.base_address for r in snap_a.regions}
    b = {r.base_address for r in snap_b.regions}
    return sorted(a ^ b)


def _changed_window_starts(a: np.ndarray, b: np.ndarray, width: int, stride: int) -> np.ndarray:
    """Stride-aligned offsets whose ``width``-byte window differs between ``a`` and ``b``."""
    diff = np.concatenate(([0], np.cumsum(a != b, dtype=np.int64)))
    starts = np.arange(0, len(a) - width + 1, stride)
    return starts[diff[starts + width] - diff[starts] > 0]


def _static_mask(a: np.ndarray, b: np.ndarray, starts: np.ndarray, width: int) -> np.ndarray:
    diff = np.concatenate(([0], np.cumsum(a != b, dtype=np.int64)))
    return diff[starts + width] - diff[starts] == 0


def _u128_halves(rows: np.ndarray, byteorder: str):
    if byteorder == "little":
        rows = rows[:, ::-1]
    rows = np.ascontiguousarray(rows)
    hi = rows[:, :8].copy().view(">u8").ravel().astype(np.uint64)
    lo = rows[:, 8:].copy().view(">u8").ravel().astype(np.uint64)
    return hi, lo


def _pool(jobs: Optional[int]):
    return ThreadPoolExecutor(max_workers=jobs or os.cpu_count() or 1)


# -- IV scan ------------------------------------------------------------------

def _scan_region_pair(ra: MemoryRegion, rb: MemoryRegion, delta: int, stride: int, byteorder: str):
    m = min(ra.length, rb.length)
    if ra.data[:m] == rb.data[:m]:
        return []
    a, b = _as_array(ra)[:m], _as_array(rb)[:m]
    starts = _changed_window_starts(a, b, 16, stride)
    if not len(starts):
        return []
    idx = starts[:, None] + np.arange(16)
    a_hi, a_lo = _u128_halves(a[idx], byteorder)
    b_hi, b_lo = _u128_halves(b[idx], byteorder)
    d_lo = b_lo - a_lo
    d_hi = b_hi - a_hi - (b_lo < a_lo).astype(np.uint64)
    hit = (d_hi == np.uint64(delta >> 64)) & (d_lo == np.uint64(delta & 0xFFFFFFFFFFFFFFFF))
    return [int(s) for s in starts[hit]]


def scan_ctr_iv_candidates(snap_a: MemorySnapshot, snap_b: MemorySnapshot, delta: int,
                           config: EntropyConfig = EntropyConfig(), *,
                           direction: Direction = C2S, byteorder: str = "big",
                           jobs: Optional[int] = None) -> list[IvCandidate]:
    """Find 16-byte values that advanced by exactly ``delta`` between two snapshots.

    Values are read as 128-bit integers in ``byteorder`` and compared modulo
    2**128.  Regions that are byte-identical across the snapshots are skipped.
    The candidate carries the value seen in ``snap_a``.
    """
    if snap_a.captured_after_packet >= snap_b.captured_after_packet:
        raise InvalidInputError("snap_a must precede snap_b")
    delta %= MOD128
    if delta == 0:
        raise DegenerateDeltaError("no cipher blocks were sent between the snapshots")
    pairs = common_regions(snap_a, snap_b)
    if not pairs:
        raise NoCommonRegionsError("snapshots share no region addresses")
    stride = config.scan_stride
    with _pool(jobs) as pool:
        hits = list(pool.map(lambda p: _scan_region_pair(p[0], p[1], delta, stride, byteorder), pairs))
    out = []
    for (ra, _), offsets in zip(pairs, hits):
        for off in offsets:
            out.append(IvCandidate(snap_a.snapshot_id, ra.base_address + off,
                                   ra.data[off:off + 16], delta, direction, byteorder))
    out.sort(key=lambda c: c.address)
    return out


# -- key scan -----------------------------------------------------------------

def _merged_windows(anchors: Sequence[IvCandidate], radius: int) -> list[tuple[int, int]]:
    spans = sorted((max(0, a.address - radius), a.address + radius) for a in anchors)
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _scan_ranges(region: MemoryRegion, usable: int, length: int, stride: int,
                 windows: Optional[list]) -> list[tuple[int, int]]:
    """Offset ranges ``[first, stop)`` (stride-aligned starts) to examine in one region."""
    if windows is None:
        spans = [(0, usable)]
    else:
        spans = []
        for lo, hi in windows:
            lo, hi = max(lo - region.base_address, 0), min(hi - region.base_address, usable)
            if hi > lo:
                spans.append((lo, hi))
    out = []
    for lo, hi in spans:
        first = -(-lo // stride) * stride
        if hi - first >= length:
            out.append((first, hi))
    return out


def _segment_count(lo: int, hi: int, length: int, stride: int) -> int:
    return (hi - length - lo) // stride + 1 if hi - lo >= length else 0


def _key_tasks(snap_a, snap_b, key_length, config, window, anchors):
    if window.enabled and not anchors:
        raise ConfigurationError("a windowed key scan needs IV anchors")
    windows = _merged_windows(anchors, window.radius) if window.enabled else None
    if snap_b is None:
        pairs = [(r, None) for r in snap_a.regions]
    else:
        pairs = common_regions(snap_a, snap_b)
    if not pairs:
        raise NoCommonRegionsError("no regions to scan")
    tasks = []
    for ra, rb in pairs:
        usable = ra.length if rb is None else min(ra.length, rb.length)
        for lo, hi in _scan_ranges(ra, usable, key_length, config.scan_stride, windows):
            tasks.append((ra, rb, lo, hi))
    return tasks


def key_scan_segment_count(snap_a: MemorySnapshot, snap_b: Optional[MemorySnapshot], key_length: int,
                           config: EntropyConfig = EntropyConfig(), window: ScanWindow = ScanWindow(),
                           anchors: Sequence[IvCandidate] = ()) -> int:
    """Number of segments :func:`scan_key_candidates` examines for the same arguments."""
    tasks = _key_tasks(snap_a, snap_b, key_length, config, window, anchors)
    return sum(_segment_count(lo, hi, key_length, config.scan_stride) for _, _, lo, hi in tasks)


def _scan_key_task(task, key_length: int, stride: int, threshold: float):
    ra, rb, lo, hi = task
    a = _as_array(ra)
    ent = window_entropies(a[lo:hi], key_length, stride)
    starts = lo + np.arange(len(ent)) * stride
    keep = ent > threshold
    if rb is not None and np.any(keep):
        b = _as_array(rb)
        m = min(len(a), len(b))
        keep[keep] = _static_mask(a[:m], b[:m], starts[keep], key_length)
    return starts[keep], ent[keep]


def scan_key_candidates(snap_a: MemorySnapshot, snap_b: Optional[MemorySnapshot], key_length: int,
                        config: EntropyConfig = EntropyConfig(), window: ScanWindow = ScanWindow(),
                        anchors: Sequence[IvCandidate] = (), *,
                        jobs: Optional[int] = None) -> list[KeyCandidate]:
    """High-entropy, static ``key_length``-byte segments.

    A segment qualifies when its entropy exceeds the configured threshold for
    ``key_length`` and, if ``snap_b`` is given, its bytes are unchanged at the
    same address there.  With ``window.enabled`` only segments lying inside
    ``radius`` bytes of an anchor are examined.  Duplicate values keep their
    lowest address.
    """
    threshold = config.threshold_for(key_length)
    tasks = _key_tasks(snap_a, snap_b, key_length, config, window, anchors)
    with _pool(jobs) as pool:
        results = list(pool.map(
            lambda t: _scan_key_task(t, key_length, config.scan_stride, threshold), tasks))
    found = []
    for (ra, _, _, _), (starts, ents) in zip(tasks, results):
        for off, e in zip(starts.tolist(), ents.tolist()):
            found.append((ra.base_address + off, ra.data[off:off + key_length], e))
    found.sort(key=lambda f: f[0])
    seen, out = set(), []
    for address, value, e in found:
        if value in seen:
            continue
        seen.add(value)
        out.append(KeyCandidate(snap_a.snapshot_id, address, value, e))
    return out


# -- histogram ----------------------------------------------------------------

def entropy_histogram(snap: MemorySnapshot, segment_length: int, edges: Sequence[float],
                      stride: int = 4) -> EntropyHistogram:
    """Count stride-aligned segments whose entropy exceeds each edge."""
    if segment_length <= 0:
        raise InvalidInputError("segment length must be positive")
    edges = [float(e) for e in edges]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise InvalidInputError("histogram edges must be strictly increasing")
    chunks = [window_entropies(_as_array(r), segment_length, stride) for r in snap.regions]
    ent = np.concatenate(chunks) if chunks else np.empty(0)
    if not len(ent):
        raise EmptyInputError("segment length exceeds every region")
    ent.sort()
    counts = tuple(int(len(ent) - np.searchsorted(ent, e, side="right")) for e in edges)
    return EntropyHistogram(tuple(edges), counts, int(len(ent)), segment_length, stride)
