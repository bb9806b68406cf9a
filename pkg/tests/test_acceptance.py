"""Acceptance suite: one test per numbered criterion.

Each test records its verdict in ``conftest.ACCEPTANCE`` so the terminal
summary prints one PASS/FAIL line per criterion.
"""
import dataclasses
import hashlib
import itertools
import json
import math
import time

import numpy as np
import pytest

from memscry.capture import count_cipher_blocks, ingest_pcap
from memscry.cli import EXIT_OK, main
from memscry.decrypt import ValidationParams, search_valid_combination, validate_combination
from memscry.fixtures import FixtureSpec, NoiseModel, planted_addresses, synth_memory, synth_session
from memscry.memory import (
    EntropyConfig,
    ScanWindow,
    entropy_histogram,
    scan_ctr_iv_candidates,
    scan_key_candidates,
    shannon_entropy,
)
from memscry.model import C2S, S2C, Mode, save_snapshot
from memscry.pipeline import decrypt_with, scan_memory

from . import conftest

MB16 = 16 << 20


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def _fixture(mode, bits, seed, memory_size, **kw):
    spec = FixtureSpec(mode=mode, key_length_bits=bits, seed=seed, memory_size=memory_size, **kw)
    pcap, truth = synth_session(spec)
    snaps = [synth_memory(spec, truth, p) for p in spec.snapshot_positions]
    return spec, pcap, truth, snaps


# -- 1 --------------------------------------------------------------------------

def test_criterion_1_end_to_end_matrix(tmp_path):
    failures, slowest = [], 0.0
    cases = list(itertools.product((Mode.CTR, Mode.CBC), (128, 192, 256), (1_000, 100_000, 500_000),
                                   ("text", "binary")))
    for i, (mode, bits, size, fmt) in enumerate(cases):
        name = f"upload_{i}.{'txt' if fmt == 'text' else 'bin'}"
        spec, pcap, truth, snaps = _fixture(mode, bits, 100 + i, MB16, file_size=size, file_format=fmt,
                                            filename=name)
        case = tmp_path / f"case{i}"
        case.mkdir()
        (case / "session.pcap").write_bytes(pcap)
        args = ["analyze", "--pcap", str(case / "session.pcap"), "--out", str(case / "out")]
        for s in snaps:
            args += ["--snapshot", str(save_snapshot(s, case / f"{s.snapshot_id}.json"))]
        t0 = time.perf_counter()
        code = main(args)
        elapsed = time.perf_counter() - t0
        slowest = max(slowest, elapsed)
        label = f"{mode.value}-{bits}/{size}/{fmt}"
        if code != EXIT_OK:
            failures.append(f"{label}: exit {code}")
            continue
        report = json.loads((case / "out" / "report.json").read_text())
        summary = (case / "out" / "summary.txt").read_text()
        recovered = case / "out" / "files" / name
        checks = {
            "key": all(report["valid"][d.short]["key"] == truth.keys[d.short] for d in (C2S, S2C)),
            "user": f"User:        {truth.username}" in summary,
            "password": f"Password:    {truth.password}" in summary,
            "file": recovered.exists() and hashlib.sha256(recovered.read_bytes()).hexdigest() == truth.file_sha256,
            "time": elapsed < 60,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            failures.append(f"{label}: {','.join(bad)}")
    record(1, not failures,
           f"{len(cases) - len(failures)}/{len(cases)} cases recovered, slowest {slowest:.1f}s"
           + (f"; failed: {failures}" if failures else ""))


# -- 2 --------------------------------------------------------------------------

def test_criterion_2_validation_selectivity():
    _, pcap, truth, _ = _fixture(Mode.CTR, 256, 7, 1 << 16, file_size=2000)
    cap = ingest_pcap(pcap)
    params = ValidationParams(cap.negotiated_mac_length)
    enc = cap.encrypted_packets(C2S)
    pkt, nxt = enc[2].payload, enc[3].payload
    iv, iv_next = truth.iv_at(C2S, 2, C2S), truth.iv_at(C2S, 3, C2S)
    rng = np.random.default_rng(2024)
    trials, raw, confirmed = 10 ** 6, 0, 0
    for chunk in range(trials // 50_000):
        keys = rng.bytes(32 * 50_000)
        for j in range(50_000):
            key = keys[32 * j:32 * j + 32]
            if validate_combination(key, iv, pkt, params, Mode.CTR):
                raw += 1
                confirmed += validate_combination(key, iv_next, nxt, params, Mode.CTR)
    assert validate_combination(truth.key(C2S), iv, pkt, params, Mode.CTR)
    record(2, confirmed == 0 and raw <= 1, f"{trials} random keys: {raw} single-packet accepts, "
                                           f"{confirmed} confirmed")


# -- 3 --------------------------------------------------------------------------

def _cfg(t):
    return EntropyConfig(threshold_128=t, threshold_192=t, threshold_256=t)


def test_criterion_3_threshold_completeness():
    defaults = {16: 3.4, 24: 4.0, 32: 4.65}
    missing, non_monotone, misordered = [], [], []
    totals = dict.fromkeys(defaults, 0)
    for seed in range(100):
        counts = {}
        for klen, t in defaults.items():
            _, _, truth, snaps = _fixture(Mode.CTR, klen * 8, seed, 1 << 20, file_size=1000)
            sizes = []
            for thr in (t - 0.5, t, t + 0.25):
                found = scan_key_candidates(snaps[0], snaps[1], klen, _cfg(thr))
                sizes.append(len(found))
                if thr == t:
                    values = {k.value for k in found}
                    if not {truth.key(C2S), truth.key(S2C)} <= values:
                        missing.append((seed, klen))
                    counts[klen] = len(found)
            if sizes != sorted(sizes, reverse=True):
                non_monotone.append((seed, klen, sizes))
        if not counts[16] > counts[24] > counts[32]:
            misordered.append((seed, counts))
        for k in totals:
            totals[k] += counts[k]
    ok = not (missing or non_monotone or misordered)
    record(3, ok, f"300 fixtures: planted key missing {len(missing)}, non-monotone {len(non_monotone)}, "
                  f"misordered {len(misordered)}; mean counts 128/192/256 = "
                  + "/".join(str(totals[k] // 100) for k in (16, 24, 32)))


# -- 4 --------------------------------------------------------------------------

def _u64_at_every_offset(data: bytes) -> np.ndarray:
    arr = np.frombuffer(data, dtype=np.uint8)
    n = len(arr) - 7
    out = np.zeros(n, dtype=np.uint64)
    for b in range(8):
        out = (out << np.uint64(8)) | arr[b:b + n].astype(np.uint64)
    return out


def brute_force_ivs(snap_a, snap_b, delta):
    """Every byte offset whose big-endian 128-bit value advanced by ``delta``."""
    d_hi, d_lo = np.uint64(delta >> 64), np.uint64(delta & (2 ** 64 - 1))
    hits = set()
    for ra in snap_a.regions:
        rb = snap_b.region_at(ra.base_address)
        if rb is None or rb.base_address != ra.base_address:
            continue
        n = min(ra.length, rb.length)
        a, b = _u64_at_every_offset(ra.data[:n]), _u64_at_every_offset(rb.data[:n])
        a_hi, a_lo, b_hi, b_lo = a[:-8], a[8:], b[:-8], b[8:]
        lo = b_lo - a_lo
        borrow = (b_lo < a_lo).astype(np.uint64)
        hi = b_hi - a_hi - borrow
        hits.update(int(ra.base_address + i) for i in np.flatnonzero((lo == d_lo) & (hi == d_hi)))
    return hits


def test_criterion_4_iv_scan_soundness():
    spec, pcap, truth, snaps = _fixture(Mode.CTR, 256, 17, 4 << 20, file_size=3000,
                                        decoy_counters=1000, shadow_counters=0)
    cap = ingest_pcap(pcap)
    where = planted_addresses(spec, truth)
    decoys = {a for _, a in where["decoy"]}
    n1, n2 = (truth.records_before(C2S, p, C2S) for p in spec.snapshot_positions)
    delta = count_cipher_blocks(cap, C2S, n1, n2)
    got = {c.address for c in scan_ctr_iv_candidates(snaps[0], snaps[1], delta)}
    oracle = brute_force_ivs(snaps[0], snaps[1], delta)
    stride = EntropyConfig().scan_stride
    on_grid = {a for a in oracle if a % stride == 0}
    # a decoy read one byte early sees its value shifted right by 8 bits, which can
    # advance by exactly delta; those views sit off the scan grid
    off_grid = oracle - on_grid
    shifted_decoys = all(a + 1 in decoys for a in off_grid)
    twin = dataclasses.replace(snaps[0], snapshot_id="twin", captured_after_packet=2)
    same = scan_ctr_iv_candidates(snaps[0], twin, delta)
    ok = (where[("iv", C2S)] in got and not (got & decoys) and len(decoys) == 1000
          and got == on_grid and shifted_decoys and same == [])
    record(4, ok, f"{len(decoys)} decoys: {len(got & decoys)} returned, true IV "
                  f"{'found' if where[('iv', C2S)] in got else 'missing'}, scan {len(got)} hits = "
                  f"stride-1 oracle on grid {len(on_grid)} (+{len(off_grid)} off-grid shifted decoy views), "
                  f"identical pair -> {len(same)}")


# -- 5 --------------------------------------------------------------------------

def _search_time(cap, scan):
    t0 = time.perf_counter()
    states = {}
    for d in (C2S, S2C):
        m = search_valid_combination(scan.key_candidates, scan.iv_candidates.get(d, []), cap, d,
                                     scan.positions[d])
        states[d] = m.iv_states
    return time.perf_counter() - t0, states


def test_criterion_5_ctr_cbc_asymmetry():
    t_ctr = t_cbc = 0.0
    cbc_states = []
    for seed, bits in itertools.product(range(3), (128, 192, 256)):
        for mode in (Mode.CTR, Mode.CBC):
            positions = (1, 2) if mode is Mode.CTR else (1,)
            _, pcap, _, snaps = _fixture(mode, bits, 300 + seed, 4 << 20, file_size=5000,
                                         snapshot_positions=positions)
            cap = ingest_pcap(pcap)
            elapsed, states = _search_time(cap, scan_memory(cap, snaps))
            if mode is Mode.CTR:
                t_ctr += elapsed
            else:
                t_cbc += elapsed
                cbc_states.extend(states.values())
    ok = all(s == 1 for s in cbc_states) and t_cbc < t_ctr
    record(5, ok, f"CBC chained IV states {sorted(set(cbc_states))} from one snapshot; "
                  f"search time CBC {t_cbc:.3f}s vs CTR {t_ctr:.3f}s over 9 matched pairs")


# -- 6 --------------------------------------------------------------------------

def test_criterion_6_window_heuristic():
    ratios, mismatches = [], []
    for bits, seed in ((256, 400), (192, 401), (128, 402)):
        _, pcap, truth, snaps = _fixture(Mode.CTR, bits, seed, MB16, file_size=5000, key_iv_distance=968)
        cap = ingest_pcap(pcap)
        full = scan_memory(cap, snaps, window=ScanWindow(False))
        windowed = scan_memory(cap, snaps, window=ScanWindow(True, 1024))
        _, rep_full = decrypt_with(cap, full)
        _, rep_win = decrypt_with(cap, windowed)
        ratios.append(windowed.segments_examined / full.segments_examined)
        if rep_full.valid != rep_win.valid or rep_win.valid[C2S].key != truth.key(C2S):
            mismatches.append(bits)
    ok = max(ratios) <= 0.10 and not mismatches
    record(6, ok, f"windowed/full segments {', '.join(f'{r:.4%}' for r in ratios)}; "
                  f"combination mismatches {mismatches}")


# -- 7 --------------------------------------------------------------------------

def test_criterion_7_entropy_values():
    exact = [
        (shannon_entropy(b"\x41" * 32), 0.0),
        (shannon_entropy(bytes(range(32))), 5.0),
        (shannon_entropy(bytes(range(8)) * 2), 3.0),
    ]
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        alphabet = int(rng.integers(1, 257))
        seg = rng.integers(0, alphabet, n).astype(np.uint8).tobytes()
        h = shannon_entropy(seg)
        perm = bytes(rng.permutation(np.frombuffer(seg, dtype=np.uint8)))
        worst = max(worst, abs(shannon_entropy(perm) - h), abs(shannon_entropy(seg + seg) - h))
        assert 0.0 <= h <= min(8.0, math.log2(n)) + 1e-12
    err = max(abs(got - want) for got, want in exact)
    record(7, err <= 1e-12 and worst <= 1e-12,
           f"exact-case error {err:.1e}, worst invariance deviation {worst:.1e} over 10000 segments")


# -- 8 --------------------------------------------------------------------------

def test_criterion_8_histogram_shape():
    results = []
    for seed in (500, 501, 502):
        spec = FixtureSpec(seed=seed, memory_size=MB16, noise_model=NoiseModel.MIXED_REALISTIC)
        _, truth = synth_session(spec)
        hist = entropy_histogram(synth_memory(spec, truth, 1), 32, [2.0, 4.5], 4)
        results.append(tuple(c / hist.total_segments for c in hist.counts))
    ok = all(hi < 0.05 and lo > 0.50 for lo, hi in results)
    record(8, ok, "fraction >2.0 / >4.5: " + ", ".join(f"{lo:.1%} / {hi:.2%}" for lo, hi in results))
