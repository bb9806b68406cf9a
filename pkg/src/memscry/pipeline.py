"""Stage composition: ingest, memory analysis, decrypt analysis, protocol parsing."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .capture import count_cipher_blocks, ingest_pcap, packets_sent_before
from .decrypt import DecryptReport, decrypt_session
from .errors import ConfigurationError, NoValidCombinationError
from .memory import EntropyConfig, ScanWindow, key_scan_segment_count, scan_ctr_iv_candidates, scan_key_candidates
from .model import (
    Cipher,
    Direction,
    IvCandidate,
    KeyCandidate,
    MemorySnapshot,
    Mode,
    SessionPlaintext,
    SshSessionCapture,
    load_snapshot,
)

log = logging.getLogger(__name__)


@dataclass
class AnalyzeConfig:
    pcap_path: Path
    snapshot_paths: Sequence[Path]
    cipher: Optional[Cipher] = None
    thresholds: EntropyConfig = field(default_factory=EntropyConfig)
    window: ScanWindow = field(default_factory=lambda: ScanWindow(True, 1024))
    output_dir: Optional[Path] = None
    endian_second_pass: bool = False
    report_format: str = "json"
    jobs: Optional[int] = None
    directions: tuple = tuple(Direction)

    def __post_init__(self):
        if not self.snapshot_paths:
            raise ConfigurationError("at least one snapshot is required")
        if self.report_format not in ("json", "text"):
            raise ConfigurationError("report format is json or text")


@dataclass
class ScanResult:
    cipher: Cipher
    key_candidates: list
    iv_candidates: dict
    segments_examined: int
    windowed: bool
    positions: dict

    def to_json(self) -> dict:
        return {
            "cipher": self.cipher.value,
            "key_candidates": [k.to_json() for k in self.key_candidates],
            "iv_candidates": [iv.to_json() for d in Direction for iv in self.iv_candidates.get(d, ())],
            "segments_examined": self.segments_examined,
            "windowed": self.windowed,
            "positions": {d.short: pos for d, pos in self.positions.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ScanResult":
        ivs = {d: [] for d in Direction}
        for obj in doc.get("iv_candidates", ()):
            iv = IvCandidate.from_json(obj)
            ivs[iv.direction].append(iv)
        return cls(Cipher(doc["cipher"]), [KeyCandidate.from_json(k) for k in doc["key_candidates"]], ivs,
                   int(doc.get("segments_examined", 0)), bool(doc.get("windowed", False)),
                   {Direction.parse(k): v for k, v in doc.get("positions", {}).items()})


@dataclass
class AnalyzeResult:
    capture: SshSessionCapture
    scan: ScanResult
    report: DecryptReport
    plaintext: Optional[SessionPlaintext]
    timings: dict
    full_scan_fallback: bool = False

    def report_json(self) -> dict:
        return {
            "session": self.capture.summary(),
            "stage_timings": self.timings,
            "key_candidates": len(self.scan.key_candidates),
            "iv_candidates": {d.short: len(v) for d, v in self.scan.iv_candidates.items()},
            "segments_examined": self.scan.segments_examined,
            "windowed": self.scan.windowed,
            "full_scan_fallback": self.full_scan_fallback,
            **self.report.to_json(),
        }


def apply_cipher_override(capture: SshSessionCapture, cipher: Optional[Cipher]) -> SshSessionCapture:
    if cipher is None or cipher is capture.negotiated_cipher:
        return capture
    log.info("cipher override: %s -> %s", capture.negotiated_cipher.value, cipher.value)
    return dataclasses.replace(capture, negotiated_cipher=cipher)


def load_snapshots(paths: Sequence[Path]) -> list[MemorySnapshot]:
    snaps = sorted((load_snapshot(p) for p in paths), key=lambda s: s.captured_after_packet)
    for a, b in zip(snaps, snaps[1:]):
        if a.captured_after_packet == b.captured_after_packet:
            raise ConfigurationError(f"snapshots {a.snapshot_id} and {b.snapshot_id} share a position")
    return snaps


def snapshot_positions(capture: SshSessionCapture, snaps: Sequence[MemorySnapshot]) -> dict:
    """Packets already sent in each direction when each snapshot was taken."""
    return {d: {s.snapshot_id: packets_sent_before(capture, s.subject_direction, s.captured_after_packet, d)
                for s in snaps}
            for d in Direction}


def scan_memory(capture: SshSessionCapture, snaps: Sequence[MemorySnapshot], *,
                thresholds: EntropyConfig = EntropyConfig(), window: ScanWindow = ScanWindow(),
                endian_second_pass: bool = False, jobs: Optional[int] = None,
                directions: Sequence[Direction] = tuple(Direction)) -> ScanResult:
    """Memory-analysis stage: IV candidates (CTR only) and key candidates."""
    if capture.mode is Mode.CTR and len(snaps) < 2:
        raise ConfigurationError("CTR analysis needs two or more snapshots")
    positions = snapshot_positions(capture, snaps)
    ivs = {d: [] for d in Direction}
    if capture.mode is Mode.CTR:
        orders = ("big", "little") if endian_second_pass else ("big",)
        for d in directions:
            for a, b in zip(snaps, snaps[1:]):
                delta = count_cipher_blocks(capture, d, positions[d][a.snapshot_id], positions[d][b.snapshot_id])
                if delta == 0:
                    log.info("%s: no blocks between %s and %s", d.short, a.snapshot_id, b.snapshot_id)
                    continue
                for order in orders:
                    ivs[d].extend(scan_ctr_iv_candidates(a, b, delta, thresholds, direction=d,
                                                         byteorder=order, jobs=jobs))
            log.info("%s: %d IV candidates", d.short, len(ivs[d]))
    anchors = [iv for d in directions for iv in ivs[d]]
    use_window = window.enabled and capture.mode is Mode.CTR and bool(anchors)
    win = window if use_window else ScanWindow(False, window.radius)
    other = snaps[1] if len(snaps) > 1 else None
    keys = scan_key_candidates(snaps[0], other, capture.key_length, thresholds, win, anchors, jobs=jobs)
    examined = key_scan_segment_count(snaps[0], other, capture.key_length, thresholds, win, anchors)
    log.info("%d key candidates from %d segments%s", len(keys), examined, " (windowed)" if use_window else "")
    return ScanResult(capture.negotiated_cipher, keys, ivs, examined, use_window, positions)


def decrypt_with(capture: SshSessionCapture, scan: ScanResult, *, jobs: Optional[int] = None,
                 directions: Sequence[Direction] = tuple(Direction)):
    return decrypt_session(capture, scan.key_candidates, scan.iv_candidates, scan.positions, directions,
                           jobs=jobs)


def analyze(config: AnalyzeConfig) -> AnalyzeResult:
    """Run every stage; if a windowed key scan finds nothing usable, rescan the whole snapshot."""
    timings = {}
    t0 = time.perf_counter()
    capture = apply_cipher_override(ingest_pcap(config.pcap_path), config.cipher)
    timings["ingest"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    snaps = load_snapshots(config.snapshot_paths)
    scan = scan_memory(capture, snaps, thresholds=config.thresholds, window=config.window,
                       endian_second_pass=config.endian_second_pass, jobs=config.jobs,
                       directions=config.directions)
    timings["memory_analysis"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fallback, rescan = False, 0.0
    try:
        plaintext, report = decrypt_with(capture, scan, jobs=config.jobs, directions=config.directions)
        if scan.windowed and not report.complete:
            raise NoValidCombinationError("windowed scan keyed only some directions", report.tried_combinations)
    except NoValidCombinationError:
        if not scan.windowed:
            raise
        log.warning("windowed key scan found no valid combination; falling back to a full scan")
        fallback = True
        t1 = time.perf_counter()
        scan = scan_memory(capture, snaps, thresholds=config.thresholds,
                           window=ScanWindow(False, config.window.radius),
                           endian_second_pass=config.endian_second_pass, jobs=config.jobs,
                           directions=config.directions)
        rescan = time.perf_counter() - t1
        timings["memory_analysis"] += rescan
        plaintext, report = decrypt_with(capture, scan, jobs=config.jobs, directions=config.directions)
    timings["decrypt_analysis"] = time.perf_counter() - t0 - rescan
    timings["total"] = sum(timings.values())
    return AnalyzeResult(capture, scan, report, plaintext, timings, fallback)
