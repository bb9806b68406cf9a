"""memscry command line: synth, ingest, scan, decrypt, analyze, entropy."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .capture import ingest_pcap
from .errors import (
    CiphertextAlignmentError,
    ConfigurationError,
    IngestError,
    InvalidInputError,
    ManifestError,
    MemscryError,
    NoValidCombinationError,
    PacketParseError,
)
from .fixtures import FixtureSpec, NoiseModel, write_fixture
from .memory import EntropyConfig, ScanWindow, entropy_histogram
from .model import Cipher, Direction, Mode, load_snapshot
from .pipeline import (
    AnalyzeConfig,
    ScanResult,
    analyze,
    apply_cipher_override,
    decrypt_with,
    load_snapshots,
    scan_memory,
)
from .protocols import sanitize_filename, summary_text, transcript_lines

log = logging.getLogger("memscry")

EXIT_OK, EXIT_ERROR, EXIT_NO_COMBINATION, EXIT_INGEST, EXIT_CONFIG = 0, 1, 2, 3, 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NoValidCombinationError):
        return EXIT_NO_COMBINATION
    if isinstance(exc, (IngestError, PacketParseError, CiphertextAlignmentError)):
        return EXIT_INGEST
    if isinstance(exc, (ConfigurationError, ManifestError, InvalidInputError)):
        return EXIT_CONFIG
    return EXIT_ERROR


# -- argument groups ------------------------------------------------------------

def _cipher_arg(text: str) -> Cipher:
    try:
        return Cipher.from_name(text)
    except (MemscryError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_thresholds(p):
    d = EntropyConfig()
    p.add_argument("--threshold-256", type=float, default=d.threshold_256, help="entropy floor for 32-byte keys")
    p.add_argument("--threshold-192", type=float, default=d.threshold_192, help="entropy floor for 24-byte keys")
    p.add_argument("--threshold-128", type=float, default=d.threshold_128, help="entropy floor for 16-byte keys")
    p.add_argument("--stride", type=int, default=d.scan_stride, help=argparse.SUPPRESS)


def _add_scan(p):
    p.add_argument("--pcap", required=True, type=Path)
    p.add_argument("--snapshot", action="append", type=Path, default=[], required=True,
                   help="snapshot manifest (.json) or blob (.bin); repeat for each extract")
    p.add_argument("--cipher", type=_cipher_arg, default=None,
                   help="override the negotiated cipher, e.g. aes256-ctr")
    _add_thresholds(p)
    p.add_argument("--window-radius", type=int, default=1024)
    p.add_argument("--no-window", action="store_true", help="scan every region instead of near IV candidates")
    p.add_argument("--little-endian-pass", action="store_true", help="also read counters little-endian")


def _add_common(p):
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: all CPUs)")
    p.add_argument("--format", choices=("json", "text"), default="json", help="stdout report format")
    p.add_argument("--direction", choices=("c2s", "s2c", "both"), default="both")


def _thresholds(args) -> EntropyConfig:
    return EntropyConfig(args.threshold_256, args.threshold_192, args.threshold_128, args.stride)


def _directions(args) -> tuple:
    return tuple(Direction) if args.direction == "both" else (Direction.parse(args.direction),)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memscry", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a fixture session, snapshots and ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("CTR", "CBC"), default="CTR")
    p.add_argument("--bits", type=int, choices=(128, 192, 256), default=256)
    p.add_argument("--mac", default="hmac-sha2-256")
    p.add_argument("--file-size", type=int, default=1024)
    p.add_argument("--file-format", choices=("text", "binary", "pdf", "xlsx", "exe"), default="text")
    p.add_argument("--payload", type=Path, default=None, help="upload this file instead of a generated one")
    p.add_argument("--filename", default="plaintext.txt")
    p.add_argument("--username", default="peter")
    p.add_argument("--password", default="An0utcropping!")
    p.add_argument("--noise", choices=[m.value for m in NoiseModel], default=NoiseModel.MIXED_REALISTIC.value)
    p.add_argument("--memory-size", type=int, default=16 << 20)
    p.add_argument("--positions", type=int, nargs="+", default=[1, 2])
    p.add_argument("--key-iv-distance", type=int, default=None)
    p.add_argument("--decoys", type=int, default=0)
    p.add_argument("--shadows", type=int, default=2)
    p.add_argument("--capture-format", choices=("pcap", "pcapng"), default="pcap")
    p.add_argument("--ipv6", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="summarise the SSH session in a capture")
    p.add_argument("--pcap", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("scan", help="find IV and key candidates in snapshots")
    _add_scan(p)
    _add_common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("decrypt", help="validate candidates and decrypt the capture")
    p.add_argument("--pcap", required=True, type=Path)
    p.add_argument("--candidates", required=True, type=Path, help="candidates JSON written by scan")
    p.add_argument("--cipher", type=_cipher_arg, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("analyze", help="ingest, scan, decrypt and parse in one run")
    _add_scan(p)
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("entropy", help="entropy exceedance histogram of a snapshot")
    p.add_argument("--snapshot", required=True, type=Path)
    p.add_argument("--segment-length", type=int, default=32)
    p.add_argument("--edges", type=float, nargs="+", default=[i / 2 for i in range(11)])
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--tsv", type=Path, default=None, help="also write a gnuplot-ready TSV here")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_entropy)
    return parser


# -- output helpers ---------------------------------------------------------------

def _emit(doc: dict, out: Path | None, name: str):
    text = json.dumps(doc, indent=2, default=str)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")
    return text


def _write_plaintext(out: Path, plaintext) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "transcript.jsonl").write_text("\n".join(transcript_lines(plaintext)) + "\n")
    (out / "summary.txt").write_text(summary_text(plaintext) + "\n")
    written = []
    files_dir = out / "files"
    for f in plaintext.files:
        files_dir.mkdir(exist_ok=True)
        name = sanitize_filename(f.filename, "orphan")
        stem, n = name, 1
        while name in written:
            n += 1
            name = f"{stem}.{n}"
        (files_dir / name).write_bytes(f.content)
        written.append(name)
    return written


def _print_report(doc: dict, fmt: str, plaintext=None):
    if fmt == "json":
        print(json.dumps(doc, indent=2, default=str))
        return
    for key in ("session", "stage_timings", "tried_by_direction", "errors"):
        if key in doc:
            print(f"{key}: {json.dumps(doc[key], default=str)}")
    if plaintext is not None:
        print(summary_text(plaintext))


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    payload = args.payload.read_bytes() if args.payload else None
    spec = FixtureSpec(mode=Mode(args.mode), key_length_bits=args.bits, mac_name=args.mac,
                       file_payload=payload, file_size=args.file_size, file_format=args.file_format,
                       filename=args.filename, username=args.username, password=args.password,
                       noise_model=NoiseModel(args.noise), snapshot_positions=tuple(args.positions),
                       key_iv_distance=args.key_iv_distance, seed=args.seed, memory_size=args.memory_size,
                       shadow_counters=args.shadows, decoy_counters=args.decoys, ipv6=args.ipv6,
                       capture_format=args.capture_format)
    paths = write_fixture(spec, args.out)
    print(json.dumps({"pcap": str(paths["pcap"]), "snapshots": [str(p) for p in paths["snapshots"]],
                      "truth": str(paths["truth"])}, indent=2))
    return EXIT_OK


def cmd_ingest(args) -> int:
    capture = ingest_pcap(args.pcap)
    print(_emit(capture.summary(), args.out, "session.json"))
    return EXIT_OK


def _scan(args):
    capture = apply_cipher_override(ingest_pcap(args.pcap), args.cipher)
    snaps = load_snapshots(args.snapshot)
    window = ScanWindow(not args.no_window, args.window_radius)
    scan = scan_memory(capture, snaps, thresholds=_thresholds(args), window=window,
                       endian_second_pass=args.little_endian_pass, jobs=args.jobs,
                       directions=_directions(args))
    return capture, scan


def cmd_scan(args) -> int:
    _, scan = _scan(args)
    text = _emit(scan.to_json(), args.out, "candidates.json")
    if args.format == "json":
        print(text)
    else:
        print(f"{len(scan.key_candidates)} key candidates, "
              + ", ".join(f"{len(v)} {d.short} IV candidates" for d, v in scan.iv_candidates.items()))
    return EXIT_OK


def _finish(doc, plaintext, args) -> int:
    if args.out is not None:
        _emit(doc, args.out, "report.json")
        if plaintext is not None:
            doc["files_written"] = _write_plaintext(args.out, plaintext)
            _emit(doc, args.out, "report.json")
    _print_report(doc, args.format, plaintext)
    complete = all(doc["valid"].get(d.short) is not None for d in _directions(args))
    return EXIT_OK if complete else EXIT_NO_COMBINATION


def cmd_decrypt(args) -> int:
    capture = apply_cipher_override(ingest_pcap(args.pcap), args.cipher)
    scan = ScanResult.from_json(json.loads(args.candidates.read_text()))
    if scan.cipher.key_length != capture.key_length:
        raise ConfigurationError(f"candidates were scanned for {scan.cipher.value}, "
                                 f"capture uses {capture.negotiated_cipher.value}")
    plaintext, report = decrypt_with(capture, scan, jobs=args.jobs, directions=_directions(args))
    doc = {"session": capture.summary(), **report.to_json()}
    return _finish(doc, plaintext, args)


def cmd_analyze(args) -> int:
    config = AnalyzeConfig(args.pcap, args.snapshot, args.cipher, _thresholds(args),
                           ScanWindow(not args.no_window, args.window_radius), args.out,
                           args.little_endian_pass, args.format, args.jobs, _directions(args))
    result = analyze(config)
    if args.out is not None:
        _emit(result.scan.to_json(), args.out, "candidates.json")
    return _finish(result.report_json(), result.plaintext, args)


def cmd_entropy(args) -> int:
    snap = load_snapshot(args.snapshot)
    hist = entropy_histogram(snap, args.segment_length, args.edges, args.stride)
    if args.tsv is not None:
        args.tsv.write_text(hist.to_tsv())
    print(_emit(hist.to_json(), args.out, "histogram.json"))
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("MEMSCRY_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MemscryError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
