"""Key/IV validation against captured ciphertext, and full-stream decryption."""
from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher as _Cipher
from cryptography.hazmat.primitives.ciphers import algorithms, modes

from .capture import count_cipher_blocks
from .errors import (
    InvalidInputError,
    NoValidCombinationError,
    StreamDesyncError,
    TruncatedStreamError,
)
from .model import (
    BLOCK_SIZE,
    Direction,
    IvCandidate,
    KeyCandidate,
    Mode,
    SessionPlaintext,
    SshBinaryPacket,
    SshSessionCapture,
)
from .sshwire import MSG_KEXINIT

log = logging.getLogger(__name__)

MOD128 = 1 << 128
MAX_STREAM_PACKET = 256 * 1024
UNKNOWN_BYTE = b"?"


@dataclass(frozen=True)
class ValidationParams:
    mac_field_size: int
    packet_length_field_size: int = 4
    min_ssh_packet: int = 21

    def __post_init__(self):
        if self.min_ssh_packet != 21:
            raise InvalidInputError("min_ssh_packet is fixed at 21 bytes")
        if self.mac_field_size < 0:
            raise InvalidInputError("MAC size cannot be negative")


@dataclass(frozen=True)
class DirectionKeys:
    key: bytes
    initial_iv: Optional[bytes]
    mode: Mode

    def __post_init__(self):
        if len(self.key) not in (16, 24, 32):
            raise InvalidInputError("key must be 16, 24 or 32 bytes")
        if self.initial_iv is not None and len(self.initial_iv) != 16:
            raise InvalidInputError("IV must be 16 bytes")
        if self.mode is Mode.CTR and self.initial_iv is None:
            raise InvalidInputError("CTR needs an initial counter")

    def to_json(self) -> dict:
        return {"key": self.key.hex(), "mode": self.mode.value,
                "initial_iv": self.initial_iv.hex() if self.initial_iv is not None else None}

    @classmethod
    def from_json(cls, obj: dict) -> "DirectionKeys":
        iv = obj.get("initial_iv")
        return cls(bytes.fromhex(obj["key"]), bytes.fromhex(iv) if iv else None, Mode(obj["mode"]))


@dataclass(frozen=True)
class PacketStatus:
    direction: Direction
    ordinal: int
    wire_sequence: int
    decrypted: bool
    reason: str

    def to_json(self) -> dict:
        return {"direction": self.direction.short, "ordinal": self.ordinal,
                "wire_sequence": self.wire_sequence, "decrypted": self.decrypted, "reason": self.reason}


@dataclass
class DecryptReport:
    tried_combinations: int = 0
    tried_by_direction: dict = field(default_factory=dict)
    iv_states_by_direction: dict = field(default_factory=dict)
    valid: dict = field(default_factory=dict)
    per_packet_status: list = field(default_factory=list)
    elapsed: float = 0.0
    errors: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return bool(self.valid) and all(v is not None for v in self.valid.values()) and not self.errors

    def to_json(self) -> dict:
        return {
            "tried_combinations": self.tried_combinations,
            "tried_by_direction": {d.short: n for d, n in self.tried_by_direction.items()},
            "iv_states_by_direction": {d.short: n for d, n in self.iv_states_by_direction.items()},
            "valid": {d.short: (k.to_json() if k is not None else None) for d, k in self.valid.items()},
            "per_packet_status": [s.to_json() for s in self.per_packet_status],
            "errors": {d.short: e for d, e in self.errors.items()},
            "elapsed": self.elapsed,
        }


@dataclass(frozen=True)
class CombinationMatch:
    keys: DirectionKeys
    tried_combinations: int
    key_candidate: KeyCandidate
    iv_candidate: Optional[IvCandidate] = None
    iv_states: int = 1  # IV starting states consumed; CBC always chains from one


# -- single-block primitives ----------------------------------------------------

def _ecb_encrypt(key: bytes, block: bytes) -> bytes:
    return _Cipher(algorithms.AES(key), modes.ECB()).encryptor().update(block)


def _ecb_decrypt(key: bytes, block: bytes) -> bytes:
    return _Cipher(algorithms.AES(key), modes.ECB()).decryptor().update(block)


def _xor16(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(16, "big")


def header_consistent(plain: bytes, wire_length: int, params: ValidationParams) -> bool:
    """Length and padding checks on a decrypted first block.

    ``wire_length`` is the ciphertext-plus-MAC size of the record on the wire.
    """
    plen = int.from_bytes(plain[:4], "big")
    return (wire_length == plen + params.packet_length_field_size + params.mac_field_size
            and 4 <= plain[4] <= 255
            and plen >= params.min_ssh_packet - params.packet_length_field_size)


def _check_inputs(key, iv, packet, params):
    if len(key) not in (16, 24, 32):
        raise InvalidInputError(f"key length {len(key)} is not an AES key size")
    if len(iv) != 16:
        raise InvalidInputError("IV must be 16 bytes")
    if len(packet) < BLOCK_SIZE + params.mac_field_size:
        raise InvalidInputError("packet shorter than one block plus MAC")


def validate_combination(key: bytes, iv: bytes, packet: bytes, params: ValidationParams,
                         mode: Mode) -> bool:
    """Decrypt the first block of ``packet`` and test its length and padding fields."""
    _check_inputs(key, iv, packet, params)
    if Mode(mode) is Mode.CTR:
        plain = _xor16(_ecb_encrypt(key, iv), packet[:16])
    else:
        plain = _xor16(_ecb_decrypt(key, packet[:16]), iv)
    return header_consistent(plain, len(packet), params)


# -- candidate search -----------------------------------------------------------

class _KeyContexts(threading.local):
    """Per-thread cache of ECB contexts, one per candidate key."""

    def __init__(self, keys: Sequence[bytes], decrypt: bool):
        self.keys = keys
        self.decrypt = decrypt
        self.cache = {}

    def apply(self, i: int, block: bytes) -> bytes:
        ctx = self.cache.get(i)
        if ctx is None:
            c = _Cipher(algorithms.AES(self.keys[i]), modes.ECB())
            ctx = self.cache[i] = c.decryptor() if self.decrypt else c.encryptor()
        return ctx.update(block)


def _first_hit(total: int, check, jobs: Optional[int], batch: int = 256) -> Optional[int]:
    """Lowest index in ``range(total)`` for which ``check`` is true.

    Batches run on a thread pool; once any batch finds a hit, batches that
    start beyond it are skipped, so the answer matches a sequential scan.
    """
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1 or total <= batch:
        return next((i for i in range(total) if check(i)), None)
    best = [None]
    lock = threading.Lock()

    def run(start):
        for i in range(start, min(start + batch, total)):
            if best[0] is not None and best[0] < i:
                return
            if check(i):
                with lock:
                    if best[0] is None or i < best[0]:
                        best[0] = i
                return

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(run, range(0, total, batch)))
    return best[0]


def _ciphertext(capture: SshSessionCapture, packet) -> bytes:
    mac = capture.negotiated_mac_length
    return packet.payload[:len(packet.payload) - mac] if mac else packet.payload


def _position_lookup(snapshot_position, iv: IvCandidate) -> int:
    if isinstance(snapshot_position, Mapping):
        return snapshot_position[iv.snapshot_id]
    return int(snapshot_position)


def _checkable(capture: SshSessionCapture, enc, params: ValidationParams, start: int) -> list[int]:
    """Indices of packets whose size can pass the header test at all.

    Packets shorter than the minimum (a bare USERAUTH_SUCCESS is 16 bytes)
    would reject the right key, so validation skips to the next usable ones.
    """
    floor = params.min_ssh_packet + params.mac_field_size
    out = []
    for i in range(start, len(enc)):
        n = len(enc[i].payload)
        if n >= floor and (n - params.mac_field_size) % BLOCK_SIZE == 0:
            out.append(i)
        elif (n - params.mac_field_size) % BLOCK_SIZE:
            break  # misaligned: later offsets are unknowable
    return out


def search_valid_combination(keys: Sequence[KeyCandidate], ivs: Sequence[IvCandidate],
                             capture: SshSessionCapture, direction: Direction,
                             snapshot_position: Union[int, Mapping[str, int]] = 0, *,
                             jobs: Optional[int] = None) -> CombinationMatch:
    """Find the first (IV, key) pair, in search order, that decrypts two packets.

    CTR: every IV candidate is rebased to the first encrypted packet by
    subtracting the blocks sent before the snapshot it came from
    (``snapshot_position`` is that packet count, or a mapping from snapshot
    id to it); keys are tried nearest-address-first around each IV.
    CBC: IVs are not needed; each key is tested on packet 1 chained from the
    last ciphertext block of packet 0, then confirmed on packet 2.  CBC IV
    candidates, if supplied, are only tried afterwards to recover the first
    block of packet 0.
    """
    params = ValidationParams(capture.negotiated_mac_length)
    enc = capture.encrypted_packets(direction)
    keys = [k for k in keys if len(k.value) == capture.key_length]
    key_bytes = [k.value for k in keys]
    mode = capture.mode
    if not keys or not enc:
        raise NoValidCombinationError(
            "no key candidates" if not keys else f"no encrypted {direction.short} packets", 0)

    if mode is Mode.CTR:
        if not ivs:
            raise NoValidCombinationError("CTR search needs IV candidates", 0)
        ctx = _KeyContexts(key_bytes, decrypt=False)
        picks = _checkable(capture, enc, params, 0)[:2]
        if not picks:
            raise NoValidCombinationError(f"no {direction.short} packet long enough to validate", 0)
        offsets = [count_cipher_blocks(capture, direction, 0, i) for i in picks]
        targets = [enc[i].payload for i in picks]
        addresses = np.array([k.address for k in keys], dtype=np.int64)
        bases, orders = [], []
        for iv in ivs:
            sent = count_cipher_blocks(capture, direction, 0, _position_lookup(snapshot_position, iv))
            bases.append((iv.counter - sent) % MOD128)
            orders.append(np.argsort(np.abs(addresses - iv.address), kind="stable"))
        nkeys = len(keys)

        def check(i):
            j, r = divmod(i, nkeys)
            k = int(orders[j][r])
            for off, payload in zip(offsets, targets):
                ctr = ((bases[j] + off) % MOD128).to_bytes(16, "big")
                if not header_consistent(_xor16(ctx.apply(k, ctr), payload[:16]), len(payload), params):
                    return False
            return True

        total = len(ivs) * nkeys
        hit = _first_hit(total, check, jobs)
        if hit is None:
            raise NoValidCombinationError(
                f"{direction.short}: none of {total} key/IV combinations validated", total)
        j, r = divmod(hit, nkeys)
        k = int(orders[j][r])
        dk = DirectionKeys(keys[k].value, bases[j].to_bytes(16, "big"), Mode.CTR)
        return CombinationMatch(dk, hit + 1, keys[k], ivs[j], j + 1)

    # CBC
    if len(enc) < 2:
        raise NoValidCombinationError("CBC validation needs two encrypted packets", 0)
    ctx = _KeyContexts(key_bytes, decrypt=True)
    targets = [(_ciphertext(capture, enc[i - 1])[-16:], enc[i].payload)
               for i in _checkable(capture, enc, params, 1)[:2]]
    if not targets:
        raise NoValidCombinationError(f"no {direction.short} packet long enough to validate", 0)

    def check_cbc(i):
        for chain_iv, payload in targets:
            plain = _xor16(ctx.apply(i, payload[:16]), chain_iv)
            if not header_consistent(plain, len(payload), params):
                return False
        return True

    hit = _first_hit(len(keys), check_cbc, jobs)
    if hit is None:
        raise NoValidCombinationError(
            f"{direction.short}: none of {len(keys)} keys validated", len(keys))
    initial_iv, iv_match = None, None
    for iv in ivs:
        if validate_combination(keys[hit].value, iv.value, enc[0].payload, params, Mode.CBC):
            initial_iv, iv_match = iv.value, iv
            break
    return CombinationMatch(DirectionKeys(keys[hit].value, initial_iv, Mode.CBC), hit + 1,
                            keys[hit], iv_match)


# -- stream decryption ----------------------------------------------------------

@dataclass
class DirectionDecrypt:
    direction: Direction
    packets: list = field(default_factory=list)
    sequences: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    partial: list = field(default_factory=list)
    rekey_at: Optional[int] = None


def _stream_decryptor(keys: DirectionKeys, iv: bytes):
    mode = modes.CTR(iv) if keys.mode is Mode.CTR else modes.CBC(iv)
    return _Cipher(algorithms.AES(keys.key), mode).decryptor()


def decrypt_direction(capture: SshSessionCapture, direction: Direction,
                      keys: DirectionKeys) -> DirectionDecrypt:
    """Decrypt one direction's ciphertext into binary packets.

    The cipher state runs across the whole direction: CTR counters advance one
    per block, CBC chains from the previous ciphertext block.  Packets are cut
    from the decrypted stream by their own length field, so one packet may
    span several wire packets and several packets may share one.
    """
    mac = capture.negotiated_mac_length
    enc = capture.encrypted_packets(direction)
    out = DirectionDecrypt(direction)
    if not enc:
        return out
    buf = b"".join(p.payload for p in enc)
    ends = np.cumsum([len(p.payload) for p in enc])
    seqs = [p.sequence for p in enc]

    def wire_index(offset):
        return int(np.searchsorted(ends, offset, side="right"))

    pos, ordinal = 0, 0
    if keys.mode is Mode.CBC and keys.initial_iv is None:
        # the IV of the very first block is unrecoverable; start the chain one block in
        first_len = len(enc[0].payload) - mac
        if first_len < 32 or first_len % BLOCK_SIZE:
            raise StreamDesyncError("first CBC packet is not block aligned", 0)
        ctx = _stream_decryptor(keys, buf[:16])
        known = ctx.update(buf[16:first_len])
        out.partial.append((seqs[0], UNKNOWN_BYTE * 16 + known))
        out.statuses.append(PacketStatus(direction, 0, seqs[0], False,
                                         "CBC first block unrecoverable without the initial IV"))
        pos, ordinal = first_len + mac, 1
    else:
        ctx = _stream_decryptor(keys, keys.initial_iv)

    while pos < len(buf):
        if len(buf) - pos < BLOCK_SIZE:
            raise TruncatedStreamError(f"{direction.short}: stream ends inside a packet header")
        head = ctx.update(buf[pos:pos + 16])
        plen, pad = int.from_bytes(head[:4], "big"), head[4]
        if not 4 <= pad <= 255 or plen < 12 or (plen + 4) % BLOCK_SIZE or plen > MAX_STREAM_PACKET \
                or pad > plen - 1:
            raise StreamDesyncError(f"{direction.short}: implausible packet header", pos)
        need = 4 + plen + mac
        if pos + need > len(buf):
            raise TruncatedStreamError(
                f"{direction.short}: packet at offset {pos} needs {need} bytes, {len(buf) - pos} remain")
        body = head + ctx.update(buf[pos + 16:pos + 4 + plen])
        packet = SshBinaryPacket(plen, pad, body[5:4 + plen - pad], body[4 + plen - pad:4 + plen],
                                 buf[pos + 4 + plen:pos + need])
        first_wire, last_wire = wire_index(pos), wire_index(pos + need - 1)
        span = last_wire - first_wire + 1
        aligned = int(ends[last_wire]) == pos + need
        reason = "ok" if span == 1 and aligned else (
            f"reassembled from {span} wire packets" if aligned else "shares a wire packet")
        out.packets.append(packet)
        out.sequences.append(seqs[last_wire])
        out.statuses.append(PacketStatus(direction, ordinal, seqs[first_wire], True, reason))
        pos += need
        ordinal += 1
        if packet.message_type == MSG_KEXINIT:
            out.rekey_at = ordinal - 1
            if pos < len(buf):
                out.statuses.append(PacketStatus(direction, ordinal, seqs[wire_index(pos)], False,
                                                 "in-session rekey: later packets use new keys"))
            log.warning("%s: rekey after packet %d; decryption stopped", direction.short, ordinal - 1)
            break
    return out


def decrypt_stream(capture: SshSessionCapture, keys: Mapping[Direction, DirectionKeys],
                   *, report: Optional[DecryptReport] = None) -> SessionPlaintext:
    """Decrypt every direction that has keys and parse the result into events."""
    from .protocols import interpret_session

    parts = {}
    for d, k in keys.items():
        if k is None:
            continue
        parts[d] = decrypt_direction(capture, d, k)
    plaintext = SessionPlaintext()
    for d, part in parts.items():
        plaintext.raw_packets[d] = part.packets
        plaintext.packet_sequences[d] = part.sequences
        if part.rekey_at is not None:
            plaintext.rekey_detected[d] = part.rekey_at
            plaintext.warnings.append(f"{d.short}: rekey at packet {part.rekey_at}; later traffic not decrypted")
        if report is not None:
            report.per_packet_status.extend(part.statuses)
    interpret_session(plaintext)
    return plaintext


def decrypt_session(capture: SshSessionCapture, key_candidates: Sequence[KeyCandidate],
                    iv_candidates: Mapping[Direction, Sequence[IvCandidate]],
                    positions: Mapping[Direction, Union[int, Mapping[str, int]]],
                    directions: Sequence[Direction] = tuple(Direction), *,
                    jobs: Optional[int] = None) -> tuple[Optional[SessionPlaintext], DecryptReport]:
    """Search keys for each direction, then decrypt whatever validated.

    Raises NoValidCombinationError only when no direction could be keyed.
    """
    report = DecryptReport()
    t0 = time.perf_counter()
    found = {}
    for d in directions:
        try:
            match = search_valid_combination(key_candidates, iv_candidates.get(d, ()), capture, d,
                                             positions.get(d, 0), jobs=jobs)
        except NoValidCombinationError as exc:
            report.tried_by_direction[d] = exc.tried_combinations
            report.valid[d] = None
            report.errors[d] = str(exc)
            continue
        report.tried_by_direction[d] = match.tried_combinations
        report.iv_states_by_direction[d] = match.iv_states
        report.valid[d] = match.keys
        found[d] = match.keys
    report.tried_combinations = sum(report.tried_by_direction.values())
    if not found:
        report.elapsed = time.perf_counter() - t0
        raise NoValidCombinationError("no direction could be keyed", report.tried_combinations)
    plaintext = decrypt_stream(capture, found, report=report)
    report.elapsed = time.perf_counter() - t0
    return plaintext, report
