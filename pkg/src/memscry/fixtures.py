"""Ground-truth generator: synthetic SSH/SFTP captures and matching memory snapshots.

A :class:`FixtureSpec` fixes everything (cipher, file, noise, layout, seed);
:func:`synth_session` produces a pcap plus a :class:`GroundTruth`, and
:func:`synth_memory` produces the process snapshot taken after a given number
of outgoing encrypted packets.  Same seed, same bytes.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import io
import json
import socket
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import dpkt
import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher as _Cipher
from cryptography.hazmat.primitives.ciphers import algorithms, modes

from . import sshwire as w
from .errors import ConfigurationError, ManifestError, UnsupportedCipherError
from .memory import EntropyConfig, shannon_entropy
from .model import (
    C2S,
    MAC_LENGTHS,
    S2C,
    AuthRecord,
    Cipher,
    Direction,
    MemoryRegion,
    MemorySnapshot,
    Mode,
    save_snapshot,
)

MOD128 = 1 << 128
_HASHES = {"hmac-md5": "md5", "hmac-sha1": "sha1", "hmac-sha2-256": "sha256", "hmac-sha2-512": "sha512"}

_WORDS = (
    "the of and to in is that for it as was with be by on not he this are or his from at which but "
    "have an they you were her she there been one all we their has would when if so no what can more "
    "will out up about into them then some could time only new these two may first any my now such "
    "like other how after over also did many before must through back years where much your way well "
    "down should because each just those people how too little state good very make world still own "
    "see men work long get here between both life being under never day same another know while last "
    "might us great old year off come since against go came right used take three limestone path "
    "outcropping silhouette beside shadow river valley stone winter morning").split()

_PATHS = ("C:\\Windows\\System32\\", "C:\\Program Files\\PuTTY\\", "/usr/lib/x86_64-linux-gnu/",
          "HKEY_LOCAL_MACHINE\\SOFTWARE\\", "/home/peter/", "C:\\Users\\peter\\AppData\\Local\\")


class NoiseModel(str, enum.Enum):
    ZEROS = "Zeros"
    UNIFORM_RANDOM = "UniformRandom"
    MIXED_REALISTIC = "MixedRealistic"


@dataclass(frozen=True)
class Plant:
    artefact: str  # "key", "iv", "shadow", "decoy"
    address: int
    direction: Direction = C2S


@dataclass(frozen=True)
class FixtureSpec:
    mode: Mode = Mode.CTR
    key_length_bits: int = 256
    mac_name: str = "hmac-sha2-256"
    file_payload: Optional[bytes] = None
    file_size: int = 1024
    file_format: str = "text"
    filename: str = "plaintext.txt"
    username: str = "peter"
    password: str = "An0utcropping!"
    noise_model: NoiseModel = NoiseModel.MIXED_REALISTIC
    planted_layout: tuple = ()
    snapshot_positions: tuple = (1, 2)
    key_iv_distance: Optional[int] = None
    seed: int = 0
    memory_size: int = 1 << 20
    churn_fraction: float = 0.05
    shadow_counters: int = 2
    decoy_counters: int = 0
    segment_budget: int = 1460
    push_every_segment: bool = False
    sftp_write_chunk: int = 24000
    channel_data_max: int = 16384
    client_version: str = "SSH-2.0-PuTTY_Release_0.70"
    server_version: str = "SSH-2.0-OpenSSH_6.6.1p1 Ubuntu-2ubuntu2"
    server_port: int = 2222
    ipv6: bool = False
    capture_format: str = "pcap"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "noise_model", NoiseModel(self.noise_model))
        object.__setattr__(self, "snapshot_positions", tuple(self.snapshot_positions))
        object.__setattr__(self, "planted_layout", tuple(self.planted_layout))
        if self.key_length_bits not in (128, 192, 256):
            raise ConfigurationError("key_length_bits must be 128, 192 or 256")
        need = 2 if self.mode is Mode.CTR else 1
        if len(self.snapshot_positions) < need:
            raise ConfigurationError(f"{self.mode.value} fixtures need >= {need} snapshot positions")
        if list(self.snapshot_positions) != sorted(set(self.snapshot_positions)) or self.snapshot_positions[0] < 1:
            raise ConfigurationError("snapshot positions must be distinct, ascending and >= 1")
        if self.capture_format not in ("pcap", "pcapng"):
            raise ConfigurationError("capture_format is pcap or pcapng")

    @property
    def cipher(self) -> Cipher:
        return Cipher.for_params(self.mode, self.key_length_bits)

    @property
    def key_length(self) -> int:
        return self.key_length_bits // 8


@dataclass
class GroundTruth:
    cipher: str
    mac_name: str
    mac_length: int
    client_version: str
    server_version: str
    keys: dict
    initial_ivs: dict
    block_counts: dict
    record_order: list
    cbc_last_blocks: dict
    username: str
    password: str
    filename: str
    file_size: int
    file_sha256: str
    key_regenerations: int = 0
    plaintext_records: int = 0

    @property
    def auth(self) -> AuthRecord:
        return AuthRecord(self.username, "ssh-connection", "password", self.password)

    def key(self, d: Direction) -> bytes:
        return bytes.fromhex(self.keys[d.short])

    def initial_iv(self, d: Direction) -> bytes:
        return bytes.fromhex(self.initial_ivs[d.short])

    def records_before(self, subject: Direction, position: int, d: Direction) -> int:
        """Encrypted ``d`` records sent before the snapshot at ``position``."""
        if d is subject:
            return position
        seen_subject = seen = 0
        for short in self.record_order:
            if short == subject.short:
                seen_subject += 1
                if seen_subject == position:
                    return seen
            elif short == d.short:
                seen += 1
        raise ConfigurationError(f"position {position} beyond the session's {subject.short} packets")

    def iv_at(self, d: Direction, position: int, subject: Direction = C2S) -> bytes:
        """Cipher IV state held in memory at a snapshot position."""
        n = self.records_before(subject, position, d)
        if Cipher(self.cipher).mode is Mode.CTR:
            value = (int.from_bytes(self.initial_iv(d), "big") + sum(self.block_counts[d.short][:n])) % MOD128
            return value.to_bytes(16, "big")
        if n == 0:
            return self.initial_iv(d)
        return bytes.fromhex(self.cbc_last_blocks[d.short][n - 1])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(**obj)


# -- file payloads --------------------------------------------------------------

def _text(rng: np.random.Generator, size: int) -> bytes:
    out, n = [], 0
    while n < size:
        words = [_WORDS[i] for i in rng.integers(0, len(_WORDS), 12)]
        line = (" ".join(words).capitalize() + ".\n").encode()
        out.append(line)
        n += len(line)
    return b"".join(out)[:size]


def make_payload(spec: FixtureSpec, rng: np.random.Generator) -> bytes:
    if spec.file_payload is not None:
        return spec.file_payload
    size = spec.file_size
    fmt = spec.file_format
    if fmt == "text":
        return _text(rng, size)
    body = rng.bytes(size)
    headers = {"binary": b"", "pdf": b"%PDF-1.4\n%\xe2\xe3\xcf\xd3\n", "xlsx": b"PK\x03\x04\x14\x00\x06\x00",
               "exe": b"MZ\x90\x00\x03\x00\x00\x00\x04\x00\x00\x00\xff\xff\x00\x00"}
    if fmt not in headers:
        raise ConfigurationError(f"unknown file format {fmt!r}")
    head = headers[fmt][:size]
    return head + body[len(head):]


# -- SSH transport ----------------------------------------------------------------

class _Transport:
    """One direction of the binary packet protocol, as the sender sees it."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.seq = 0
        self.encryptor = None
        self.mac_key = None
        self.mac_hash = None
        self.mode = None
        self.last_block = None

    def start_encryption(self, key: bytes, iv: bytes, mode: Mode, mac_name: str, mac_key: bytes):
        m = modes.CTR(iv) if mode is Mode.CTR else modes.CBC(iv)
        self.encryptor = _Cipher(algorithms.AES(key), m).encryptor()
        self.mode = mode
        self.mac_key = mac_key
        self.mac_hash = _HASHES[mac_name]

    def frame(self, payload: bytes) -> tuple[bytes, int]:
        """Return the wire record and the number of cipher blocks it carries (0 if cleartext)."""
        block = 16 if self.encryptor is not None else 8
        pad = w.padding_length_for(len(payload), block, int(self.rng.integers(0, 3)))
        packet = w.build_binary_packet(payload, block, self.rng.bytes(pad))
        seq = self.seq
        self.seq = (self.seq + 1) & 0xFFFFFFFF
        if self.encryptor is None:
            return packet, 0
        ct = self.encryptor.update(packet)
        self.last_block = ct[-16:]
        mac = hmac.new(self.mac_key, w.uint32(seq) + packet, self.mac_hash).digest()
        return ct + mac, len(packet) // 16


# -- TCP framing -------------------------------------------------------------------

class _Wire:
    def __init__(self, spec: FixtureSpec, rng: np.random.Generator):
        fam = socket.AF_INET6 if spec.ipv6 else socket.AF_INET
        if spec.ipv6:
            self.addr = {C2S: "fd00:137::12", S2C: "fd00:137::85"}
        else:
            self.addr = {C2S: "192.168.137.12", S2C: "192.168.137.85"}
        self.raw = {d: socket.inet_pton(fam, a) for d, a in self.addr.items()}
        self.port = {C2S: int(rng.integers(49152, 65535)), S2C: spec.server_port}
        self.mac = {C2S: b"\x00\x16\x3e\x11\x22\x33", S2C: b"\x00\x16\x3e\x44\x55\x66"}
        self.seq = {C2S: int(rng.integers(0, 1 << 32)), S2C: int(rng.integers(0, 1 << 32))}
        self.ipv6 = spec.ipv6
        self.budget = spec.segment_budget
        self.push_every = spec.push_every_segment
        self.frames = []
        self.ts = 1_500_000_000.0

    def _emit(self, d: Direction, flags: int, data: bytes = b""):
        o = d.opposite
        tcp = dpkt.tcp.TCP(sport=self.port[d], dport=self.port[o], seq=self.seq[d] & 0xFFFFFFFF,
                           ack=self.seq[o] & 0xFFFFFFFF, flags=flags, win=64240, data=data)
        if self.ipv6:
            ip = dpkt.ip6.IP6(src=self.raw[d], dst=self.raw[o], nxt=6, hlim=64, data=tcp, plen=len(tcp))
            eth_type = dpkt.ethernet.ETH_TYPE_IP6
        else:
            ip = dpkt.ip.IP(src=self.raw[d], dst=self.raw[o], p=6, ttl=64, data=tcp)
            eth_type = dpkt.ethernet.ETH_TYPE_IP
        eth = dpkt.ethernet.Ethernet(src=self.mac[d], dst=self.mac[o], type=eth_type, data=ip)
        self.frames.append((self.ts, bytes(eth)))
        self.ts += 0.0005
        self.seq[d] += len(data) + (1 if flags & (dpkt.tcp.TH_SYN | dpkt.tcp.TH_FIN) else 0)

    def open(self):
        self._emit(C2S, dpkt.tcp.TH_SYN)
        self._emit(S2C, dpkt.tcp.TH_SYN | dpkt.tcp.TH_ACK)
        self._emit(C2S, dpkt.tcp.TH_ACK)

    def send(self, d: Direction, data: bytes):
        """One application write: split to the segment budget, PSH on the last piece."""
        for i in range(0, len(data), self.budget):
            last = i + self.budget >= len(data)
            flags = dpkt.tcp.TH_ACK | (dpkt.tcp.TH_PUSH if last or self.push_every else 0)
            self._emit(d, flags, data[i:i + self.budget])

    def close(self):
        self._emit(C2S, dpkt.tcp.TH_FIN | dpkt.tcp.TH_ACK)
        self._emit(S2C, dpkt.tcp.TH_FIN | dpkt.tcp.TH_ACK)
        self._emit(C2S, dpkt.tcp.TH_ACK)

    def pcap_bytes(self, fmt: str = "pcap") -> bytes:
        buf = io.BytesIO()
        if fmt == "pcapng":
            writer = dpkt.pcapng.Writer(buf, snaplen=65535)
        else:
            writer = dpkt.pcap.Writer(buf, snaplen=65535)
        for ts, frame in self.frames:
            writer.writepkt(frame, ts=ts)
        return buf.getvalue()


# -- session synthesis --------------------------------------------------------------

def _rngs(seed: int):
    session, memory, keys = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(session), memory, np.random.default_rng(keys)


def draw_key(rng: np.random.Generator, length: int, config: EntropyConfig = EntropyConfig()) -> tuple[bytes, int]:
    """Uniform random key, redrawn while its entropy is at or below the scan threshold."""
    threshold = config.threshold_for(length)
    redraws = 0
    while True:
        key = rng.bytes(length)
        if shannon_entropy(key) > threshold:
            return key, redraws
        redraws += 1


def _kexinit(rng, spec: FixtureSpec, server: bool) -> bytes:
    chosen = spec.cipher.ssh_name
    others = [c.ssh_name for c in Cipher if c.ssh_name != chosen]
    ciphers = [chosen] + others if not server else others[::-1] + [chosen]
    macs_all = ["hmac-sha2-256", "hmac-sha1", "hmac-sha2-512", "hmac-md5"]
    macs = [spec.mac_name] + [m for m in macs_all if m != spec.mac_name]
    if server:
        macs = macs[::-1]
    lists = {
        "kex_algorithms": ["diffie-hellman-group14-sha1", "diffie-hellman-group-exchange-sha256"],
        "server_host_key_algorithms": ["ssh-rsa"],
        "encryption_algorithms_client_to_server": ciphers,
        "encryption_algorithms_server_to_client": ciphers,
        "mac_algorithms_client_to_server": macs,
        "mac_algorithms_server_to_client": macs,
        "compression_algorithms_client_to_server": ["none"],
        "compression_algorithms_server_to_client": ["none"],
        "languages_client_to_server": [],
        "languages_server_to_client": [],
    }
    body = bytes([w.MSG_KEXINIT]) + rng.bytes(16)
    body += b"".join(w.name_list(lists[f]) for f in w.KEXINIT_FIELDS)
    return body + w.boolean(False) + w.uint32(0)


def _sftp(msg_type: int, body: bytes) -> bytes:
    return w.uint32(1 + len(body)) + bytes([msg_type]) + body


def synth_session(spec: FixtureSpec) -> tuple[bytes, GroundTruth]:
    """Build a pcap of one password-authenticated SFTP upload, plus its ground truth."""
    if spec.mac_name not in MAC_LENGTHS:
        raise UnsupportedCipherError(f"fixture MAC {spec.mac_name!r} not supported")
    rng, _, key_rng = _rngs(spec.seed)
    payload = make_payload(spec, rng)
    keys, redraws, ivs = {}, 0, {}
    for d in (C2S, S2C):
        keys[d], n = draw_key(key_rng, spec.key_length)
        redraws += n
        ivs[d] = key_rng.bytes(16)

    wire = _Wire(spec, rng)
    tx = {C2S: _Transport(rng), S2C: _Transport(rng)}
    blocks = {C2S.short: [], S2C.short: []}
    order, last_blocks = [], {C2S.short: [], S2C.short: []}
    plaintext_records = 0

    def send(d: Direction, message: bytes):
        nonlocal plaintext_records
        record, nblocks = tx[d].frame(message)
        if nblocks:
            blocks[d.short].append(nblocks)
            order.append(d.short)
            last_blocks[d.short].append(tx[d].last_block.hex())
        else:
            plaintext_records += 1
        wire.send(d, record)

    wire.open()
    wire.send(S2C, spec.server_version.encode() + b"\r\n")
    wire.send(C2S, spec.client_version.encode() + b"\r\n")
    send(C2S, _kexinit(rng, spec, server=False))
    send(S2C, _kexinit(rng, spec, server=True))
    send(C2S, bytes([w.MSG_KEXDH_INIT]) + w.mpint(int.from_bytes(b"\x01" + rng.bytes(255), "big")))
    send(S2C, bytes([w.MSG_KEXDH_REPLY]) + w.string(w.string("ssh-rsa") + rng.bytes(270))
         + w.mpint(int.from_bytes(b"\x01" + rng.bytes(255), "big"))
         + w.string(w.string("ssh-rsa") + w.string(rng.bytes(256))))
    send(S2C, bytes([w.MSG_NEWKEYS]))
    tx[S2C].start_encryption(keys[S2C], ivs[S2C], spec.mode, spec.mac_name, rng.bytes(64))
    send(C2S, bytes([w.MSG_NEWKEYS]))
    tx[C2S].start_encryption(keys[C2S], ivs[C2S], spec.mode, spec.mac_name, rng.bytes(64))

    client_ch, server_ch = 256, 0
    send(C2S, bytes([w.MSG_SERVICE_REQUEST]) + w.string("ssh-userauth"))
    send(S2C, bytes([w.MSG_SERVICE_ACCEPT]) + w.string("ssh-userauth"))
    send(C2S, bytes([w.MSG_USERAUTH_REQUEST]) + w.string(spec.username) + w.string("ssh-connection")
         + w.string("password") + w.boolean(False) + w.string(spec.password))
    send(S2C, bytes([w.MSG_USERAUTH_SUCCESS]))
    send(C2S, bytes([w.MSG_CHANNEL_OPEN]) + w.string("session") + w.uint32(client_ch)
         + w.uint32(0x7FFFFFFF) + w.uint32(0x8000))
    send(S2C, bytes([w.MSG_CHANNEL_OPEN_CONFIRMATION]) + w.uint32(client_ch) + w.uint32(server_ch)
         + w.uint32(0x7FFFFFFF) + w.uint32(0x8000))
    send(C2S, bytes([w.MSG_CHANNEL_REQUEST]) + w.uint32(server_ch) + w.string("subsystem")
         + w.boolean(True) + w.string("sftp"))
    send(S2C, bytes([w.MSG_CHANNEL_SUCCESS]) + w.uint32(client_ch))

    def channel(d: Direction, data: bytes):
        recipient = server_ch if d is C2S else client_ch
        for i in range(0, len(data), spec.channel_data_max):
            send(d, bytes([w.MSG_CHANNEL_DATA]) + w.uint32(recipient)
                 + w.string(data[i:i + spec.channel_data_max]))

    channel(C2S, _sftp(1, w.uint32(3)))
    channel(S2C, _sftp(2, w.uint32(3)))
    handle = rng.bytes(4)
    rid = 0
    channel(C2S, _sftp(3, w.uint32(rid) + w.string(spec.filename) + w.uint32(0x1A) + w.uint32(0)))
    channel(S2C, _sftp(102, w.uint32(rid) + w.string(handle)))
    for off in range(0, len(payload), spec.sftp_write_chunk):
        rid += 1
        chunk = payload[off:off + spec.sftp_write_chunk]
        channel(C2S, _sftp(6, w.uint32(rid) + w.string(handle) + w.uint64(off) + w.string(chunk)))
        channel(S2C, _sftp(101, w.uint32(rid) + w.uint32(0) + w.string("Success") + w.string("")))
    rid += 1
    channel(C2S, _sftp(4, w.uint32(rid) + w.string(handle)))
    channel(S2C, _sftp(101, w.uint32(rid) + w.uint32(0) + w.string("Success") + w.string("")))
    send(C2S, bytes([w.MSG_CHANNEL_EOF]) + w.uint32(server_ch))
    send(C2S, bytes([w.MSG_CHANNEL_CLOSE]) + w.uint32(server_ch))
    send(S2C, bytes([w.MSG_CHANNEL_CLOSE]) + w.uint32(client_ch))
    send(C2S, bytes([w.MSG_DISCONNECT]) + w.uint32(11) + w.string("end") + w.string(""))
    wire.close()

    truth = GroundTruth(
        cipher=spec.cipher.value,
        mac_name=spec.mac_name,
        mac_length=MAC_LENGTHS[spec.mac_name],
        client_version=spec.client_version,
        server_version=spec.server_version,
        keys={d.short: keys[d].hex() for d in (C2S, S2C)},
        initial_ivs={d.short: ivs[d].hex() for d in (C2S, S2C)},
        block_counts=blocks,
        record_order=order,
        cbc_last_blocks=last_blocks,
        username=spec.username,
        password=spec.password,
        filename=spec.filename,
        file_size=len(payload),
        file_sha256=hashlib.sha256(payload).hexdigest(),
        key_regenerations=redraws,
        plaintext_records=plaintext_records,
    )
    return wire.pcap_bytes(spec.capture_format), truth


# -- memory synthesis -------------------------------------------------------------

_REGION_SIZES = np.array([64, 128, 256, 512, 1024]) * 1024


def _layout_regions(spec: FixtureSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    regions, total = [], 0
    base = 0x000001D0_00000000 + int(rng.integers(0, 1 << 12)) * 0x10000
    while total < spec.memory_size:
        size = int(rng.choice(_REGION_SIZES))
        size = min(size, spec.memory_size - total)
        size = max(4096, size - size % 4096)
        regions.append((base, size))
        total += size
        base += size + int(rng.integers(1, 64)) * 0x10000
    return regions


def _mixed_noise(rng: np.random.Generator, size: int) -> bytes:
    out = bytearray()
    kinds = ("zeros", "ascii", "utf16", "pointers", "ints", "fill", "random")
    weights = np.array([0.14, 0.10, 0.24, 0.22, 0.20, 0.06, 0.04])
    weights = weights / weights.sum()
    hi_words = [rng.integers(0x7FF6_0000, 0x7FFF_0000) for _ in range(6)]
    while len(out) < size:
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        n = int(rng.integers(64, 4096)) & ~7
        if kind == "zeros":
            chunk = bytes(n)
        elif kind in ("ascii", "utf16"):
            words = [_WORDS[i] for i in rng.integers(0, len(_WORDS), n // 5 + 1)]
            if rng.random() < 0.3:
                words.insert(0, _PATHS[int(rng.integers(len(_PATHS)))])
            text = " ".join(words)
            chunk = text.encode("utf-16-le") if kind == "utf16" else text.encode()
            chunk = chunk[:n] + bytes(8)
        elif kind == "pointers":
            count = n // 8
            hi = np.array(hi_words, dtype=np.uint64)[rng.integers(0, len(hi_words), count)]
            lo = rng.integers(0, 1 << 14, count).astype(np.uint64) << np.uint64(4)
            vals = (hi << np.uint64(16)) | lo
            vals[rng.random(count) < 0.25] = 0
            chunk = vals.astype("<u8").tobytes()
        elif kind == "ints":
            count = n // 4
            vals = rng.geometric(0.02, count).astype("<u4")
            chunk = vals.tobytes()
        elif kind == "fill":
            chunk = bytes([int(rng.choice([0xFF, 0xCC, 0xAB, 0xFE]))]) * n
        else:
            chunk = rng.bytes(int(rng.integers(16, 160)))
        out += chunk
    return bytes(out[:size])


def _noise(model: NoiseModel, rng: np.random.Generator, size: int) -> bytes:
    if model is NoiseModel.ZEROS:
        return bytes(size)
    if model is NoiseModel.UNIFORM_RANDOM:
        return rng.bytes(size)
    return _mixed_noise(rng, size)


@dataclass
class _Placement:
    regions: list
    churn: set
    plants: list  # (artefact, direction, address, base_value)


def _plan(spec: FixtureSpec, truth: GroundTruth) -> _Placement:
    """Region layout, churn set and artefact addresses: identical for every position."""
    mem_seq = np.random.SeedSequence(spec.seed).spawn(3)[1]
    rng = np.random.default_rng(mem_seq.spawn(1)[0])
    regions = _layout_regions(spec, rng)
    n = len(regions)
    n_churn = int(round(spec.churn_fraction * n)) if n > 1 else 0
    n_churn = min(n_churn, n - 1)
    churn = set(int(i) for i in rng.choice(n, n_churn, replace=False)) if n_churn else set()
    static = [i for i in range(n) if i not in churn]
    taken = []

    def free(addr, length):
        return all(addr + length + 64 <= a or b + 64 <= addr for a, b in taken)

    def region_of(addr):
        for i, (base, size) in enumerate(regions):
            if base <= addr < base + size:
                return i
        return None

    def reserve(addr, length, allow_churn=False):
        i = region_of(addr)
        if i is None or addr + length > regions[i][0] + regions[i][1]:
            raise ManifestError(f"planted artefact at {addr:#x} falls outside the snapshot regions")
        if i in churn and not allow_churn:
            raise ManifestError(f"planted artefact at {addr:#x} falls in a churning region")
        if not free(addr, length):
            raise ManifestError(f"planted artefact at {addr:#x} collides with another")
        taken.append((addr, addr + length))

    def pick(length, pool=None):
        pool = static if pool is None else pool
        for _ in range(10000):
            i = pool[int(rng.integers(len(pool)))]
            base, size = regions[i]
            addr = base + int(rng.integers(8, (size - length - 72) // 8)) * 8
            if free(addr, length):
                taken.append((addr, addr + length))
                return addr
        raise ManifestError("could not place artefact; enlarge memory_size")

    plants = []
    explicit = {(p.artefact, p.direction): p.address for p in spec.planted_layout}
    for p in spec.planted_layout:
        length = spec.key_length if p.artefact == "key" else 16
        reserve(p.address, length)
    for d in (C2S, S2C):
        iv_addr = explicit.get(("iv", d))
        if iv_addr is None:
            for _ in range(10000):
                iv_addr = pick(16)
                if spec.key_iv_distance is None or ("key", d) in explicit:
                    break
                k = iv_addr + spec.key_iv_distance
                i = region_of(k)
                if i is not None and i not in churn and k + spec.key_length <= sum(regions[i]) \
                        and free(k, spec.key_length):
                    break
                taken.pop()
        key_addr = explicit.get(("key", d))
        if key_addr is None:
            if spec.key_iv_distance is not None:
                key_addr = iv_addr + spec.key_iv_distance
                reserve(key_addr, spec.key_length)
            else:
                key_addr = pick(spec.key_length)
        plants.append(("iv", d, iv_addr, None))
        plants.append(("key", d, key_addr, None))
    if spec.mode is Mode.CTR:
        for d in (C2S, S2C):
            for _ in range(spec.shadow_counters):
                plants.append(("shadow", d, pick(16), int.from_bytes(rng.bytes(16), "big")))
    positions = spec.snapshot_positions
    true_deltas = set()
    if spec.mode is Mode.CTR:
        for d in (C2S, S2C):
            counts = truth.block_counts[d.short]
            for a in positions:
                for b in positions:
                    if a < b:
                        na, nb = truth.records_before(C2S, a, d), truth.records_before(C2S, b, d)
                        true_deltas.add(sum(counts[na:nb]))
    everywhere = list(range(n))
    for _ in range(spec.decoy_counters):
        while True:
            step = int(rng.integers(1, 4096))
            if all(step * (b - a) not in true_deltas for a in positions for b in positions if a < b):
                break
        plants.append(("decoy", None, pick(16, everywhere), (int.from_bytes(rng.bytes(16), "big"), step)))
    return _Placement(regions, churn, plants)


def synth_memory(spec: FixtureSpec, truth: GroundTruth, position: int) -> MemorySnapshot:
    """Client process memory after ``position`` outgoing encrypted packets."""
    if position not in spec.snapshot_positions:
        raise ConfigurationError(f"position {position} is not one of {spec.snapshot_positions}")
    plan = _plan(spec, truth)
    mem_seq = np.random.SeedSequence(spec.seed).spawn(3)[1]
    noise_seq = mem_seq.spawn(2)[1]
    region_seqs = noise_seq.spawn(len(plan.regions))
    buffers = []
    for i, (base, size) in enumerate(plan.regions):
        seq = region_seqs[i]
        if i in plan.churn:
            seq = np.random.SeedSequence(list(seq.entropy if isinstance(seq.entropy, list) else [seq.entropy])
                                         + [i, position])
        buffers.append(bytearray(_noise(spec.noise_model, np.random.default_rng(seq), size)))

    def put(addr, value: bytes):
        for (base, size), buf in zip(plan.regions, buffers):
            if base <= addr < base + size:
                buf[addr - base:addr - base + len(value)] = value
                return
        raise ManifestError(f"address {addr:#x} unmapped")

    for artefact, d, addr, extra in plan.plants:
        if artefact == "key":
            put(addr, truth.key(d))
        elif artefact == "iv":
            put(addr, truth.iv_at(d, position))
        elif artefact == "shadow":
            n = truth.records_before(C2S, position, d)
            put(addr, ((extra + sum(truth.block_counts[d.short][:n])) % MOD128).to_bytes(16, "big"))
        elif artefact == "decoy":
            base_value, step = extra
            put(addr, ((base_value + step * position) % MOD128).to_bytes(16, "big"))
    regions = tuple(MemoryRegion(base, size, bytes(buf)) for (base, size), buf in zip(plan.regions, buffers))
    return MemorySnapshot(f"snapshot_{position}", position, regions, C2S)


def planted_addresses(spec: FixtureSpec, truth: GroundTruth) -> dict:
    """Where each artefact lives: ``{("key"|"iv", direction): address}`` plus lists for shadows/decoys."""
    plan = _plan(spec, truth)
    out = {"shadow": [], "decoy": []}
    for artefact, d, addr, _ in plan.plants:
        if artefact in ("key", "iv"):
            out[(artefact, d)] = addr
        else:
            out[artefact].append((d, addr))
    return out


def write_fixture(spec: FixtureSpec, outdir) -> dict:
    """Write fixture.pcap, snapshot_<k>.{bin,json} and truth.json into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    pcap, truth = synth_session(spec)
    (outdir / "fixture.pcap").write_bytes(pcap)
    snaps = []
    for p in spec.snapshot_positions:
        path = outdir / f"snapshot_{p}.json"
        save_snapshot(synth_memory(spec, truth, p), path)
        snaps.append(path)
    addresses = planted_addresses(spec, truth)
    doc = truth.to_json()
    doc["planted"] = {f"{a}_{d.short}": f"{addr:#x}" for (a, d), addr in
                      ((k, v) for k, v in addresses.items() if isinstance(k, tuple))}
    (outdir / "truth.json").write_text(json.dumps(doc, indent=2))
    return {"pcap": outdir / "fixture.pcap", "snapshots": snaps, "truth": outdir / "truth.json"}


def load_truth(path) -> GroundTruth:
    doc = json.loads(Path(path).read_text())
    doc.pop("planted", None)
    return GroundTruth.from_json(doc)
