"""Domain types shared by the ingest, scan, decrypt and parsing stages.

Everything here is immutable and free of I/O except the snapshot manifest
helpers at the bottom, which only touch the filesystem when asked to.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ManifestError, PacketParseError

BLOCK_SIZE = 16


class Mode(str, enum.Enum):
    CTR = "CTR"
    CBC = "CBC"


class Direction(str, enum.Enum):
    CLIENT_TO_SERVER = "client_to_server"
    SERVER_TO_CLIENT = "server_to_client"

    @property
    def short(self) -> str:
        return "c2s" if self is Direction.CLIENT_TO_SERVER else "s2c"

    @property
    def opposite(self) -> "Direction":
        if self is Direction.CLIENT_TO_SERVER:
            return Direction.SERVER_TO_CLIENT
        return Direction.CLIENT_TO_SERVER

    @classmethod
    def parse(cls, text: str) -> "Direction":
        text = text.lower()
        for d in cls:
            if text in (d.value, d.short):
                return d
        raise ValueError(f"unknown direction {text!r}")


C2S = Direction.CLIENT_TO_SERVER
S2C = Direction.SERVER_TO_CLIENT


class Cipher(str, enum.Enum):
    AES128_CTR = "aes128-ctr"
    AES192_CTR = "aes192-ctr"
    AES256_CTR = "aes256-ctr"
    AES128_CBC = "aes128-cbc"
    AES192_CBC = "aes192-cbc"
    AES256_CBC = "aes256-cbc"

    @property
    def ssh_name(self) -> str:
        return self.value

    @property
    def key_length(self) -> int:
        return int(self.value[3:6]) // 8

    @property
    def mode(self) -> Mode:
        return Mode.CTR if self.value.endswith("ctr") else Mode.CBC

    @classmethod
    def from_name(cls, name: str) -> "Cipher":
        """Accept either the SSH name (``aes256-ctr``) or the enum name."""
        for c in cls:
            if name.lower() == c.value or name.upper() == c.name:
                return c
        raise ValueError(f"unknown cipher {name!r}")

    @classmethod
    def for_params(cls, mode: Mode, key_bits: int) -> "Cipher":
        return cls(f"aes{key_bits}-{Mode(mode).value.lower()}")


MAC_LENGTHS = {
    "hmac-md5": 16,
    "hmac-sha1": 20,
    "hmac-sha2-256": 32,
    "hmac-sha2-512": 64,
}


# -- memory -------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryRegion:
    base_address: int
    length: int
    data: bytes = field(repr=False)

    def __post_init__(self):
        if self.length <= 0:
            raise ManifestError(f"region at {self.base_address:#x} has non-positive length")
        if len(self.data) != self.length:
            raise ManifestError(
                f"region at {self.base_address:#x}: {len(self.data)} data bytes, "
                f"length field says {self.length}"
            )
        if not 0 <= self.base_address < 1 << 64:
            raise ManifestError(f"base address {self.base_address:#x} is not 64-bit unsigned")

    @property
    def end(self) -> int:
        return self.base_address + self.length


@dataclass(frozen=True)
class MemorySnapshot:
    snapshot_id: str
    captured_after_packet: int
    regions: tuple[MemoryRegion, ...]
    subject_direction: Direction = C2S

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if self.captured_after_packet < 1:
            raise ManifestError("captured_after_packet must be >= 1")
        for prev, cur in zip(self.regions, self.regions[1:]):
            if cur.base_address < prev.base_address:
                raise ManifestError("regions must be sorted by base address")
            if cur.base_address < prev.end:
                raise ManifestError(
                    f"regions [{prev.base_address:#x},{prev.end:#x}) and "
                    f"[{cur.base_address:#x},{cur.end:#x}) overlap"
                )

    @property
    def size(self) -> int:
        return sum(r.length for r in self.regions)

    def region_at(self, address: int) -> Optional[MemoryRegion]:
        for r in self.regions:
            if r.base_address <= address < r.end:
                return r
        return None

    def read(self, address: int, length: int) -> bytes:
        r = self.region_at(address)
        if r is None or address + length > r.end:
            raise KeyError(f"{length} bytes at {address:#x} not mapped in {self.snapshot_id}")
        off = address - r.base_address
        return r.data[off:off + length]


# -- captures -----------------------------------------------------------------

@dataclass(frozen=True)
class WirePacket:
    direction: Direction
    sequence: int
    payload: bytes = field(repr=False)
    timestamp: float = 0.0

    def __post_init__(self):
        if not self.payload:
            raise ValueError("wire packet payload must be non-empty")


@dataclass(frozen=True)
class SshSessionCapture:
    client_version: str
    server_version: str
    negotiated_cipher: Cipher
    negotiated_mac_length: int
    packets: tuple[WirePacket, ...]
    newkeys_index: int
    #: index into ``packets`` of the NEWKEYS-carrying wire packet, per direction
    newkeys_by_direction: dict = field(default_factory=dict, compare=True)
    negotiation: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "packets", tuple(self.packets))
        for v in (self.client_version, self.server_version):
            if not v.startswith("SSH-2.0-"):
                raise ValueError(f"unsupported protocol version {v!r}")
        if self.negotiated_mac_length not in (16, 20, 32, 48, 64):
            raise ValueError(f"unsupported MAC length {self.negotiated_mac_length}")
        if not self.newkeys_by_direction:
            object.__setattr__(
                self, "newkeys_by_direction", {C2S: self.newkeys_index, S2C: self.newkeys_index}
            )
        object.__setattr__(self, "_encrypted", {
            d: tuple(p for i, p in enumerate(self.packets)
                     if p.direction is d and i > self.newkeys_by_direction[d])
            for d in Direction
        })

    @property
    def mode(self) -> Mode:
        return self.negotiated_cipher.mode

    @property
    def key_length(self) -> int:
        return self.negotiated_cipher.key_length

    def encrypted_packets(self, direction: Direction) -> tuple[WirePacket, ...]:
        """Wire packets carrying ciphertext in one direction, in stream order."""
        return self._encrypted[direction]

    def summary(self) -> dict:
        return {
            "client_version": self.client_version,
            "server_version": self.server_version,
            "cipher": self.negotiated_cipher.ssh_name,
            "mac_length": self.negotiated_mac_length,
            "packet_count": {d.short: sum(1 for p in self.packets if p.direction is d)
                             for d in Direction},
            "encrypted_packet_count": {d.short: len(self.encrypted_packets(d))
                                       for d in Direction},
            "newkeys_index": self.newkeys_index,
        }


@dataclass(frozen=True)
class SshBinaryPacket:
    packet_length: int
    padding_length: int
    payload: bytes = field(repr=False)
    padding: bytes = field(repr=False)
    mac: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if self.packet_length != 1 + len(self.payload) + len(self.padding):
            raise PacketParseError(
                f"packet_length {self.packet_length} != 1 + {len(self.payload)} + {len(self.padding)}"
            )
        if not 4 <= self.padding_length <= 255:
            raise PacketParseError(f"padding length {self.padding_length} outside [4, 255]")
        if len(self.padding) != self.padding_length:
            raise PacketParseError("padding field length disagrees with padding_length")

    @property
    def message_type(self) -> Optional[int]:
        return self.payload[0] if self.payload else None

    def to_bytes(self) -> bytes:
        """Unencrypted wire encoding, without the MAC."""
        return (self.packet_length.to_bytes(4, "big") + bytes([self.padding_length])
                + self.payload + self.padding)

    @classmethod
    def parse(cls, data: bytes, mac_length: int = 0) -> "SshBinaryPacket":
        """Parse one plaintext binary packet occupying all of ``data``."""
        if len(data) < 5:
            raise PacketParseError("binary packet shorter than its header")
        plen = int.from_bytes(data[:4], "big")
        if len(data) != 4 + plen + mac_length:
            raise PacketParseError(f"binary packet has {len(data)} bytes, header implies {4 + plen + mac_length}")
        pad = data[4]
        if pad + 1 > plen:
            raise PacketParseError("padding longer than packet")
        body = data[5:4 + plen]
        return cls(plen, pad, body[:len(body) - pad], body[len(body) - pad:], data[4 + plen:])


# -- candidates ---------------------------------------------------------------

@dataclass(frozen=True)
class IvCandidate:
    snapshot_id: str
    address: int
    value: bytes
    observed_delta: int
    direction: Direction = C2S
    byteorder: str = "big"

    def __post_init__(self):
        if len(self.value) != 16:
            raise ValueError("IV candidate must be 16 bytes")
        if self.observed_delta <= 0:
            raise ValueError("observed_delta must be positive")

    @property
    def counter(self) -> int:
        """The 128-bit counter the bytes encode in their stored byte order."""
        return int.from_bytes(self.value, self.byteorder)

    def to_json(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "direction": self.direction.value,
            "address": f"{self.address:#x}",
            "value": self.value.hex(),
            "observed_delta": self.observed_delta,
            "byteorder": self.byteorder,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IvCandidate":
        return cls(
            snapshot_id=obj["snapshot_id"],
            address=int(obj["address"], 0),
            value=bytes.fromhex(obj["value"]),
            observed_delta=int(obj["observed_delta"]),
            direction=Direction(obj.get("direction", C2S.value)),
            byteorder=obj.get("byteorder", "big"),
        )


@dataclass(frozen=True)
class KeyCandidate:
    snapshot_id: str
    address: int
    value: bytes
    entropy: float

    def __post_init__(self):
        if len(self.value) not in (16, 24, 32):
            raise ValueError("key candidate must be 16, 24 or 32 bytes")

    def to_json(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "address": f"{self.address:#x}",
            "value": self.value.hex(),
            "entropy": self.entropy,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KeyCandidate":
        return cls(obj.get("snapshot_id", ""), int(obj["address"], 0),
                   bytes.fromhex(obj["value"]), float(obj["entropy"]))


# -- plaintext ----------------------------------------------------------------

AUTH_METHODS = ("password", "publickey", "hostbased", "none")


@dataclass(frozen=True)
class AuthRecord:
    username: str
    service: str
    method: str
    password: Optional[str] = None

    def __post_init__(self):
        if self.method not in AUTH_METHODS:
            raise ValueError(f"unsupported auth method {self.method!r}")


class SftpKind(str, enum.Enum):
    INIT = "Init"
    VERSION = "Version"
    OPEN = "Open"
    READ = "Read"
    WRITE = "Write"
    CLOSE = "Close"
    ATTRS = "Attrs"
    STATUS = "Status"
    HANDLE = "Handle"
    DATA = "Data"
    OPAQUE = "Opaque"


@dataclass(frozen=True)
class SftpEvent:
    kind: SftpKind
    request_id: int
    filename: Optional[str] = None
    offset: Optional[int] = None
    data: Optional[bytes] = field(default=None, repr=False)
    handle: Optional[bytes] = None
    version: Optional[int] = None
    status_code: Optional[int] = None
    pflags: Optional[int] = None
    length: Optional[int] = None
    message_type: int = 0
    direction: Optional[Direction] = None
    #: global wire sequence of the SSH packet that completed this message
    wire_sequence: Optional[int] = None
    raw_filename: Optional[bytes] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind is SftpKind.WRITE and (self.offset is None or self.data is None):
            raise ValueError("Write events carry offset and data")
        if self.kind is SftpKind.OPEN and self.filename is None:
            raise ValueError("Open events carry a filename")

    def to_json(self) -> dict:
        out = {"kind": self.kind.value, "request_id": self.request_id,
               "message_type": self.message_type}
        if self.direction is not None:
            out["direction"] = self.direction.short
        for name in ("filename", "offset", "version", "status_code", "pflags", "length"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.handle is not None:
            out["handle"] = self.handle.hex()
        if self.data is not None:
            out["data_length"] = len(self.data)
        return out


@dataclass(frozen=True)
class ChannelEvent:
    kind: str  # "open", "open_confirmation", "request"
    channel: int
    channel_type: Optional[str] = None
    request_type: Optional[str] = None
    subsystem: Optional[str] = None
    command: Optional[str] = None
    direction: Optional[Direction] = None


@dataclass
class SessionPlaintext:
    auth: Optional[AuthRecord] = None
    channel_events: list = field(default_factory=list)
    sftp_events: list = field(default_factory=list)
    raw_packets: dict = field(default_factory=lambda: {C2S: [], S2C: []})
    #: global wire sequence for each entry of raw_packets (parallel lists)
    packet_sequences: dict = field(default_factory=lambda: {C2S: [], S2C: []})
    ssh_events: list = field(default_factory=list)
    files: list = field(default_factory=list)
    auth_attempts: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    rekey_detected: dict = field(default_factory=dict)


# -- snapshot manifests -------------------------------------------------------

def validate_snapshot(manifest: dict, blob: bytes) -> MemorySnapshot:
    """Build a snapshot from a parsed manifest and the blob it indexes.

    Regions may be listed in any order; they are sorted by base address and
    rejected if they overlap or reach past the end of ``blob``.
    """
    try:
        entries = manifest["regions"]
        snapshot_id = str(manifest["snapshot_id"])
        position = int(manifest["captured_after_packet"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    view = memoryview(blob)
    parsed = []
    for entry in entries:
        base = entry["base_address"]
        base = int(base, 16) if isinstance(base, str) else int(base)
        offset, length = int(entry["offset"]), int(entry["length"])
        if offset < 0 or length <= 0 or offset + length > len(blob):
            raise ManifestError(
                f"region {base:#x} (offset {offset}, length {length}) lies outside "
                f"the {len(blob)}-byte blob"
            )
        parsed.append((base, length, offset))
    parsed.sort()
    regions = [MemoryRegion(base, length, bytes(view[off:off + length]))
               for base, length, off in parsed]
    direction = Direction(manifest.get("subject_direction", C2S.value))
    return MemorySnapshot(snapshot_id, position, tuple(regions), direction)


def snapshot_manifest(snap: MemorySnapshot) -> dict:
    regions, offset = [], 0
    for r in snap.regions:
        regions.append({"base_address": f"{r.base_address:#x}", "offset": offset, "length": r.length})
        offset += r.length
    return {
        "snapshot_id": snap.snapshot_id,
        "captured_after_packet": snap.captured_after_packet,
        "subject_direction": snap.subject_direction.value,
        "regions": regions,
    }


def save_snapshot(snap: MemorySnapshot, manifest_path: os.PathLike) -> Path:
    """Write ``<stem>.json`` and the matching ``<stem>.bin`` blob."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    with open(blob_path, "wb") as fh:
        for r in snap.regions:
            fh.write(r.data)
    manifest_path.write_text(json.dumps(snapshot_manifest(snap), indent=2))
    return manifest_path


def load_snapshot(path: os.PathLike) -> MemorySnapshot:
    """Load a snapshot given either its manifest (.json) or its blob (.bin)."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc
    return validate_snapshot(manifest, blob_path.read_bytes())
