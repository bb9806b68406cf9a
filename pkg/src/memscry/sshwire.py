"""SSH data-type encoding (RFC 4251 section 5) and message numbers."""
from __future__ import annotations

import struct

from .errors import PacketParseError

MSG_DISCONNECT = 1
MSG_IGNORE = 2
MSG_SERVICE_REQUEST = 5
MSG_SERVICE_ACCEPT = 6
MSG_KEXINIT = 20
MSG_NEWKEYS = 21
MSG_KEXDH_INIT = 30
MSG_KEXDH_REPLY = 31
MSG_USERAUTH_REQUEST = 50
MSG_USERAUTH_FAILURE = 51
MSG_USERAUTH_SUCCESS = 52
MSG_GLOBAL_REQUEST = 80
MSG_CHANNEL_OPEN = 90
MSG_CHANNEL_OPEN_CONFIRMATION = 91
MSG_CHANNEL_OPEN_FAILURE = 92
MSG_CHANNEL_WINDOW_ADJUST = 93
MSG_CHANNEL_DATA = 94
MSG_CHANNEL_EXTENDED_DATA = 95
MSG_CHANNEL_EOF = 96
MSG_CHANNEL_CLOSE = 97
MSG_CHANNEL_REQUEST = 98
MSG_CHANNEL_SUCCESS = 99
MSG_CHANNEL_FAILURE = 100

KEXINIT_FIELDS = (
    "kex_algorithms",
    "server_host_key_algorithms",
    "encryption_algorithms_client_to_server",
    "encryption_algorithms_server_to_client",
    "mac_algorithms_client_to_server",
    "mac_algorithms_server_to_client",
    "compression_algorithms_client_to_server",
    "compression_algorithms_server_to_client",
    "languages_client_to_server",
    "languages_server_to_client",
)


def uint32(n: int) -> bytes:
    return struct.pack(">I", n)


def uint64(n: int) -> bytes:
    return struct.pack(">Q", n)


def string(b) -> bytes:
    if isinstance(b, str):
        b = b.encode()
    return uint32(len(b)) + b


def boolean(v: bool) -> bytes:
    return b"\x01" if v else b"\x00"


def name_list(names) -> bytes:
    return string(",".join(names))


def mpint(n: int) -> bytes:
    if n == 0:
        return uint32(0)
    raw = n.to_bytes((n.bit_length() + 8) // 8, "big")
    return string(raw)


class Reader:
    """Sequential reader over an SSH message payload."""

    def __init__(self, data: bytes, ordinal=None):
        self.data = data
        self.pos = 0
        self.ordinal = ordinal

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise PacketParseError(
                f"field of {n} bytes at offset {self.pos} runs past the {len(self.data)}-byte payload",
                self.ordinal,
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def byte(self) -> int:
        return self._take(1)[0]

    def boolean(self) -> bool:
        return self.byte() != 0

    def uint32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def uint64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def string(self) -> bytes:
        return self._take(self.uint32())

    def text(self) -> str:
        return self.string().decode("utf-8", "replace")

    def name_list(self) -> list[str]:
        raw = self.string()
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError:
            raise PacketParseError("name-list is not US-ASCII", self.ordinal) from None
        if not text:
            return []
        names = text.split(",")
        if any(not n or any(c <= " " or c == "\x7f" for c in n) for n in names):
            raise PacketParseError(f"malformed name-list {text!r}", self.ordinal)
        return names

    def rest(self) -> bytes:
        return self._take(self.remaining)


def build_binary_packet(payload: bytes, block_size: int, padding: bytes) -> bytes:
    """Frame ``payload`` as packet_length || padding_length || payload || padding.

    ``padding`` must already have the right length; see :func:`padding_length_for`.
    """
    plen = 1 + len(payload) + len(padding)
    if (4 + plen) % block_size:
        raise ValueError("padding does not align the packet to the block size")
    return uint32(plen) + bytes([len(padding)]) + payload + padding


def padding_length_for(payload_length: int, block_size: int, extra_blocks: int = 0) -> int:
    """Smallest padding >= 4 aligning the packet, plus ``extra_blocks`` whole blocks."""
    pad = block_size - (5 + payload_length) % block_size
    if pad < 4:
        pad += block_size
    pad += extra_blocks * block_size
    while pad > 255:
        pad -= block_size
    return pad
