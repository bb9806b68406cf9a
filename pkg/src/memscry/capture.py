"""Packet-capture ingest: TCP reassembly and SSH handshake extraction.

The resulting :class:`~memscry.model.SshSessionCapture` splits each direction
into *wire packets*: the bytes of one application write, delimited by TCP
segments carrying PSH (or by the NEWKEYS boundary).  An encrypted SSH packet
small enough for one write occupies exactly one wire packet, which is what the
block-count arithmetic of the IV scan relies on.
"""
from __future__ import annotations

import io
import logging
import os
import socket
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import dpkt

from .errors import (
    AmbiguousSessionError,
    CaptureFormatError,
    CiphertextAlignmentError,
    HandshakeIncompleteError,
    IncompleteStreamError,
    InvalidInputError,
    NoSessionError,
    PacketParseError,
    UnsupportedCipherError,
    VersionParseError,
)
from .model import BLOCK_SIZE, C2S, MAC_LENGTHS, S2C, Cipher, Direction, SshSessionCapture, WirePacket
from .sshwire import KEXINIT_FIELDS, MSG_KEXINIT, MSG_NEWKEYS, Reader

log = logging.getLogger(__name__)

MAX_VERSION_LINE = 255
MAX_VERSION_PREFIX = 1024
MAX_PLAIN_PACKET = 35000

PCAP_MAGICS = {b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4", b"\x4d\x3c\xb2\xa1", b"\xa1\xb2\x3c\x4d"}
PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"


# -- frame decoding -----------------------------------------------------------

@dataclass
class _Segment:
    src: tuple
    dst: tuple
    seq: int
    flags: int
    payload: bytes
    ts: float


def read_frames(source) -> list[tuple[float, int, bytes]]:
    """Return ``(timestamp, linktype, frame)`` for every record of a pcap/pcapng file.

    ``source`` is a path or raw file bytes.
    """
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    magic = raw[:4]
    fh = io.BytesIO(raw)
    try:
        if magic in PCAP_MAGICS:
            reader = dpkt.pcap.Reader(fh)
        elif magic == PCAPNG_MAGIC:
            reader = dpkt.pcapng.Reader(fh)
        else:
            raise CaptureFormatError("not a pcap or pcapng capture")
        linktype = reader.datalink()
        return [(float(ts), linktype, bytes(buf)) for ts, buf in reader]
    except (dpkt.dpkt.NeedData, dpkt.dpkt.UnpackError, ValueError) as exc:
        if isinstance(exc, CaptureFormatError):
            raise
        raise CaptureFormatError(f"unreadable capture: {exc}") from exc


def _ip_layer(linktype: int, frame: bytes):
    if linktype == dpkt.pcap.DLT_EN10MB:
        pkt = dpkt.ethernet.Ethernet(frame).data
    elif linktype in (dpkt.pcap.DLT_RAW, 101, 228, 229):
        version = frame[0] >> 4 if frame else 0
        pkt = dpkt.ip.IP(frame) if version == 4 else dpkt.ip6.IP6(frame)
    elif linktype == dpkt.pcap.DLT_LINUX_SLL:
        pkt = dpkt.sll.SLL(frame).data
    elif linktype == dpkt.pcap.DLT_NULL:
        pkt = dpkt.loopback.Loopback(frame).data
    else:
        return None
    return pkt if isinstance(pkt, (dpkt.ip.IP, dpkt.ip6.IP6)) else None


def _addr(ip) -> str:
    family = socket.AF_INET if isinstance(ip, dpkt.ip.IP) else socket.AF_INET6
    return socket.inet_ntop(family, ip.src), socket.inet_ntop(family, ip.dst)


def _segments(frames) -> list[_Segment]:
    out = []
    for ts, linktype, frame in frames:
        try:
            ip = _ip_layer(linktype, frame)
        except (dpkt.dpkt.UnpackError, dpkt.dpkt.NeedData):
            continue
        if ip is None or not isinstance(ip.data, dpkt.tcp.TCP):
            continue
        tcp = ip.data
        src, dst = _addr(ip)
        out.append(_Segment((src, tcp.sport), (dst, tcp.dport), tcp.seq, tcp.flags,
                            bytes(tcp.data), ts))
    return out


# -- reassembly -----------------------------------------------------------------

@dataclass
class _Piece:
    offset: int
    data: bytes
    ts: float
    push: bool


@dataclass
class _Stream:
    pieces: list = field(default_factory=list)

    @property
    def data(self) -> bytes:
        return b"".join(p.data for p in self.pieces)


def _reassemble(segs: Sequence[_Segment], label: str) -> _Stream:
    """Order one direction's segments by sequence number, dropping retransmitted bytes.

    Overlapping bytes keep the earliest capture timestamp's copy; any hole in
    the sequence space raises IncompleteStreamError.
    """
    syn = [s for s in segs if s.flags & dpkt.tcp.TH_SYN]
    data_segs = [s for s in segs if s.payload]
    if not data_segs:
        return _Stream()
    if syn:
        ref = (min(syn, key=lambda s: s.ts).seq + 1) & 0xFFFFFFFF
    else:
        ref = min(data_segs, key=lambda s: (s.ts, s.seq)).seq

    def rel(s):
        r = (s.seq - ref) & 0xFFFFFFFF
        return r - (1 << 32) if r >= 1 << 31 else r

    ordered = sorted(data_segs, key=lambda s: (rel(s), s.ts, -len(s.payload), s.payload))
    start = 0 if syn else min(rel(s) for s in ordered)
    covered = start
    gaps, pieces = [], []
    for s in ordered:
        r = rel(s)
        end = r + len(s.payload)
        if end <= covered:
            continue
        if r > covered:
            gaps.append((label, covered - start, r - start))
            covered = r
        skip = covered - r
        pieces.append(_Piece(covered - start, s.payload[skip:], s.ts, bool(s.flags & dpkt.tcp.TH_PUSH)))
        covered = end
    if gaps:
        ranges = ", ".join(f"{d}[{a},{b})" for d, a, b in gaps)
        raise IncompleteStreamError(f"TCP stream has missing segments: {ranges}", gaps)
    return _Stream(pieces)


def _writes(stream: _Stream, forced: Iterable[int] = ()) -> list[tuple[int, bytes, float]]:
    """Cut a stream into application writes at PSH boundaries and ``forced`` offsets."""
    cuts = set(forced)
    for p in stream.pieces:
        if p.push:
            cuts.add(p.offset + len(p.data))
    data = stream.data
    cuts.add(len(data))
    cuts = sorted(c for c in cuts if 0 < c <= len(data))
    out, prev = [], 0
    for c in cuts:
        if c > prev:
            out.append((prev, data[prev:c], _timestamp_at(stream, prev)))
        prev = c
    return out


def _timestamp_at(stream: _Stream, offset: int) -> float:
    for p in stream.pieces:
        if p.offset <= offset < p.offset + len(p.data):
            return p.ts
    return stream.pieces[-1].ts if stream.pieces else 0.0


# -- SSH handshake ------------------------------------------------------------

def parse_version_exchange(stream_prefix: bytes) -> tuple[str, bytes]:
    """Split the identification string off the front of one direction's stream.

    Lines not starting with ``SSH-`` are skipped (servers may send a banner
    first).  Returns the identification string without its CR LF, and the
    bytes that follow it.
    """
    pos = 0
    while pos < min(len(stream_prefix), MAX_VERSION_PREFIX):
        nl = stream_prefix.find(b"\n", pos, pos + MAX_VERSION_LINE + 1)
        if nl < 0:
            break
        line = stream_prefix[pos:nl].rstrip(b"\r")
        if line.startswith(b"SSH-"):
            return line.decode("ascii", "replace"), stream_prefix[nl + 1:]
        pos = nl + 1
    raise VersionParseError("no SSH identification line in the first 1024 bytes")


@dataclass
class _Handshake:
    version: str
    kexinit: bytes
    newkeys_end: int


def _parse_handshake(data: bytes, label: str) -> _Handshake:
    version, rest = parse_version_exchange(data)
    off = len(data) - len(rest)
    kexinit = None
    while True:
        if off + 5 > len(data):
            raise HandshakeIncompleteError(f"{label}: stream ends before NEWKEYS")
        plen = int.from_bytes(data[off:off + 4], "big")
        if not 5 <= plen <= MAX_PLAIN_PACKET:
            raise PacketParseError(f"{label}: implausible cleartext packet length {plen} at offset {off}")
        end = off + 4 + plen
        if end > len(data):
            raise HandshakeIncompleteError(f"{label}: stream ends inside a handshake packet")
        msg = data[off + 5]
        if msg == MSG_KEXINIT and kexinit is None:
            kexinit = data[off:end]
        elif msg == MSG_NEWKEYS:
            if kexinit is None:
                raise HandshakeIncompleteError(f"{label}: NEWKEYS before KEXINIT")
            return _Handshake(version, kexinit, end)
        off = end


@dataclass(frozen=True)
class NegotiationResult:
    client_lists: dict
    server_lists: dict
    kex_algorithm: Optional[str]
    chosen_cipher: dict
    chosen_mac: dict
    mac_length: dict

    @property
    def kex_algorithms(self) -> str:
        return ",".join(self.client_lists["kex_algorithms"])

    def names(self, field_name: str, direction: Direction) -> str:
        side = self.client_lists if direction is C2S else self.server_lists
        return ",".join(side[field_name])


def _kexinit_lists(packet: bytes) -> dict:
    if len(packet) < 6:
        raise PacketParseError("KEXINIT packet too short")
    plen = int.from_bytes(packet[:4], "big")
    pad = packet[4]
    body = packet[5:4 + plen - pad] if plen - pad - 1 > 0 else b""
    if not body or body[0] != MSG_KEXINIT:
        raise PacketParseError("not a KEXINIT packet")
    r = Reader(body[17:])  # message number + 16-byte cookie
    return {name: r.name_list() for name in KEXINIT_FIELDS}


def _first_match(client: list[str], server: list[str]) -> Optional[str]:
    return next((name for name in client if name in server), None)


def parse_kexinit_pair(c2s: bytes, s2c: bytes) -> NegotiationResult:
    """Negotiate algorithms from the client's and server's KEXINIT packets.

    Each category resolves to the first client-preferred name the server
    also lists.  Only AES-CTR/CBC with a classic HMAC can be handled
    downstream; anything else raises UnsupportedCipherError.
    """
    client, server = _kexinit_lists(c2s), _kexinit_lists(s2c)
    ciphers, macs, lengths = {}, {}, {}
    for d, cf, mf in ((C2S, "encryption_algorithms_client_to_server", "mac_algorithms_client_to_server"),
                      (S2C, "encryption_algorithms_server_to_client", "mac_algorithms_server_to_client")):
        name = _first_match(client[cf], server[cf])
        if name is None:
            raise UnsupportedCipherError(f"{d.short}: no cipher in common")
        try:
            ciphers[d] = Cipher.from_name(name)
        except ValueError:
            raise UnsupportedCipherError(f"{d.short}: negotiated cipher {name!r} is not AES-CTR/CBC") from None
        mac = _first_match(client[mf], server[mf])
        if mac is None:
            raise UnsupportedCipherError(f"{d.short}: no MAC in common")
        if mac.endswith("-etm@openssh.com"):
            raise UnsupportedCipherError(f"{d.short}: encrypt-then-MAC mode {mac!r} is not supported")
        if mac not in MAC_LENGTHS:
            raise UnsupportedCipherError(f"{d.short}: unsupported MAC {mac!r}")
        macs[d], lengths[d] = mac, MAC_LENGTHS[mac]
    return NegotiationResult(client, server, _first_match(client["kex_algorithms"], server["kex_algorithms"]),
                             ciphers, macs, lengths)


def _handshakes(packets: Sequence[WirePacket]) -> dict:
    out = {}
    for d in Direction:
        data = b"".join(p.payload for p in packets if p.direction is d)
        out[d] = _parse_handshake(data, d.short)
    return out


def locate_newkeys_by_direction(packets: Sequence[WirePacket]) -> dict:
    """Index of the wire packet carrying each direction's NEWKEYS message."""
    result = {}
    for d, hs in _handshakes(packets).items():
        consumed = 0
        for i, p in enumerate(packets):
            if p.direction is not d:
                continue
            consumed += len(p.payload)
            if consumed >= hs.newkeys_end:
                result[d] = i
                break
    return result


def locate_newkeys(packets: Sequence[WirePacket]) -> int:
    """Index of the last NEWKEYS-carrying wire packet; later packets in each direction are ciphertext."""
    return max(locate_newkeys_by_direction(packets).values())


# -- public entry point -------------------------------------------------------

def _matches(conn: tuple, flt) -> bool:
    if flt is None:
        return True
    src_ip, src_port, dst_ip, dst_port = flt[:4]

    def hit(ep, ip, port):
        return (ip is None or ep[0] == ip) and (port is None or ep[1] == port)

    a, b = conn
    return ((hit(a, src_ip, src_port) and hit(b, dst_ip, dst_port))
            or (hit(b, src_ip, src_port) and hit(a, dst_ip, dst_port)))


def _looks_like_ssh(segs: list[_Segment]) -> bool:
    for s in sorted((s for s in segs if s.payload), key=lambda s: (s.ts, s.seq))[:4]:
        head = s.payload[:MAX_VERSION_PREFIX]
        if head.startswith(b"SSH-") or b"\nSSH-" in head:
            return True
    return False


def ingest_pcap(path, filter: Optional[tuple] = None) -> SshSessionCapture:
    """Load one SSH connection from a pcap/pcapng file.

    ``filter`` is an optional ``(src_ip, src_port, dst_ip, dst_port[, proto])``
    tuple; ``None`` entries act as wildcards and either orientation matches.
    """
    segs = _segments(read_frames(path))
    conns = defaultdict(list)
    for s in segs:
        conns[tuple(sorted((s.src, s.dst)))].append(s)
    ssh_conns = [c for c, ss in conns.items() if _matches(c, filter) and _looks_like_ssh(ss)]
    if not ssh_conns:
        raise NoSessionError("no SSH connection in capture")
    if len(ssh_conns) > 1:
        raise AmbiguousSessionError(f"{len(ssh_conns)} SSH connections match; pass a 5-tuple filter")
    conn = ssh_conns[0]
    segs = conns[conn]

    syns = [s for s in segs if s.flags & dpkt.tcp.TH_SYN and not s.flags & dpkt.tcp.TH_ACK]
    if syns:
        client = min(syns, key=lambda s: s.ts).src
    else:
        client = max(conn, key=lambda ep: ep[1])
    streams = {
        C2S: _reassemble([s for s in segs if s.src == client], "c2s"),
        S2C: _reassemble([s for s in segs if s.src != client], "s2c"),
    }
    if not streams[C2S].pieces or not streams[S2C].pieces:
        raise NoSessionError("SSH connection carries data in one direction only")

    hs = {d: _parse_handshake(streams[d].data, d.short) for d in Direction}
    negotiation = parse_kexinit_pair(hs[C2S].kexinit, hs[S2C].kexinit)
    if negotiation.chosen_cipher[C2S] is not negotiation.chosen_cipher[S2C]:
        raise UnsupportedCipherError("directions negotiated different ciphers")
    if negotiation.mac_length[C2S] != negotiation.mac_length[S2C]:
        raise UnsupportedCipherError("directions negotiated different MAC lengths")

    rows = []
    for order, d in enumerate(Direction):
        for offset, payload, ts in _writes(streams[d], forced=[hs[d].newkeys_end]):
            rows.append((ts, order, offset, d, payload))
    rows.sort(key=lambda r: r[:3])
    packets = [WirePacket(d, i, payload, ts) for i, (ts, _, _, d, payload) in enumerate(rows)]
    by_dir = locate_newkeys_by_direction(packets)
    capture = SshSessionCapture(
        client_version=hs[C2S].version,
        server_version=hs[S2C].version,
        negotiated_cipher=negotiation.chosen_cipher[C2S],
        negotiated_mac_length=negotiation.mac_length[C2S],
        packets=tuple(packets),
        newkeys_index=max(by_dir.values()),
        newkeys_by_direction=by_dir,
        negotiation=negotiation,
    )
    log.info("ingested %s: %s, %d wire packets", os.fspath(path) if not isinstance(path, bytes) else "<bytes>",
             capture.negotiated_cipher.ssh_name, len(packets))
    return capture


# -- block arithmetic -----------------------------------------------------------

def packet_blocks(capture: SshSessionCapture, packet: WirePacket) -> int:
    ct = len(packet.payload) - capture.negotiated_mac_length
    if ct <= 0 or ct % BLOCK_SIZE:
        raise CiphertextAlignmentError(
            f"wire packet {packet.sequence}: {len(packet.payload)} bytes minus a "
            f"{capture.negotiated_mac_length}-byte MAC is not a whole number of blocks"
        )
    return ct // BLOCK_SIZE


def count_cipher_blocks(capture: SshSessionCapture, direction: Direction,
                        from_packet: int, to_packet: int) -> int:
    """Cipher blocks carried by encrypted packets ``[from_packet, to_packet)`` of one direction."""
    enc = capture.encrypted_packets(direction)
    if not 0 <= from_packet <= to_packet <= len(enc):
        raise InvalidInputError(
            f"packet span [{from_packet}, {to_packet}) outside the {len(enc)} encrypted packets"
        )
    return sum(packet_blocks(capture, p) for p in enc[from_packet:to_packet])


def packets_sent_before(capture: SshSessionCapture, subject: Direction, position: int,
                        direction: Direction) -> int:
    """Translate a snapshot position into a packet count for ``direction``.

    A snapshot taken after ``position`` encrypted packets of the subject
    direction has also seen every ``direction`` packet that precedes the
    subject's ``position``-th packet on the wire.
    """
    if direction is subject:
        return position
    subj = capture.encrypted_packets(subject)
    if not 1 <= position <= len(subj):
        raise InvalidInputError(f"snapshot position {position} outside 1..{len(subj)}")
    boundary = subj[position - 1].sequence
    return sum(1 for p in capture.encrypted_packets(direction) if p.sequence < boundary)
