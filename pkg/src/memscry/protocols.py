"""Interpretation of decrypted SSH payloads: auth, channels, SFTP, file recovery."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import sshwire as w
from .errors import PacketParseError, TruncatedStreamError
from .model import (
    C2S,
    S2C,
    AuthRecord,
    ChannelEvent,
    Direction,
    SessionPlaintext,
    SftpEvent,
    SftpKind,
    SshBinaryPacket,
)

log = logging.getLogger(__name__)

SSH_FXP_INIT = 1
SSH_FXP_VERSION = 2
SSH_FXP_OPEN = 3
SSH_FXP_CLOSE = 4
SSH_FXP_READ = 5
SSH_FXP_WRITE = 6
SSH_FXP_SETSTAT = 9
SSH_FXP_FSETSTAT = 10
SSH_FXP_STATUS = 101
SSH_FXP_HANDLE = 102
SSH_FXP_DATA = 103
SSH_FXP_ATTRS = 105

SSH_FXF_READ = 0x01
SSH_FXF_WRITE = 0x02
SSH_FXF_CREAT = 0x08
SSH_FXF_TRUNC = 0x10

_MESSAGE_NAMES = {
    w.MSG_DISCONNECT: "disconnect",
    w.MSG_IGNORE: "ignore",
    w.MSG_SERVICE_REQUEST: "service_request",
    w.MSG_SERVICE_ACCEPT: "service_accept",
    w.MSG_USERAUTH_REQUEST: "userauth_request",
    w.MSG_USERAUTH_FAILURE: "userauth_failure",
    w.MSG_USERAUTH_SUCCESS: "userauth_success",
    w.MSG_CHANNEL_OPEN: "channel_open",
    w.MSG_CHANNEL_OPEN_CONFIRMATION: "channel_open_confirmation",
    w.MSG_CHANNEL_WINDOW_ADJUST: "channel_window_adjust",
    w.MSG_CHANNEL_DATA: "channel_data",
    w.MSG_CHANNEL_EOF: "channel_eof",
    w.MSG_CHANNEL_CLOSE: "channel_close",
    w.MSG_CHANNEL_REQUEST: "channel_request",
    w.MSG_CHANNEL_SUCCESS: "channel_success",
    w.MSG_CHANNEL_FAILURE: "channel_failure",
}


@dataclass(frozen=True)
class SshEvent:
    kind: str
    message_type: int
    ordinal: int
    direction: Optional[Direction] = None
    wire_sequence: Optional[int] = None
    fields: dict = field(default_factory=dict)

    @property
    def opaque(self) -> bool:
        return self.kind == "opaque"

    def to_json(self) -> dict:
        out = {"kind": self.kind, "message_type": self.message_type, "ordinal": self.ordinal}
        if self.direction is not None:
            out["direction"] = self.direction.short
        for k, v in self.fields.items():
            if isinstance(v, bytes):
                out[k + "_length"] = len(v)
            elif isinstance(v, AuthRecord):
                out[k] = {"username": v.username, "service": v.service, "method": v.method,
                          "password": v.password}
            else:
                out[k] = v
        return out


@dataclass
class RecoveredFile:
    filename: Optional[str]
    content: bytes = field(repr=False)
    complete: bool
    handle: Optional[bytes] = None
    orphan: bool = False

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.content).hexdigest()


# -- SSH messages -------------------------------------------------------------

def _parse_one(payload: bytes, ordinal: int) -> tuple[str, dict]:
    r = w.Reader(payload, ordinal)
    msg = r.byte()
    if msg in (w.MSG_SERVICE_REQUEST, w.MSG_SERVICE_ACCEPT):
        return _MESSAGE_NAMES[msg], {"service": r.text()}
    if msg == w.MSG_USERAUTH_REQUEST:
        user, service, method = r.text(), r.text(), r.text()
        fields = {"username": user, "service": service, "method": method}
        if method == "password":
            changing = r.boolean()
            password = r.text()
            if changing:
                fields["new_password"] = r.text()
            fields["auth"] = AuthRecord(user, service, method, password)
        elif method in ("publickey", "hostbased", "none"):
            if method == "publickey":
                fields["has_signature"] = r.boolean()
                fields["algorithm"] = r.text()
            fields["auth"] = AuthRecord(user, service, method)
        return "userauth_request", fields
    if msg == w.MSG_USERAUTH_FAILURE:
        return "userauth_failure", {"methods": r.name_list(), "partial_success": r.boolean()}
    if msg == w.MSG_USERAUTH_SUCCESS:
        return "userauth_success", {}
    if msg == w.MSG_CHANNEL_OPEN:
        return "channel_open", {"channel_type": r.text(), "sender_channel": r.uint32(),
                                "initial_window": r.uint32(), "max_packet": r.uint32()}
    if msg == w.MSG_CHANNEL_OPEN_CONFIRMATION:
        return "channel_open_confirmation", {"recipient_channel": r.uint32(), "sender_channel": r.uint32(),
                                             "initial_window": r.uint32(), "max_packet": r.uint32()}
    if msg == w.MSG_CHANNEL_WINDOW_ADJUST:
        return "channel_window_adjust", {"recipient_channel": r.uint32(), "bytes": r.uint32()}
    if msg == w.MSG_CHANNEL_REQUEST:
        fields = {"recipient_channel": r.uint32(), "request_type": r.text(), "want_reply": r.boolean()}
        if fields["request_type"] == "subsystem":
            fields["subsystem"] = r.text()
        elif fields["request_type"] == "exec":
            fields["command"] = r.text()
        return "channel_request", fields
    if msg == w.MSG_CHANNEL_DATA:
        return "channel_data", {"recipient_channel": r.uint32(), "data": r.string()}
    if msg in (w.MSG_CHANNEL_EOF, w.MSG_CHANNEL_CLOSE, w.MSG_CHANNEL_SUCCESS, w.MSG_CHANNEL_FAILURE):
        return _MESSAGE_NAMES[msg], {"recipient_channel": r.uint32()}
    if msg == w.MSG_DISCONNECT:
        return "disconnect", {"reason_code": r.uint32(), "description": r.text()}
    return "opaque", {"length": len(payload)}


def parse_ssh_messages(packets: Sequence[SshBinaryPacket], direction: Optional[Direction] = None,
                       sequences: Optional[Sequence[int]] = None) -> list[SshEvent]:
    """One event per packet; unrecognised message numbers become opaque events."""
    events = []
    for i, p in enumerate(packets):
        seq = sequences[i] if sequences is not None else None
        if not p.payload:
            events.append(SshEvent("opaque", -1, i, direction, seq, {"length": 0}))
            continue
        kind, fields = _parse_one(p.payload, i)
        events.append(SshEvent(kind, p.payload[0], i, direction, seq, fields))
    return events


# -- SFTP ---------------------------------------------------------------------

def _sftp_event(body: bytes, direction, seq) -> SftpEvent:
    r = w.Reader(body)
    t = r.byte()
    common = {"message_type": t, "direction": direction, "wire_sequence": seq}
    if t in (SSH_FXP_INIT, SSH_FXP_VERSION):
        version = r.uint32()
        kind = SftpKind.INIT if t == SSH_FXP_INIT else SftpKind.VERSION
        return SftpEvent(kind, 0, version=version, **common)
    rid = r.uint32()
    if t == SSH_FXP_OPEN:
        raw = r.string()
        pflags = r.uint32()
        return SftpEvent(SftpKind.OPEN, rid, filename=raw.decode("utf-8", "replace"),
                         raw_filename=raw, pflags=pflags, **common)
    if t == SSH_FXP_WRITE:
        handle, offset, data = r.string(), r.uint64(), r.string()
        return SftpEvent(SftpKind.WRITE, rid, handle=handle, offset=offset, data=data, **common)
    if t == SSH_FXP_READ:
        handle, offset, length = r.string(), r.uint64(), r.uint32()
        return SftpEvent(SftpKind.READ, rid, handle=handle, offset=offset, length=length, **common)
    if t == SSH_FXP_CLOSE:
        return SftpEvent(SftpKind.CLOSE, rid, handle=r.string(), **common)
    if t == SSH_FXP_HANDLE:
        return SftpEvent(SftpKind.HANDLE, rid, handle=r.string(), **common)
    if t == SSH_FXP_STATUS:
        return SftpEvent(SftpKind.STATUS, rid, status_code=r.uint32(), **common)
    if t == SSH_FXP_DATA:
        return SftpEvent(SftpKind.DATA, rid, data=r.string(), **common)
    if t in (SSH_FXP_SETSTAT, SSH_FXP_FSETSTAT, SSH_FXP_ATTRS):
        target = r.string() if t != SSH_FXP_ATTRS else None
        if t == SSH_FXP_SETSTAT:
            return SftpEvent(SftpKind.ATTRS, rid, filename=target.decode("utf-8", "replace"), **common)
        return SftpEvent(SftpKind.ATTRS, rid, handle=target, **common)
    return SftpEvent(SftpKind.OPAQUE, rid, **common)


def parse_sftp_stream(channel_data: bytes, direction: Optional[Direction] = None,
                      chunk_sequences: Optional[Sequence[tuple[int, int]]] = None) -> list[SftpEvent]:
    """Split a subsystem byte stream into length-prefixed SFTP messages.

    ``chunk_sequences`` optionally maps stream offsets to wire sequences as
    ``(end_offset, sequence)`` pairs; each event is stamped with the sequence
    of the chunk its last byte arrived in.
    """
    events, pos = [], 0
    ends = chunk_sequences or []
    ci = 0
    while pos < len(channel_data):
        if len(channel_data) - pos < 4:
            raise TruncatedStreamError(f"SFTP stream ends inside a length field at offset {pos}")
        length = int.from_bytes(channel_data[pos:pos + 4], "big")
        end = pos + 4 + length
        if length == 0 or end > len(channel_data):
            raise TruncatedStreamError(
                f"SFTP message at offset {pos} declares {length} bytes, {len(channel_data) - pos - 4} remain")
        while ci < len(ends) and ends[ci][0] < end:
            ci += 1
        seq = ends[ci][1] if ci < len(ends) else None
        try:
            events.append(_sftp_event(channel_data[pos + 4:end], direction, seq))
        except PacketParseError as exc:
            raise PacketParseError(f"malformed SFTP message at offset {pos}: {exc}") from None
        pos = end
    return events


def reconstruct_files(events: Iterable[SftpEvent]) -> list[RecoveredFile]:
    """Assemble uploaded (WRITE) and downloaded (READ/DATA) file contents.

    Handles are bound to filenames through OPEN and its HANDLE reply; when
    events carry wire sequences they are replayed in wire order so a handle
    reused after CLOSE maps to the right file.  Writes at overlapping offsets
    resolve in favour of the later one.
    """
    events = list(events)
    if all(e.wire_sequence is not None for e in events):
        events.sort(key=lambda e: e.wire_sequence)
    opens, reads = {}, {}
    live = {}
    files = []

    def finish(entry):
        if entry["chunks"] or entry["filename"] is not None:
            files.append(_assemble(entry))

    for e in events:
        if e.kind is SftpKind.OPEN:
            opens[e.request_id] = e.filename
        elif e.kind is SftpKind.HANDLE and e.request_id in opens:
            if e.handle in live:
                finish(live.pop(e.handle))
            live[e.handle] = {"filename": opens.pop(e.request_id), "handle": e.handle,
                              "chunks": [], "orphan": False}
        elif e.kind is SftpKind.WRITE:
            entry = live.get(e.handle)
            if entry is None:
                log.warning("write to unknown handle %s", e.handle.hex())
                entry = live[e.handle] = {"filename": None, "handle": e.handle, "chunks": [], "orphan": True}
            entry["chunks"].append((e.offset, e.data))
        elif e.kind is SftpKind.READ:
            reads[e.request_id] = (e.handle, e.offset)
        elif e.kind is SftpKind.DATA and e.request_id in reads:
            handle, offset = reads.pop(e.request_id)
            entry = live.get(handle)
            if entry is None:
                entry = live[handle] = {"filename": None, "handle": handle, "chunks": [], "orphan": True}
            entry["chunks"].append((offset, e.data))
        elif e.kind is SftpKind.CLOSE and e.handle in live:
            finish(live.pop(e.handle))
    for entry in live.values():
        finish(entry)
    return files


def _assemble(entry) -> RecoveredFile:
    extent = max((off + len(d) for off, d in entry["chunks"]), default=0)
    content = bytearray(extent)
    covered = bytearray(extent)
    for off, data in entry["chunks"]:
        content[off:off + len(data)] = data
        covered[off:off + len(data)] = b"\x01" * len(data)
    complete = all(covered) if extent else True
    return RecoveredFile(entry["filename"], bytes(content), complete, entry["handle"], entry["orphan"])


# -- session ------------------------------------------------------------------

def interpret_session(plaintext: SessionPlaintext) -> SessionPlaintext:
    """Populate auth, channel, SFTP and file fields from ``raw_packets``."""
    events = []
    for d in (C2S, S2C):
        events.extend(parse_ssh_messages(plaintext.raw_packets.get(d, []), d,
                                         plaintext.packet_sequences.get(d) or None))
    events.sort(key=lambda e: (e.wire_sequence if e.wire_sequence is not None else 0,
                               e.direction is S2C, e.ordinal))
    plaintext.ssh_events = events

    # channel numbering: client-side id from OPEN, server-side id from CONFIRMATION
    client_ids, server_to_client = {}, {}
    sftp_ids = {C2S: set(), S2C: set()}
    scp_ids = {C2S: set(), S2C: set()}
    for e in events:
        f = e.fields
        if e.kind == "userauth_request":
            plaintext.auth_attempts.append(f.get("auth"))
        elif e.kind == "userauth_success" and plaintext.auth_attempts:
            plaintext.auth = plaintext.auth_attempts[-1]
        elif e.kind == "channel_open":
            client_ids[f["sender_channel"]] = f["channel_type"]
            plaintext.channel_events.append(ChannelEvent("open", f["sender_channel"],
                                                         channel_type=f["channel_type"], direction=e.direction))
        elif e.kind == "channel_open_confirmation":
            server_to_client[f["sender_channel"]] = f["recipient_channel"]
            plaintext.channel_events.append(ChannelEvent("open_confirmation", f["sender_channel"],
                                                         direction=e.direction))
        elif e.kind == "channel_request":
            plaintext.channel_events.append(ChannelEvent(
                "request", f["recipient_channel"], request_type=f["request_type"],
                subsystem=f.get("subsystem"), command=f.get("command"), direction=e.direction))
            local = f["recipient_channel"]
            remote = server_to_client.get(local, local) if e.direction is C2S else local
            target = None
            if f.get("subsystem") == "sftp":
                target = sftp_ids
            elif f["request_type"] == "exec" and (f.get("command") or "").startswith("scp"):
                target = scp_ids
                plaintext.warnings.append("SCP transfer recorded as opaque channel data")
            if target is not None:
                # C2S data is addressed to the server's id, S2C data to the client's
                target[C2S].add(local if e.direction is C2S else remote)
                target[S2C].add(remote if e.direction is C2S else local)
    if plaintext.auth is None and plaintext.auth_attempts:
        plaintext.auth = next((a for a in reversed(plaintext.auth_attempts) if a is not None), None)

    sftp_events = []
    for d in (C2S, S2C):
        stream, marks = bytearray(), []
        for e in events:
            if e.direction is d and e.kind == "channel_data" and e.fields["recipient_channel"] in sftp_ids[d]:
                stream += e.fields["data"]
                marks.append((len(stream), e.wire_sequence))
        if stream:
            sftp_events.extend(parse_sftp_stream(bytes(stream), d, marks))
    if all(e.wire_sequence is not None for e in sftp_events):
        sftp_events.sort(key=lambda e: e.wire_sequence)
    plaintext.sftp_events = sftp_events
    plaintext.files = reconstruct_files(sftp_events)
    return plaintext


# -- output -------------------------------------------------------------------

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def sanitize_filename(name: Optional[str], fallback: str = "unnamed") -> str:
    base = (name or "").replace("\\", "/").rsplit("/", 1)[-1]
    base = _UNSAFE.sub("_", base).strip("._")
    return base or fallback


def transcript_lines(plaintext: SessionPlaintext) -> list[str]:
    """JSON-lines transcript: SSH events then SFTP events."""
    lines = [json.dumps({"layer": "ssh", **e.to_json()}) for e in plaintext.ssh_events]
    lines += [json.dumps({"layer": "sftp", **e.to_json()}) for e in plaintext.sftp_events]
    return lines


def summary_text(plaintext: SessionPlaintext, preview: int = 64) -> str:
    """Human-readable digest of the fields an analyst looks for first."""
    out = []
    a = plaintext.auth
    if a is not None:
        out.append(f"User:        {a.username}")
        out.append(f"Service:     {a.service}")
        out.append(f"Method:      {a.method}")
        if a.password is not None:
            out.append(f"Password:    {a.password}")
    for c in plaintext.channel_events:
        if c.kind == "open":
            out.append(f"Channel:     {c.channel_type} (id {c.channel})")
        elif c.kind == "request":
            detail = c.subsystem or c.command or ""
            out.append(f"Request:     {c.request_type} {detail}".rstrip())
    for f in plaintext.files:
        text = f.content[:preview].decode("utf-8", "replace").replace("\n", " ")
        state = "complete" if f.complete else "incomplete"
        out.append(f"File:        {f.filename or '<unknown handle>'} ({len(f.content)} bytes, {state})")
        out.append(f"Contents:    {text}{'...' if len(f.content) > preview else ''}")
    for wmsg in plaintext.warnings:
        out.append(f"Warning:     {wmsg}")
    return "\n".join(out) + "\n"
