from hypothesis import given, settings
from hypothesis import strategies as st
import pytest

from memscry import sshwire as w
from memscry.errors import PacketParseError, TruncatedStreamError
from memscry.model import C2S, AuthRecord, Mode, SessionPlaintext, SftpEvent, SftpKind, SshBinaryPacket
from memscry.protocols import (
    SSH_FXP_CLOSE,
    SSH_FXP_HANDLE,
    SSH_FXP_INIT,
    SSH_FXP_OPEN,
    SSH_FXP_WRITE,
    interpret_session,
    parse_sftp_stream,
    parse_ssh_messages,
    reconstruct_files,
    sanitize_filename,
    summary_text,
    transcript_lines,
)

from .conftest import build
from .test_decrypt import true_keys


def pkt(payload):
    return SshBinaryPacket(1 + len(payload) + 4, 4, payload, bytes(4), b"")


def sftp(t, body):
    msg = bytes([t]) + body
    return w.uint32(len(msg)) + msg


def open_msg(rid, name):
    return sftp(SSH_FXP_OPEN, w.uint32(rid) + w.string(name.encode()) + w.uint32(0x1A) + w.uint32(0))


def write_msg(rid, handle, off, data):
    return sftp(SSH_FXP_WRITE, w.uint32(rid) + w.string(handle) + w.uint64(off) + w.string(data))


def handle_msg(rid, handle):
    return sftp(SSH_FXP_HANDLE, w.uint32(rid) + w.string(handle))


def close_msg(rid, handle):
    return sftp(SSH_FXP_CLOSE, w.uint32(rid) + w.string(handle))


def ev(kind, rid, seq, **kw):
    return SftpEvent(kind, rid, wire_sequence=seq, **kw)


# -- SSH layer -----------------------------------------------------------------------

def test_password_auth_parsed():
    body = (bytes([w.MSG_USERAUTH_REQUEST]) + w.string(b"peter") + w.string(b"ssh-connection")
            + w.string(b"password") + w.boolean(False) + w.string(b"An0utcropping!"))
    e, = parse_ssh_messages([pkt(body)], C2S)
    assert e.kind == "userauth_request"
    assert e.fields["auth"] == AuthRecord("peter", "ssh-connection", "password", "An0utcropping!")


def test_sftp_subsystem_request():
    body = bytes([w.MSG_CHANNEL_REQUEST]) + w.uint32(0) + w.string(b"subsystem") + w.boolean(True) + w.string(b"sftp")
    e, = parse_ssh_messages([pkt(body)])
    assert e.fields["subsystem"] == "sftp" and e.fields["want_reply"] is True


def test_unknown_message_opaque():
    e, = parse_ssh_messages([pkt(bytes([200, 1, 2, 3]))])
    assert e.opaque and e.message_type == 200


def test_empty_inputs():
    assert parse_ssh_messages([]) == []
    assert parse_sftp_stream(b"") == []
    assert reconstruct_files([]) == []


def test_truncated_auth_raises():
    body = bytes([w.MSG_USERAUTH_REQUEST]) + w.string(b"peter") + w.uint32(99)
    with pytest.raises(PacketParseError):
        parse_ssh_messages([pkt(body)])


@settings(max_examples=300)
@given(st.binary(min_size=1, max_size=120))
def test_ssh_parser_total(payload):
    try:
        events = parse_ssh_messages([pkt(payload)])
    except PacketParseError:
        return
    assert len(events) == 1 and events[0].message_type == payload[0]


# -- SFTP layer ---------------------------------------------------------------------

def test_init_version_three():
    e, = parse_sftp_stream(sftp(SSH_FXP_INIT, w.uint32(3)))
    assert e.kind is SftpKind.INIT and e.version == 3


def test_open_write_close_order():
    stream = open_msg(0, "notes.txt") + write_msg(1, b"h1", 0, b"abc") + close_msg(2, b"h1")
    kinds = [e.kind for e in parse_sftp_stream(stream, C2S)]
    assert kinds == [SftpKind.OPEN, SftpKind.WRITE, SftpKind.CLOSE]


def test_truncated_sftp_stream():
    stream = open_msg(0, "x")
    with pytest.raises(TruncatedStreamError):
        parse_sftp_stream(stream[:-3])
    with pytest.raises(TruncatedStreamError):
        parse_sftp_stream(stream + b"\x00\x00")


@settings(max_examples=300)
@given(st.binary(max_size=200))
def test_sftp_parser_total(data):
    try:
        parse_sftp_stream(data)
    except (TruncatedStreamError, PacketParseError):
        pass


def test_chunk_sequence_stamping():
    a, b = open_msg(0, "a"), open_msg(1, "b")
    stream = a + b
    events = parse_sftp_stream(stream, C2S, [(len(a) - 2, 7), (len(a) + 5, 8), (len(stream), 9)])
    assert [e.wire_sequence for e in events] == [8, 9]


# -- file reconstruction ---------------------------------------------------------------

def _upload(name, handle, chunks, close=True):
    events = [ev(SftpKind.OPEN, 1, 0, filename=name), ev(SftpKind.HANDLE, 1, 1, handle=handle)]
    seq = 2
    for off, data in chunks:
        events.append(ev(SftpKind.WRITE, 10 + seq, seq, handle=handle, offset=off, data=data))
        seq += 1
    if close:
        events.append(ev(SftpKind.CLOSE, 99, seq, handle=handle))
    return events


def test_complete_file_150_bytes():
    data = bytes(range(150))
    f, = reconstruct_files(_upload("a.bin", b"h", [(0, data[:100]), (100, data[100:])]))
    assert f.filename == "a.bin" and f.content == data and f.complete and not f.orphan


def test_gap_marks_incomplete():
    f, = reconstruct_files(_upload("a.bin", b"h", [(0, b"x" * 50), (100, b"y" * 50)]))
    assert len(f.content) == 150 and not f.complete
    assert f.content[50:100] == bytes(50)


def test_orphan_write():
    f, = reconstruct_files([ev(SftpKind.WRITE, 5, 0, handle=b"zz", offset=0, data=b"data")])
    assert f.orphan and f.filename is None and f.content == b"data"


def test_later_write_wins():
    f, = reconstruct_files(_upload("a", b"h", [(0, b"AAAA"), (2, b"BB")]))
    assert f.content == b"AABB"


def test_handle_reuse_after_close():
    events = _upload("one", b"h", [(0, b"1")])
    events += [ev(k, e.request_id, e.wire_sequence + 100, filename=e.filename, handle=e.handle,
                  offset=e.offset, data=e.data) for e, k in
               zip(_upload("two", b"h", [(0, b"2")]), [SftpKind.OPEN, SftpKind.HANDLE, SftpKind.WRITE, SftpKind.CLOSE])]
    files = reconstruct_files(events)
    assert [(f.filename, f.content) for f in files] == [("one", b"1"), ("two", b"2")]


def test_open_close_without_write():
    f, = reconstruct_files(_upload("empty.txt", b"h", []))
    assert f.filename == "empty.txt" and f.content == b"" and f.complete


@settings(max_examples=60)
@given(data=st.binary(min_size=1, max_size=4000), cuts=st.lists(st.integers(1, 3999), max_size=8),
       order=st.randoms(use_true_random=False))
def test_reconstruction_any_chunking(data, cuts, order):
    points = sorted({c for c in cuts if c < len(data)} | {0, len(data)})
    chunks = [(a, data[a:b]) for a, b in zip(points, points[1:])]
    order.shuffle(chunks)
    f, = reconstruct_files(_upload("f", b"h", chunks))
    assert f.content == data and f.complete


# -- whole session ------------------------------------------------------------------

@pytest.mark.parametrize("fmt", ["text", "binary", "pdf", "xlsx", "exe"])
def test_formats_recovered(fmt):
    _, _, truth, cap, _ = build(Mode.CTR, 128, seed=60, file_size=4000, file_format=fmt)
    from memscry.decrypt import decrypt_stream
    pt = decrypt_stream(cap, true_keys(truth, Mode.CTR))
    assert pt.files[0].sha256 == truth.file_sha256


def test_large_pdf_upload():
    from memscry.decrypt import decrypt_stream
    _, _, truth, cap, _ = build(Mode.CBC, 256, seed=61, file_size=500_000, file_format="pdf")
    pt = decrypt_stream(cap, true_keys(truth, Mode.CBC))
    f, = pt.files
    assert f.content.startswith(b"%PDF") and f.sha256 == truth.file_sha256 and f.complete


def test_interpret_session_outputs(ctr256):
    from memscry.decrypt import decrypt_stream
    _, _, truth, cap, _ = ctr256
    pt = decrypt_stream(cap, true_keys(truth, Mode.CTR))
    assert any(c.subsystem == "sftp" for c in pt.channel_events)
    assert pt.sftp_events[0].kind is SftpKind.INIT
    text = summary_text(pt)
    assert "User:        peter" in text and "Password:    An0utcropping!" in text
    lines = transcript_lines(pt)
    assert len(lines) == len(pt.ssh_events) + len(pt.sftp_events)
    again = interpret_session(SessionPlaintext(raw_packets=pt.raw_packets, packet_sequences=pt.packet_sequences))
    assert [f.sha256 for f in again.files] == [f.sha256 for f in pt.files]


def test_sanitize_filename():
    assert sanitize_filename("../../etc/passwd") == "passwd"
    assert sanitize_filename("C:\\Users\\x\\report 1.pdf") == "report_1.pdf"
    assert sanitize_filename("..") == "unnamed"
    assert sanitize_filename(None) == "unnamed"

