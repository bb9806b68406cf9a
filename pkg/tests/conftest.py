import functools

import pytest

from memscry.capture import ingest_pcap
from memscry.fixtures import FixtureSpec, synth_memory, synth_session
from memscry.model import Mode

ACCEPTANCE = {}


@functools.lru_cache(maxsize=32)
def build(mode=Mode.CTR, bits=256, seed=1, memory_size=1 << 20, **kw):
    """Synthesize (spec, pcap, truth, capture, snapshots) once per parameter set."""
    spec = FixtureSpec(mode=mode, key_length_bits=bits, seed=seed, memory_size=memory_size, **kw)
    pcap, truth = synth_session(spec)
    snaps = [synth_memory(spec, truth, p) for p in spec.snapshot_positions]
    return spec, pcap, truth, ingest_pcap(pcap), snaps


@pytest.fixture(scope="session")
def ctr256():
    return build(Mode.CTR, 256, seed=11, file_size=20000)


@pytest.fixture(scope="session")
def cbc128():
    return build(Mode.CBC, 128, seed=12, file_size=3000)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
