"""Recover SSH session keys from client memory snapshots and decrypt the captured traffic."""
from .errors import MemscryError
from .model import (
    Cipher,
    Direction,
    IvCandidate,
    KeyCandidate,
    MemoryRegion,
    MemorySnapshot,
    Mode,
    SessionPlaintext,
    SshSessionCapture,
    load_snapshot,
    save_snapshot,
)

__version__ = "0.1.0"

__all__ = [
    "Cipher", "Direction", "IvCandidate", "KeyCandidate", "MemoryRegion", "MemorySnapshot",
    "MemscryError", "Mode", "SessionPlaintext", "SshSessionCapture", "load_snapshot", "save_snapshot",
]
