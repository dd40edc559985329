"""Identity, hashing, partitioning and metadata record types.

Every other module builds on these: 256-bit directory ids, the 49-bit
directory fingerprint (17-bit set index + 32-bit tag), (pid, name) keys
with their canonical byte encodings, and the placement rule that maps a
key to its owner server.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

MASK64 = (1 << 64) - 1

DIR_ID_BYTES = 32
ROOT_ID = b"\x00" * DIR_ID_BYTES

# Default fingerprint geometry: 2^17 registers per stage, 32-bit tags.
DEFAULT_INDEX_BITS = 17
DEFAULT_TAG_BITS = 32

KIND_FILE = "file"
KIND_DIR = "dir"

_FP_DOMAIN = 0x66696E67  # domain separator so fingerprints and ids differ


def _mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hash64(data: bytes, seed: int = 0) -> int:
    """Seedable 64-bit non-cryptographic hash (splitmix-style mixing)."""
    h = _mix64((seed & MASK64) ^ 0x9E3779B97F4A7C15)
    for i in range(0, len(data), 8):
        chunk = int.from_bytes(data[i : i + 8].ljust(8, b"\x00"), "big")
        h = _mix64(h ^ chunk)
    return _mix64(h ^ len(data))


def valid_name(name: bytes) -> bool:
    return (
        isinstance(name, bytes)
        and 1 <= len(name) <= 255
        and b"/" not in name
        and b"\x00" not in name
    )


@dataclass(frozen=True, slots=True)
class Fingerprint:
    """49-bit directory fingerprint: upper bits select the register index,
    the low 32 bits are the stored tag. Tag 0 is the empty-register
    sentinel and is never produced."""

    index: int
    tag: int

    @property
    def as_int(self) -> int:
        return (self.index << 32) | self.tag

    def to_bytes(self) -> bytes:
        # Wire form: 64-bit big-endian, upper bits zero.
        return self.as_int.to_bytes(8, "big")

    @staticmethod
    def from_bytes(raw: bytes) -> "Fingerprint":
        v = int.from_bytes(raw, "big")
        return Fingerprint(index=v >> 32, tag=v & 0xFFFFFFFF)

    @staticmethod
    def from_int(v: int) -> "Fingerprint":
        return Fingerprint(index=v >> 32, tag=v & 0xFFFFFFFF)


@dataclass(frozen=True, slots=True)
class HashConfig:
    """Geometry and seed for fingerprints and placement.

    index_bits/tag_bits default to the full 17/32 split; tests shrink them
    to manufacture collisions and exhaustively exercise the register set.
    """

    seed: int = 0
    index_bits: int = DEFAULT_INDEX_BITS
    tag_bits: int = DEFAULT_TAG_BITS


def fingerprint_of(pid: bytes, name: bytes, cfg: HashConfig = HashConfig()) -> Fingerprint:
    """Deterministic fingerprint of a directory key (pid, name)."""
    h = hash64(pid + b"\x1f" + name, seed=cfg.seed ^ _FP_DOMAIN)
    index = (h >> 32) & ((1 << cfg.index_bits) - 1)
    tag = h & ((1 << cfg.tag_bits) - 1)
    if tag == 0:
        tag = 1
    return Fingerprint(index, tag)


@dataclass(frozen=True, slots=True, order=True)
class InodeKey:
    """Metadata key: parent directory id + component name."""

    pid: bytes
    name: bytes

    def encode(self) -> bytes:
        # 32-byte pid | 1-byte name length | name bytes
        return self.pid + bytes([len(self.name)]) + self.name

    @staticmethod
    def decode(raw: bytes, offset: int = 0) -> tuple["InodeKey", int]:
        pid = raw[offset : offset + DIR_ID_BYTES]
        n = raw[offset + DIR_ID_BYTES]
        start = offset + DIR_ID_BYTES + 1
        name = raw[start : start + n]
        return InodeKey(pid, name), start + n


ROOT_KEY = InodeKey(ROOT_ID, b"")  # the root inode's internal key


def owner_of_inode(key: InodeKey, n_servers: int, cfg: HashConfig = HashConfig()) -> int:
    """Owner server of a key. Placement is by the key's fingerprint for
    files and directories alike, so a fingerprint group colocates and any
    (pid, name) lives on exactly one server regardless of kind."""
    assert n_servers >= 1
    return fingerprint_of(key.pid, key.name, cfg).as_int % n_servers


def directory_id(seed: int, pid: bytes, name: bytes, rid: int) -> bytes:
    """256-bit directory id, derived from the creating request so that the
    same logical mkdir yields the same id on any replay."""
    h = hashlib.blake2b(
        pid + name + rid.to_bytes(8, "big"),
        digest_size=DIR_ID_BYTES,
        key=(seed & MASK64).to_bytes(8, "big"),
    )
    return h.digest()


def make_timestamp(op_counter: int, actor_uid: int) -> int:
    """Logical microseconds: per-actor monotone counter, disambiguated by
    the actor id in the low bits so stamps are globally unique."""
    return (op_counter << 12) | (actor_uid & 0xFFF)


@dataclass(slots=True)
class InodeRecord:
    """Inode metadata value stored under an InodeKey."""

    key: InodeKey
    kind: str  # KIND_FILE or KIND_DIR
    id: bytes | None  # directories only
    mtime: int
    ctime: int
    perms: int
    size: int = 0

    def copy(self) -> "InodeRecord":
        return InodeRecord(self.key, self.kind, self.id, self.mtime, self.ctime, self.perms, self.size)

    def canonical(self) -> tuple:
        return (
            self.key.encode(),
            self.kind,
            self.id or b"",
            self.mtime,
            self.ctime,
            self.perms,
            self.size,
        )


@dataclass(slots=True)
class DirEntryRecord:
    """One entry of a directory's entry list; stored on the same server as
    the owning directory's inode."""

    key: InodeKey  # pid = owning directory's id, name = child name
    child_kind: str
    perms: int

    def canonical(self) -> tuple:
        return (self.key.encode(), self.child_kind, self.perms)
