"""Error codes shared by servers, clients and the reference model."""

from __future__ import annotations

from enum import IntEnum


class Errno(IntEnum):
    OK = 0
    EEXIST = 1
    ENOENT = 2
    ESTALE = 3
    ENOTEMPTY = 4
    EPERM = 5
    EACCES = 6
    ELOOP = 7
    EIO = 8
    ENOTDIR = 9

    @property
    def ok(self) -> bool:
        return self is Errno.OK
