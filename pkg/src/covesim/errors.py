"""Flat error codes shared by every ABI of the simulated platform.

ABI calls report failure by raising :class:`CoveError`; at the TEECALL boundary the
code is written to the status register (``a0``) so the numeric values are stable.
"""

from __future__ import annotations

import enum


class ErrorCode(enum.IntEnum):
    OK = 0
    # memory tracking
    OutOfBounds = 1
    AlreadyConfidential = 2
    PageInUse = 3
    NotConfidential = 4
    NotFree = 5
    NotAssigned = 6
    # platform / domain switches
    AlreadyBooted = 10
    NotBooted = 11
    NotHostContext = 12
    NotTsmContext = 13
    UnknownFunction = 14
    InvalidArgument = 15
    # TVM lifecycle
    PageNotFree = 20
    TooFewPages = 21
    TvmLimit = 22
    UnknownTvm = 23
    OutOfTablePages = 24
    Overlap = 25
    WrongPhase = 26
    BadSource = 27
    GpaUnmappedRegion = 28
    GpaAlreadyMapped = 29
    NoVcpus = 30
    DuplicateVcpu = 31
    UnknownVcpu = 32
    VcpuNotRunnable = 33
    SourceConfidential = 34
    GpaNotShared = 35
    # interrupts
    AlreadyBound = 40
    InvalidIrq = 41
    Unbound = 42
    # hart access path
    Unaligned = 50


class CoveError(Exception):
    """An ABI or platform operation was rejected; ``code`` says why."""

    def __init__(self, code: ErrorCode, detail: str = ""):
        self.code = ErrorCode(code)
        self.detail = detail
        super().__init__(f"{self.code.name}: {detail}" if detail else self.code.name)
