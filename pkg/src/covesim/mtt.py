"""Memory Tracking Table and the domain-assignment access checker.

Physical memory is page-granular (4 KiB). Every physical access, including
G-stage page-walk accesses, is checked against the MTT entry of the target page
before it is allowed to reach :class:`PhysicalMemory`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CoveError, ErrorCode

PAGE_SIZE = 4096
PAGE_SHIFT = 12

# owner value used for pages the TSM keeps for itself
TSM_OWNER = -1
_NO_OWNER = -2
_NO_USE = -1


class PageState(enum.IntEnum):
    NonConfidential = 0
    ConfidentialFree = 1
    ConfidentialAssigned = 2


class PageUse(enum.IntEnum):
    TvmData = 0
    TvmState = 1
    VcpuState = 2
    GStageTable = 3
    InterruptFile = 4
    TsmInternal = 5


class DomainKind(enum.Enum):
    Host = "host"
    Tsm = "tsm"
    Tvm = "tvm"


@dataclass(frozen=True)
class Domain:
    kind: DomainKind
    tvm_id: Optional[int] = None

    def __post_init__(self):
        if (self.kind is DomainKind.Tvm) != (self.tvm_id is not None):
            raise ValueError("tvm_id is required for, and only for, TVM domains")

    @classmethod
    def tvm(cls, tvm_id: int) -> "Domain":
        return cls(DomainKind.Tvm, tvm_id)

    def __str__(self) -> str:
        return f"tvm{self.tvm_id}" if self.kind is DomainKind.Tvm else self.kind.value


HOST = Domain(DomainKind.Host)
TSM = Domain(DomainKind.Tsm)


class AccessKind(enum.Enum):
    Load = "load"
    Store = "store"
    Fetch = "fetch"
    PageWalk = "walk"


@dataclass(frozen=True)
class AccessContext:
    """Who is touching memory: the hart's C bit, its domain, and the access type."""

    c: int
    domain: Domain
    kind: AccessKind

    def __post_init__(self):
        if self.c not in (0, 1):
            raise ValueError("confidential qualifier is a single bit")
        if (self.domain.kind is DomainKind.Host) != (self.c == 0):
            raise ValueError(f"domain {self.domain} is inconsistent with C={self.c}")


class Verdict(enum.Enum):
    Allow = "allow"
    Deny = "deny"


class FaultKind(enum.Enum):
    AccessFault = "AccessFault"
    GuestPageFault = "GuestPageFault"


@dataclass(frozen=True)
class AccessDecision:
    verdict: Verdict
    fault: Optional[FaultKind] = None

    def __post_init__(self):
        if (self.fault is not None) != (self.verdict is Verdict.Deny):
            raise ValueError("a fault accompanies every denial and nothing else")

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.Allow


ALLOW = AccessDecision(Verdict.Allow)
DENY = AccessDecision(Verdict.Deny, FaultKind.AccessFault)


@dataclass(frozen=True)
class MttEntry:
    state: PageState
    owner: Optional[int] = None
    use: Optional[PageUse] = None

    def __post_init__(self):
        if (self.owner is not None) != (self.state is PageState.ConfidentialAssigned):
            raise ValueError("owner is present iff the page is assigned")
        if (self.use is not None) != (self.owner is not None):
            raise ValueError("use is present iff owner is present")


class PhysicalMemory:
    """Raw page-addressed RAM. No access control happens here."""

    def __init__(self, num_pages: int):
        self.num_pages = num_pages
        self.data = np.zeros((num_pages, PAGE_SIZE), dtype=np.uint8)

    def _offset(self, page: int, offset: int) -> None:
        if not 0 <= page < self.num_pages:
            raise CoveError(ErrorCode.OutOfBounds, f"page {page:#x}")
        if offset % 8 or not 0 <= offset < PAGE_SIZE:
            raise CoveError(ErrorCode.Unaligned, f"offset {offset:#x}")

    def read64(self, page: int, offset: int = 0) -> int:
        self._offset(page, offset)
        return int(self.data[page, offset:offset + 8].view("<u8")[0])

    def write64(self, page: int, offset: int, value: int) -> None:
        self._offset(page, offset)
        self.data[page, offset:offset + 8].view("<u8")[0] = value & 0xFFFF_FFFF_FFFF_FFFF

    def read_page(self, page: int) -> bytes:
        return self.data[page].tobytes()

    def write_page(self, page: int, content: bytes, offset: int = 0) -> None:
        buf = np.frombuffer(content, dtype=np.uint8)
        self.data[page, offset:offset + len(buf)] = buf

    def zero(self, start: int, count: int = 1) -> None:
        self.data[start:start + count] = 0

    def is_zero(self, page: int) -> bool:
        return not self.data[page].any()


# plain aliases for the hot path; enum attribute lookups are slow on older interpreters
_NC = int(PageState.NonConfidential)
_CF = int(PageState.ConfidentialFree)
_CA = int(PageState.ConfidentialAssigned)
_TVM_DOMAIN = DomainKind.Tvm
_FETCH = AccessKind.Fetch
_WALK = AccessKind.PageWalk


class MemoryTrackingTable:
    """Flat, page-indexed ownership table plus the access checker.

    Mutations are validate-then-commit: a range operation that fails leaves
    every entry untouched. Pages entering ``ConfidentialFree`` or
    ``NonConfidential`` from a confidential state are scrubbed.
    """

    def __init__(self, memory: PhysicalMemory):
        self.memory = memory
        n = memory.num_pages
        self.num_pages = n
        self.state = np.zeros(n, dtype=np.uint8)
        self.owner = np.full(n, _NO_OWNER, dtype=np.int64)
        self.use = np.full(n, _NO_USE, dtype=np.int8)
        self.check_count = 0
        self._dirty: set[int] = set()

    # -- queries ---------------------------------------------------------

    def entry(self, page: int) -> MttEntry:
        self._bounds(page, 1)
        state = PageState(int(self.state[page]))
        if state != _CA:
            return MttEntry(state)
        return MttEntry(state, int(self.owner[page]), PageUse(int(self.use[page])))

    def page_state(self, page: int) -> PageState:
        self._bounds(page, 1)
        return PageState(int(self.state[page]))

    def owner_of(self, page: int) -> Optional[int]:
        o = int(self.owner[page])
        return None if o == _NO_OWNER else o

    def pages_owned_by(self, owner: int) -> list[int]:
        return [int(p) for p in np.flatnonzero(self.owner == owner)]

    def check(self, page: int, ctx: AccessContext) -> AccessDecision:
        """Decide whether ``ctx`` may touch physical page ``page``."""
        if not 0 <= page < self.num_pages:
            raise CoveError(ErrorCode.OutOfBounds, f"{page:#x}+1")
        self.check_count += 1
        state = int(self.state[page])
        if ctx.c == 0:
            return ALLOW if state == _NC else DENY
        domain = ctx.domain
        if state == _NC:
            if domain.kind is _TVM_DOMAIN:
                # shared memory is data-only for confidential workloads
                return DENY if ctx.kind is _FETCH or ctx.kind is _WALK else ALLOW
            return DENY if ctx.kind is _FETCH else ALLOW
        if state == _CA and domain.kind is _TVM_DOMAIN:
            return ALLOW if int(self.owner[page]) == domain.tvm_id else DENY
        return ALLOW

    # -- transitions -----------------------------------------------------

    def convert_range(self, start: int, count: int) -> None:
        self._bounds(start, count)
        if np.any(self.state[start:start + count] != _NC):
            raise CoveError(ErrorCode.AlreadyConfidential, f"range {start:#x}+{count}")
        self.state[start:start + count] = _CF
        self.memory.zero(start, count)
        self._dirty.update(range(start, start + count))

    def reclaim_range(self, start: int, count: int) -> None:
        self._bounds(start, count)
        states = self.state[start:start + count]
        if np.any(states == _CA):
            raise CoveError(ErrorCode.PageInUse, f"range {start:#x}+{count}")
        if np.any(states == _NC):
            raise CoveError(ErrorCode.NotConfidential, f"range {start:#x}+{count}")
        self.memory.zero(start, count)
        self.state[start:start + count] = _NC
        self._dirty.update(range(start, start + count))

    def assign_page(self, page: int, owner: int, use: PageUse) -> None:
        self._bounds(page, 1)
        if self.state[page] != _CF:
            raise CoveError(ErrorCode.NotFree, f"page {page:#x}")
        self.state[page] = _CA
        self.owner[page] = owner
        self.use[page] = use
        self._dirty.add(page)

    def release_page(self, page: int) -> None:
        self._bounds(page, 1)
        if self.state[page] != _CA:
            raise CoveError(ErrorCode.NotAssigned, f"page {page:#x}")
        self.memory.zero(page)
        self.state[page] = _CF
        self.owner[page] = _NO_OWNER
        self.use[page] = _NO_USE
        self._dirty.add(page)

    # -- helpers ---------------------------------------------------------

    def require_free(self, pages, code: ErrorCode = ErrorCode.PageNotFree) -> None:
        """Raise ``code`` unless every page is in bounds and ConfidentialFree."""
        for p in pages:
            if not 0 <= p < self.num_pages or self.state[p] != _CF:
                raise CoveError(code, f"page {p:#x}")
        if len(set(pages)) != len(pages):
            raise CoveError(code, "duplicate page in request")

    def drain_delta(self) -> list[int]:
        """Pages whose entry changed since the last drain, sorted."""
        out = sorted(self._dirty)
        self._dirty.clear()
        return out

    def _bounds(self, start: int, count: int) -> None:
        if start < 0 or count < 0 or start + count > self.num_pages:
            raise CoveError(ErrorCode.OutOfBounds, f"{start:#x}+{count}")
