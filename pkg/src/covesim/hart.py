"""Hart state and the hart-side memory and interrupt-file access paths."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import CoveError, ErrorCode
from .mtt import (
    HOST,
    PAGE_SHIFT,
    PAGE_SIZE,
    TSM,
    AccessContext,
    AccessKind,
    Domain,
    MemoryTrackingTable,
)

NUM_GPRS = 32
XLEN_MASK = 0xFFFF_FFFF_FFFF_FFFF
MAX_IRQ = 63


class PrivilegeLevel(enum.IntEnum):
    U = 0b00
    S = 0b01
    M = 0b11

    @classmethod
    def from_encoding(cls, bits: int) -> "PrivilegeLevel":
        if bits == 0b10:
            raise ValueError("privilege encoding 0b10 is reserved")
        return cls(bits)


# (V, nominal privilege, C) rows a hart may occupy
LEGAL_MODES = frozenset({
    (0, PrivilegeLevel.U, 0),
    (0, PrivilegeLevel.S, 0),
    (0, PrivilegeLevel.M, 0),
    (1, PrivilegeLevel.U, 0),
    (1, PrivilegeLevel.S, 0),
    (1, PrivilegeLevel.U, 1),
    (1, PrivilegeLevel.S, 1),
})

MODE_NAMES = {
    (0, PrivilegeLevel.U, 0): "U-mode",
    (0, PrivilegeLevel.S, 0): "HS-mode",
    (0, PrivilegeLevel.M, 0): "M-mode",
    (1, PrivilegeLevel.U, 0): "VU-mode",
    (1, PrivilegeLevel.S, 0): "VS-mode",
    (1, PrivilegeLevel.U, 1): "Confidential VU-mode",
    (1, PrivilegeLevel.S, 1): "Confidential VS-mode",
}


def is_legal_mode(v: int, priv: PrivilegeLevel, c: int) -> bool:
    return (v, priv, c) in LEGAL_MODES


class ActiveKind(enum.Enum):
    Host = "host"
    Tsm = "tsm"
    Tvm = "tvm"


@dataclass(frozen=True)
class Activation:
    kind: ActiveKind
    tvm_id: Optional[int] = None
    vcpu_id: Optional[int] = None


HOST_ACTIVE = Activation(ActiveKind.Host)
TSM_ACTIVE = Activation(ActiveKind.Tsm)


class ExceptionKind(enum.Enum):
    IllegalInstruction = "IllegalInstruction"
    VirtualInstruction = "VirtualInstruction"
    AccessFault = "AccessFault"
    GuestPageFault = "GuestPageFault"
    EcallFromVS = "EcallFromVS"
    EcallFromHS = "EcallFromHS"


_ADDRESSED = (ExceptionKind.AccessFault, ExceptionKind.GuestPageFault)


class HartException(Exception):
    """A synchronous exception raised on a hart. ``addr`` is the faulting address."""

    def __init__(self, kind: ExceptionKind, addr: Optional[int] = None):
        if (addr is not None) != (kind in _ADDRESSED):
            raise ValueError(f"{kind.name} {'needs' if addr is None else 'takes no'} address")
        self.kind = kind
        self.addr = addr
        super().__init__(kind.name if addr is None else f"{kind.name} @ {addr:#x}")


@dataclass
class SavedContext:
    gprs: list[int]
    priv: PrivilegeLevel
    v: int


@dataclass
class Hart:
    hart_id: int
    priv: PrivilegeLevel = PrivilegeLevel.S
    v: int = 0
    c: int = 0
    gprs: list[int] = field(default_factory=lambda: [0] * NUM_GPRS)
    active: Activation = HOST_ACTIVE
    saved_host_ctx: Optional[SavedContext] = None

    def read_reg(self, idx: int) -> int:
        return 0 if idx == 0 else self.gprs[idx]

    def write_reg(self, idx: int, value: int) -> None:
        if idx:
            self.gprs[idx] = value & XLEN_MASK

    def load_regs(self, values) -> None:
        self.gprs = [0] + [int(x) & XLEN_MASK for x in list(values)[1:NUM_GPRS]]

    @property
    def domain(self) -> Domain:
        if self.active.kind is ActiveKind.Host:
            return HOST
        if self.active.kind is ActiveKind.Tsm:
            return TSM
        return Domain.tvm(self.active.tvm_id)

    @property
    def mode_name(self) -> str:
        if self.active.kind is ActiveKind.Tsm:
            return "TSM (TCB activation)"
        return MODE_NAMES.get((self.v, self.priv, self.c), "illegal")

    def invariant_violations(self) -> list[str]:
        out = []
        if self.gprs[0] != 0:
            out.append(f"hart{self.hart_id}: x0 is {self.gprs[0]:#x}")
        confidential = self.active.kind is not ActiveKind.Host
        if (self.c == 1) != confidential:
            out.append(f"hart{self.hart_id}: C={self.c} while {self.active.kind.value} is active")
        if self.active.kind is ActiveKind.Tsm:
            # TSM execution is a functional activation reached only through TEECALL
            if (self.v, self.priv, self.c) != (0, PrivilegeLevel.M, 1) or self.saved_host_ctx is None:
                out.append(f"hart{self.hart_id}: malformed TSM activation")
        elif not is_legal_mode(self.v, self.priv, self.c):
            out.append(f"hart{self.hart_id}: illegal mode V={self.v} {self.priv.name} C={self.c}")
        return out


# gpa page -> (spa page, page-walk page or None); raises HartException(GuestPageFault)
Translator = Callable[[int], "tuple[int, Optional[int]]"]


def hart_access(
    hart: Hart,
    mtt: MemoryTrackingTable,
    addr: int,
    kind: AccessKind,
    value: Optional[int] = None,
    translate: Optional[Translator] = None,
) -> Optional[int]:
    """Perform one aligned 8-byte access from ``hart``.

    Host and TSM contexts use ``addr`` as a supervisor physical address. A hart in
    a TVM context treats it as guest physical and needs ``translate``; the walk
    page and the final page are each checked against the MTT. Loads and fetches
    return the value read; stores return None.
    """
    if addr % 8:
        raise CoveError(ErrorCode.Unaligned, f"address {addr:#x}")
    if kind is AccessKind.PageWalk:
        raise ValueError("page walks are implicit in translated accesses")
    page, offset = addr >> PAGE_SHIFT, addr & (PAGE_SIZE - 1)
    domain = hart.domain
    if hart.active.kind is ActiveKind.Tvm:
        if translate is None:
            raise ValueError("TVM-context access needs a G-stage translator")
        spa, walk_page = translate(page)
        if walk_page is not None:
            walk_ctx = AccessContext(hart.c, domain, AccessKind.PageWalk)
            if not mtt.check(walk_page, walk_ctx).allowed:
                raise HartException(ExceptionKind.AccessFault, walk_page << PAGE_SHIFT)
    else:
        spa = page
    if not 0 <= spa < mtt.num_pages:
        raise HartException(ExceptionKind.AccessFault, addr)
    if not mtt.check(spa, AccessContext(hart.c, domain, kind)).allowed:
        raise HartException(ExceptionKind.AccessFault, addr)
    if kind is AccessKind.Store:
        mtt.memory.write64(spa, offset, 0 if value is None else value)
        return None
    return mtt.memory.read64(spa, offset)


@dataclass
class InterruptFile:
    """A memory-resident guest interrupt file (identities 1..63)."""

    file_id: int
    backing_page: int
    bound_to: Optional[tuple[int, int]] = None
    pending: set[int] = field(default_factory=set)

    def pending_bits(self) -> int:
        return sum(1 << irq for irq in self.pending)


def interrupt_file_access(
    hart: Hart, file: InterruptFile, kind: AccessKind, value: Optional[int] = None
) -> Optional[int]:
    """Access the register state of ``file``.

    Loads return the pending bitmap; stores replace it. A file assigned to a TVM
    may be touched only by a confidential hart running that TVM.
    """
    if file.bound_to is not None:
        if hart.c == 0:
            raise HartException(
                ExceptionKind.VirtualInstruction if hart.v else ExceptionKind.IllegalInstruction
            )
        if hart.active.kind is not ActiveKind.Tvm or hart.active.tvm_id != file.bound_to[0]:
            raise HartException(ExceptionKind.AccessFault, file.backing_page << PAGE_SHIFT)
    if kind is AccessKind.Load:
        return file.pending_bits()
    if kind is AccessKind.Store:
        bits = 0 if value is None else value
        file.pending = {i for i in range(1, MAX_IRQ + 1) if bits >> i & 1}
        return None
    raise ValueError(f"{kind.name} is not an interrupt-file access")


def inject_interrupt(file: InterruptFile, irq: int) -> None:
    if not 1 <= irq <= MAX_IRQ:
        raise CoveError(ErrorCode.InvalidIrq, str(irq))
    if file.bound_to is None:
        raise CoveError(ErrorCode.Unbound, f"file {file.file_id}")
    file.pending.add(irq)
