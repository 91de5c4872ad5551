"""The TEE Security Manager: TVM lifecycle (COVH), guest services (COVG) and
interrupt-file binding (COVI).

The host never touches TSM state directly. Every call arrives through
:meth:`Tsm.dispatch` from the TSM-driver's TEECALL path; the typed methods below
are the implementations behind those function ids and raise :class:`CoveError`
on rejection without changing any state.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .attestation import REPORT_DATA_SIZE, AttestationEvidence, TcbIdentity
from .errors import CoveError, ErrorCode
from .hart import (
    TSM_ACTIVE,
    Activation,
    ActiveKind,
    ExceptionKind,
    Hart,
    HartException,
    InterruptFile,
    PrivilegeLevel,
    hart_access,
)
from .mtt import (
    PAGE_SHIFT,
    PAGE_SIZE,
    AccessKind,
    MemoryTrackingTable,
    PageState,
    PageUse,
)

# COVH, in lifecycle order
TSM_INFO = 0x00
CONVERT_PAGES = 0x01
TVM_CREATE = 0x02
TVM_ADD_PAGE_TABLE_PAGES = 0x03
TVM_ADD_MEMORY_REGION = 0x04
TVM_ADD_MEASURED_PAGES = 0x05
TVM_CREATE_VCPU = 0x06
TVM_FINALIZE = 0x07
TVM_RUN = 0x08
TVM_ADD_ZERO_PAGES = 0x09
TVM_ADD_SHARED_PAGES = 0x0A
TVM_DESTROY = 0x0B
REASSIGN_PAGES = 0x0C
RECLAIM_PAGES = 0x0D
# COVG (guest side)
COVG_GET_EVIDENCE = 0x100
COVG_SHARE = 0x101
COVG_UNSHARE = 0x102
# COVI
COVI_BIND_INTERRUPT_FILE = 0x200

FUNCTION_NAMES = {
    TSM_INFO: "tsm_info",
    CONVERT_PAGES: "convert",
    TVM_CREATE: "tvm_create",
    TVM_ADD_PAGE_TABLE_PAGES: "tvm_add_page_table_pages",
    TVM_ADD_MEMORY_REGION: "tvm_add_memory_region",
    TVM_ADD_MEASURED_PAGES: "tvm_add_measured_pages",
    TVM_CREATE_VCPU: "tvm_create_vcpu",
    TVM_FINALIZE: "tvm_finalize",
    TVM_RUN: "tvm_run",
    TVM_ADD_ZERO_PAGES: "tvm_add_zero_pages",
    TVM_ADD_SHARED_PAGES: "tvm_add_shared_pages",
    TVM_DESTROY: "tvm_destroy",
    REASSIGN_PAGES: "reassign",
    RECLAIM_PAGES: "reclaim",
    COVG_GET_EVIDENCE: "covg_get_evidence",
    COVG_SHARE: "covg_share",
    COVG_UNSHARE: "covg_unshare",
    COVI_BIND_INTERRUPT_FILE: "covi_bind_interrupt_file",
}

CAP_COVH = 1 << 0
CAP_COVG = 1 << 1
CAP_COVI = 1 << 2

MAPPINGS_PER_TABLE_PAGE = 512
MIN_STATE_PAGES = 1
ZERO_DIGEST = bytes(32)
# measurement-log address for vcpu records; never page aligned, so never a gpa
VCPU_RECORD_BASE = 0xFFFF_FFFF_0000_0001
# vcpu register image inside its first backing page: x0..x31 then pc
_VCPU_IMAGE = struct.Struct("<33Q")
_MASK64 = 0xFFFF_FFFF_FFFF_FFFF

# registers the abstract vcpu programs use
REG_A0, REG_A1 = 10, 11
REG_LAST_LOAD = 5
REG_ACC = 18


class TvmPhase(enum.Enum):
    Initializing = "Initializing"
    Runnable = "Runnable"
    Destroyed = "Destroyed"


class RegionKind(enum.IntEnum):
    Confidential = 0
    NonConfidentialShared = 1


class MappingKind(enum.Enum):
    Measured = "Measured"
    Zero = "Zero"
    Shared = "Shared"


@dataclass(frozen=True)
class MemRegion:
    gpa_start: int
    page_count: int
    kind: RegionKind

    @property
    def first_page(self) -> int:
        return self.gpa_start >> PAGE_SHIFT

    def contains_page(self, gpa_page: int) -> bool:
        return self.first_page <= gpa_page < self.first_page + self.page_count

    def overlaps(self, other: "MemRegion") -> bool:
        return (self.first_page < other.first_page + other.page_count
                and other.first_page < self.first_page + self.page_count)


@dataclass(frozen=True)
class Mapping:
    spa: int
    kind: MappingKind
    table_page: int


# -- abstract vcpu programs --------------------------------------------------

@dataclass(frozen=True)
class Touch:
    gpa: int
    kind: AccessKind
    value: int = 0


@dataclass(frozen=True)
class Covg:
    call: int
    args: tuple[int, ...] = ()


@dataclass(frozen=True)
class Wfi:
    pass


@dataclass(frozen=True)
class Exit:
    code: int


Action = Union[Touch, Covg, Wfi, Exit]

_TOUCH_KINDS = (AccessKind.Load, AccessKind.Store, AccessKind.Fetch)


@dataclass(frozen=True)
class TvmProgram:
    """What a vcpu "executes": memory touches, guest calls, WFI and exit.

    Loads fold into an accumulator register (``x18 = x18 * 31 + value``); running
    off the end halts with the accumulator as exit code.
    """

    actions: tuple[Action, ...] = ()

    def encode(self) -> bytes:
        out = [struct.pack("<I", len(self.actions))]
        for a in self.actions:
            if isinstance(a, Touch):
                out.append(struct.pack("<BBQQ", 1, _TOUCH_KINDS.index(a.kind), a.gpa & _MASK64,
                                       a.value & _MASK64))
            elif isinstance(a, Covg):
                out.append(struct.pack("<BQB", 2, a.call & _MASK64, len(a.args)))
                out.append(struct.pack(f"<{len(a.args)}Q", *(x & _MASK64 for x in a.args)))
            elif isinstance(a, Wfi):
                out.append(b"\x03")
            else:
                out.append(struct.pack("<BQ", 4, a.code & _MASK64))
        return b"".join(out)

    @classmethod
    def decode(cls, buf: bytes) -> "TvmProgram":
        try:
            (n,), pos = struct.unpack_from("<I", buf), 4
            actions: list[Action] = []
            for _ in range(n):
                tag = buf[pos]
                if tag == 1:
                    _, kind, gpa, value = struct.unpack_from("<BBQQ", buf, pos)
                    actions.append(Touch(gpa, _TOUCH_KINDS[kind], value))
                    pos += 18
                elif tag == 2:
                    _, call, nargs = struct.unpack_from("<BQB", buf, pos)
                    args = struct.unpack_from(f"<{nargs}Q", buf, pos + 10)
                    actions.append(Covg(call, tuple(args)))
                    pos += 10 + 8 * nargs
                elif tag == 3:
                    actions.append(Wfi())
                    pos += 1
                elif tag == 4:
                    actions.append(Exit(struct.unpack_from("<BQ", buf, pos)[1]))
                    pos += 9
                else:
                    raise ValueError(f"bad action tag {tag}")
        except (struct.error, IndexError) as e:
            raise ValueError(f"truncated program: {e}") from None
        if pos != len(buf):
            raise ValueError("trailing bytes after program")
        return cls(tuple(actions))


def program(*actions: Action) -> TvmProgram:
    return TvmProgram(tuple(actions))


# -- measurement -------------------------------------------------------------

def extend_digest(digest: bytes, gpa: int, content_digest: bytes) -> bytes:
    return hashlib.sha256(digest + struct.pack("<Q", gpa) + content_digest).digest()


@dataclass
class MeasurementRegister:
    digest: bytes = ZERO_DIGEST
    log: list[tuple[int, bytes]] = field(default_factory=list)
    frozen: bool = False

    def extend(self, gpa: int, content: bytes) -> None:
        if self.frozen:
            raise CoveError(ErrorCode.WrongPhase, "measurement is final")
        content_digest = hashlib.sha256(content).digest()
        self.log.append((gpa, content_digest))
        self.digest = extend_digest(self.digest, gpa, content_digest)

    @staticmethod
    def replay(log: Sequence[tuple[int, bytes]]) -> bytes:
        d = ZERO_DIGEST
        for gpa, content_digest in log:
            d = extend_digest(d, gpa, content_digest)
        return d


# -- TVM state ---------------------------------------------------------------

class ExitReason(enum.IntEnum):
    GuestPageFault = 1
    GuestRequest = 2
    Wfi = 3
    Halted = 4
    # kept for the wire format; delivery happens synchronously at entry
    InterruptPending = 5


@dataclass(frozen=True)
class TvmExit:
    reason: ExitReason
    value: int = 0
    args: tuple[int, ...] = ()
    delivered: tuple[int, ...] = ()

    def __str__(self) -> str:
        if self.reason in (ExitReason.GuestPageFault, ExitReason.GuestRequest):
            return f"{self.reason.name}({self.value:#x})"
        if self.reason is ExitReason.Halted:
            return f"Halted({self.value})"
        return self.reason.name


@dataclass
class VcpuContext:
    vcpu_id: int
    backing_pages: list[int]
    program: TvmProgram
    pc: int = 0
    runnable: bool = True
    interrupt_file: Optional[InterruptFile] = None
    delivered_irqs: set[int] = field(default_factory=set)
    traps: list[HartException] = field(default_factory=list)
    last_evidence: Optional[AttestationEvidence] = None


@dataclass
class Tvm:
    tvm_id: int
    state_pages: list[int]
    debug_opt_in: bool = False
    phase: TvmPhase = TvmPhase.Initializing
    regions: list[MemRegion] = field(default_factory=list)
    gstage: dict[int, Mapping] = field(default_factory=dict)
    vcpus: dict[int, VcpuContext] = field(default_factory=dict)
    measurement: MeasurementRegister = field(default_factory=MeasurementRegister)
    table_pages: list[int] = field(default_factory=list)
    table_use: dict[int, int] = field(default_factory=dict)
    shared_offers: set[int] = field(default_factory=set)

    def region_of(self, gpa_page: int) -> Optional[MemRegion]:
        for r in self.regions:
            if r.contains_page(gpa_page):
                return r
        return None

    def free_table_page(self) -> Optional[int]:
        for p in self.table_pages:
            if self.table_use[p] < MAPPINGS_PER_TABLE_PAGE:
                return p
        return None


@dataclass(frozen=True)
class TsmInfo:
    version: int
    capabilities: int
    page_size: int
    max_tvms: int


def _gpa_page(gpa: int) -> int:
    if gpa < 0 or gpa % PAGE_SIZE:
        raise CoveError(ErrorCode.InvalidArgument, f"gpa {gpa:#x} is not page aligned")
    return gpa >> PAGE_SHIFT


class Tsm:
    def __init__(self, mtt: MemoryTrackingTable, identity: TcbIdentity, *,
                 version: int, max_tvms: int = 16):
        self.mtt = mtt
        self.memory = mtt.memory
        self.identity = identity
        self.version = version
        self.max_tvms = max_tvms
        self.tvms: dict[int, Tvm] = {}
        self.files: dict[int, InterruptFile] = {}
        # host pages currently mapped into some TVM as shared memory -> mapping count
        self.shared_spas: Counter = Counter()
        self._next_tvm = 0
        self._live: set[int] = set()
        self._next_file = 0

    # -- lookups ---------------------------------------------------------

    def tvm(self, tvm_id: int) -> Tvm:
        t = self.tvms.get(tvm_id)
        if t is None or t.phase is TvmPhase.Destroyed:
            raise CoveError(ErrorCode.UnknownTvm, f"tvm {tvm_id}")
        return t

    def _phase(self, tvm: Tvm, *phases: TvmPhase) -> None:
        if tvm.phase not in phases:
            raise CoveError(ErrorCode.WrongPhase, f"tvm {tvm.tvm_id} is {tvm.phase.value}")

    def _vcpu(self, tvm: Tvm, vcpu_id: int) -> VcpuContext:
        v = tvm.vcpus.get(vcpu_id)
        if v is None:
            raise CoveError(ErrorCode.UnknownVcpu, f"tvm {tvm.tvm_id} vcpu {vcpu_id}")
        return v

    def live_tvms(self) -> list[Tvm]:
        return [self.tvms[i] for i in sorted(self._live)]

    # -- COVH ------------------------------------------------------------

    def tsm_info(self) -> TsmInfo:
        return TsmInfo(self.version, CAP_COVH | CAP_COVG | CAP_COVI, PAGE_SIZE, self.max_tvms)

    def convert_pages(self, start: int, count: int) -> None:
        self.mtt._bounds(start, count)
        if any(self.shared_spas[p] for p in range(start, start + count)):
            raise CoveError(ErrorCode.PageInUse, f"range {start:#x}+{count} is mapped as shared")
        self.mtt.convert_range(start, count)

    def reclaim_pages(self, start: int, count: int) -> None:
        self.mtt.reclaim_range(start, count)

    def reassign_pages(self, start: int, count: int) -> int:
        """Confirm released confidential pages are reusable by any TVM; scrubs them again."""
        self.mtt._bounds(start, count)
        states = self.mtt.state[start:start + count]
        if (states == PageState.ConfidentialAssigned).any():
            raise CoveError(ErrorCode.PageInUse, f"range {start:#x}+{count}")
        if (states == PageState.NonConfidential).any():
            raise CoveError(ErrorCode.NotConfidential, f"range {start:#x}+{count}")
        self.memory.zero(start, count)
        return count

    def tvm_create(self, state_pages: Sequence[int], debug_opt_in: bool = False) -> int:
        state_pages = list(state_pages)
        if len(state_pages) < MIN_STATE_PAGES:
            raise CoveError(ErrorCode.TooFewPages, f"need {MIN_STATE_PAGES} state page(s)")
        if len(self._live) >= self.max_tvms:
            raise CoveError(ErrorCode.TvmLimit, f"{self.max_tvms} TVMs")
        self.mtt.require_free(state_pages)
        tvm_id = self._next_tvm
        self._next_tvm += 1
        for p in state_pages:
            self.mtt.assign_page(p, tvm_id, PageUse.TvmState)
        self.tvms[tvm_id] = Tvm(tvm_id, state_pages, debug_opt_in=bool(debug_opt_in))
        self._live.add(tvm_id)
        return tvm_id

    def tvm_add_page_table_pages(self, tvm_id: int, pages: Sequence[int]) -> None:
        tvm = self.tvm(tvm_id)
        pages = list(pages)
        self.mtt.require_free(pages)
        for p in pages:
            self.mtt.assign_page(p, tvm_id, PageUse.GStageTable)
            tvm.table_pages.append(p)
            tvm.table_use[p] = 0

    def tvm_add_memory_region(self, tvm_id: int, region: MemRegion) -> None:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Initializing)
        _gpa_page(region.gpa_start)
        if region.page_count < 1:
            raise CoveError(ErrorCode.InvalidArgument, "empty region")
        region = MemRegion(region.gpa_start, region.page_count, RegionKind(region.kind))
        if any(region.overlaps(r) for r in tvm.regions):
            raise CoveError(ErrorCode.Overlap, f"region at {region.gpa_start:#x}")
        tvm.regions.append(region)

    def _check_new_mapping(self, tvm: Tvm, gpa: int, kind: RegionKind) -> tuple[int, int]:
        page = _gpa_page(gpa)
        region = tvm.region_of(page)
        if region is None or region.kind is not kind:
            raise CoveError(ErrorCode.GpaUnmappedRegion, f"gpa {gpa:#x}")
        if page in tvm.gstage:
            raise CoveError(ErrorCode.GpaAlreadyMapped, f"gpa {gpa:#x}")
        table = tvm.free_table_page()
        if table is None:
            raise CoveError(ErrorCode.OutOfTablePages, f"tvm {tvm.tvm_id}")
        return page, table

    def _map(self, tvm: Tvm, gpa_page: int, spa: int, kind: MappingKind, table: int) -> None:
        tvm.gstage[gpa_page] = Mapping(spa, kind, table)
        tvm.table_use[table] += 1
        if kind is MappingKind.Shared:
            self.shared_spas[spa] += 1

    def _unmap(self, tvm: Tvm, gpa_page: int) -> None:
        m = tvm.gstage.pop(gpa_page)
        tvm.table_use[m.table_page] -= 1
        if m.kind is MappingKind.Shared:
            self.shared_spas[m.spa] -= 1
            if not self.shared_spas[m.spa]:
                del self.shared_spas[m.spa]

    def tvm_add_measured_pages(self, tvm_id: int, src: int, dest: int, gpa: int) -> None:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Initializing)
        if not 0 <= src < self.mtt.num_pages or self.mtt.state[src] != PageState.NonConfidential:
            raise CoveError(ErrorCode.BadSource, f"page {src:#x}")
        self.mtt.require_free([dest])
        page, table = self._check_new_mapping(tvm, gpa, RegionKind.Confidential)
        content = self.memory.read_page(src)
        self.memory.write_page(dest, content)
        self.mtt.assign_page(dest, tvm_id, PageUse.TvmData)
        self._map(tvm, page, dest, MappingKind.Measured, table)
        tvm.measurement.extend(gpa, content)

    def tvm_create_vcpu(self, tvm_id: int, vcpu_id: int, backing: Sequence[int],
                        prog: TvmProgram) -> None:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Initializing)
        if vcpu_id in tvm.vcpus:
            raise CoveError(ErrorCode.DuplicateVcpu, f"vcpu {vcpu_id}")
        if not 0 <= vcpu_id < 1 << 31:
            raise CoveError(ErrorCode.InvalidArgument, f"vcpu id {vcpu_id}")
        backing = list(backing)
        if not backing:
            raise CoveError(ErrorCode.TooFewPages, "vcpu needs a backing page")
        self.mtt.require_free(backing)
        for p in backing:
            self.mtt.assign_page(p, tvm_id, PageUse.VcpuState)
        vcpu = VcpuContext(vcpu_id, backing, prog)
        tvm.vcpus[vcpu_id] = vcpu
        self._save_vcpu_image(vcpu, [0] * 32)
        tvm.measurement.extend(VCPU_RECORD_BASE + vcpu_id,
                               struct.pack("<I", vcpu_id) + prog.encode())

    def tvm_finalize(self, tvm_id: int) -> bytes:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Initializing)
        if not tvm.vcpus:
            raise CoveError(ErrorCode.NoVcpus, f"tvm {tvm_id}")
        tvm.phase = TvmPhase.Runnable
        tvm.measurement.frozen = True
        return tvm.measurement.digest

    def tvm_add_zero_pages(self, tvm_id: int, dest: int, gpa: int) -> None:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Runnable)
        self.mtt.require_free([dest])
        page, table = self._check_new_mapping(tvm, gpa, RegionKind.Confidential)
        self.memory.zero(dest)
        self.mtt.assign_page(dest, tvm_id, PageUse.TvmData)
        self._map(tvm, page, dest, MappingKind.Zero, table)

    def tvm_add_shared_pages(self, tvm_id: int, src: int, gpa: int) -> None:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Runnable)
        if self.mtt.page_state(src) is not PageState.NonConfidential:
            raise CoveError(ErrorCode.SourceConfidential, f"page {src:#x}")
        page = _gpa_page(gpa)
        region = tvm.region_of(page)
        if region is None or region.kind is not RegionKind.NonConfidentialShared:
            raise CoveError(ErrorCode.GpaUnmappedRegion, f"gpa {gpa:#x}")
        if page not in tvm.shared_offers:
            raise CoveError(ErrorCode.GpaNotShared, f"gpa {gpa:#x}")
        page, table = self._check_new_mapping(tvm, gpa, RegionKind.NonConfidentialShared)
        self._map(tvm, page, src, MappingKind.Shared, table)

    def tvm_destroy(self, tvm_id: int) -> list[int]:
        """Tear down a TVM; every confidential page it owned is scrubbed and freed."""
        tvm = self.tvm(tvm_id)
        released = self.mtt.pages_owned_by(tvm_id)
        for p in released:
            self.mtt.release_page(p)
        for fid in [f for f, file in self.files.items() if file.bound_to and file.bound_to[0] == tvm_id]:
            del self.files[fid]
        for vcpu in tvm.vcpus.values():
            vcpu.interrupt_file = None
            vcpu.runnable = False
        for gpa_page in list(tvm.gstage):
            self._unmap(tvm, gpa_page)
        tvm.table_pages.clear()
        tvm.table_use.clear()
        tvm.shared_offers.clear()
        tvm.phase = TvmPhase.Destroyed
        self._live.discard(tvm_id)
        return released

    # -- COVI ------------------------------------------------------------

    def covi_bind_interrupt_file(self, tvm_id: int, vcpu_id: int, page: int) -> int:
        tvm = self.tvm(tvm_id)
        vcpu = self._vcpu(tvm, vcpu_id)
        if vcpu.interrupt_file is not None:
            raise CoveError(ErrorCode.AlreadyBound, f"vcpu {vcpu_id}")
        self.mtt.require_free([page])
        self.mtt.assign_page(page, tvm_id, PageUse.InterruptFile)
        file = InterruptFile(self._next_file, page, (tvm_id, vcpu_id))
        self._next_file += 1
        self.files[file.file_id] = file
        vcpu.interrupt_file = file
        return file.file_id

    # -- COVG (guest side) -----------------------------------------------

    def _running(self, tvm_id: int) -> Tvm:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Runnable)
        return tvm

    def covg_get_evidence(self, tvm_id: int, report_data: bytes) -> AttestationEvidence:
        tvm = self._running(tvm_id)
        if len(report_data) != REPORT_DATA_SIZE:
            raise CoveError(ErrorCode.InvalidArgument, "report_data must be 64 bytes")
        return self.identity.issue(tvm_id, tvm.measurement.digest, tvm.debug_opt_in, report_data)

    def _shared_range(self, tvm: Tvm, gpa: int, count: int) -> range:
        first = _gpa_page(gpa)
        pages = range(first, first + count)
        for p in pages:
            r = tvm.region_of(p)
            if r is None or r.kind is not RegionKind.NonConfidentialShared:
                raise CoveError(ErrorCode.GpaUnmappedRegion, f"gpa {p << PAGE_SHIFT:#x}")
        return pages

    def covg_share(self, tvm_id: int, gpa: int, count: int = 1) -> None:
        tvm = self._running(tvm_id)
        tvm.shared_offers.update(self._shared_range(tvm, gpa, count))

    def covg_unshare(self, tvm_id: int, gpa: int, count: int = 1) -> None:
        tvm = self._running(tvm_id)
        for p in self._shared_range(tvm, gpa, count):
            tvm.shared_offers.discard(p)
            if p in tvm.gstage:
                self._unmap(tvm, p)

    # -- execution -------------------------------------------------------

    def translator(self, tvm: Tvm):
        def translate(gpa_page: int) -> tuple[int, Optional[int]]:
            m = tvm.gstage.get(gpa_page)
            if m is None:
                raise HartException(ExceptionKind.GuestPageFault, gpa_page << PAGE_SHIFT)
            return m.spa, m.table_page
        return translate

    def _save_vcpu_image(self, vcpu: VcpuContext, gprs: Sequence[int]) -> None:
        image = _VCPU_IMAGE.pack(*(list(gprs)[:32] + [vcpu.pc]))
        self.memory.write_page(vcpu.backing_pages[0], image)

    def _load_vcpu_image(self, vcpu: VcpuContext) -> list[int]:
        raw = self.memory.read_page(vcpu.backing_pages[0])[:_VCPU_IMAGE.size]
        values = list(_VCPU_IMAGE.unpack(raw))
        return values[:32]

    def enter_guest(self, hart: Hart, tvm: Tvm, vcpu: VcpuContext) -> list[int]:
        """Switch ``hart`` from the TSM into the vcpu; returns the TSM registers to restore."""
        saved = hart.gprs
        hart.active = Activation(ActiveKind.Tvm, tvm.tvm_id, vcpu.vcpu_id)
        hart.v, hart.priv, hart.c = 1, PrivilegeLevel.S, 1
        hart.load_regs(self._load_vcpu_image(vcpu))
        return saved

    def leave_guest(self, hart: Hart, vcpu: VcpuContext, tsm_regs: list[int]) -> None:
        self._save_vcpu_image(vcpu, hart.gprs)
        hart.gprs = tsm_regs
        hart.active = TSM_ACTIVE
        hart.v, hart.priv, hart.c = 0, PrivilegeLevel.M, 1

    def tvm_run(self, hart: Hart, tvm_id: int, vcpu_id: int) -> TvmExit:
        tvm = self.tvm(tvm_id)
        self._phase(tvm, TvmPhase.Runnable)
        vcpu = self._vcpu(tvm, vcpu_id)
        if not vcpu.runnable:
            raise CoveError(ErrorCode.VcpuNotRunnable, f"vcpu {vcpu_id} has halted")
        delivered: tuple[int, ...] = ()
        file = vcpu.interrupt_file
        if file is not None and file.pending:
            delivered = tuple(sorted(file.pending))
            vcpu.delivered_irqs.update(file.pending)
            file.pending.clear()
        tsm_regs = self.enter_guest(hart, tvm, vcpu)
        try:
            exit_ = self._execute(hart, tvm, vcpu)
        finally:
            self.leave_guest(hart, vcpu, tsm_regs)
        return TvmExit(exit_.reason, exit_.value, exit_.args, delivered)

    def _execute(self, hart: Hart, tvm: Tvm, vcpu: VcpuContext) -> TvmExit:
        translate = self.translator(tvm)
        actions = vcpu.program.actions
        while vcpu.pc < len(actions):
            action = actions[vcpu.pc]
            if isinstance(action, Touch):
                try:
                    got = hart_access(hart, self.mtt, action.gpa, action.kind,
                                      action.value, translate)
                except HartException as e:
                    if e.kind is ExceptionKind.GuestPageFault:
                        # resumes at this same action once the host maps the page
                        return TvmExit(ExitReason.GuestPageFault, e.addr)
                    vcpu.traps.append(e)
                except CoveError as e:
                    vcpu.traps.append(HartException(ExceptionKind.AccessFault, action.gpa))
                else:
                    if action.kind is AccessKind.Load:
                        hart.write_reg(REG_LAST_LOAD, got)
                        hart.write_reg(REG_ACC, hart.read_reg(REG_ACC) * 31 + got)
                vcpu.pc += 1
            elif isinstance(action, Covg):
                vcpu.pc += 1
                if action.call not in (COVG_GET_EVIDENCE, COVG_SHARE, COVG_UNSHARE):
                    return TvmExit(ExitReason.GuestRequest, action.call, action.args)
                status, value = self._guest_call(hart, tvm, vcpu, action)
                hart.write_reg(REG_A0, status)
                hart.write_reg(REG_A1, value)
            elif isinstance(action, Wfi):
                vcpu.pc += 1
                return TvmExit(ExitReason.Wfi)
            else:
                vcpu.pc += 1
                vcpu.runnable = False
                return TvmExit(ExitReason.Halted, action.code & _MASK64)
        vcpu.runnable = False
        return TvmExit(ExitReason.Halted, hart.read_reg(REG_ACC))

    def _guest_call(self, hart: Hart, tvm: Tvm, vcpu: VcpuContext, call: Covg) -> tuple[int, int]:
        args = list(call.args) + [0] * 3
        try:
            if call.call == COVG_SHARE:
                self.covg_share(tvm.tvm_id, args[0], args[1] or 1)
                return 0, 0
            if call.call == COVG_UNSHARE:
                self.covg_unshare(tvm.tvm_id, args[0], args[1] or 1)
                return 0, 0
            report = self._guest_read(tvm, args[0], REPORT_DATA_SIZE)
            evidence = self.covg_get_evidence(tvm.tvm_id, report)
            blob = evidence.encode()
            self._guest_write(tvm, args[1], blob)
            vcpu.last_evidence = evidence
            return 0, len(blob)
        except CoveError as e:
            return int(e.code), 0

    def _guest_page(self, tvm: Tvm, gpa: int, confidential: bool) -> int:
        m = tvm.gstage.get(gpa >> PAGE_SHIFT)
        if m is None or (confidential and m.kind is MappingKind.Shared):
            raise CoveError(ErrorCode.GpaUnmappedRegion, f"gpa {gpa:#x}")
        return m.spa

    def _guest_read(self, tvm: Tvm, gpa: int, n: int) -> bytes:
        spa = self._guest_page(tvm, gpa, confidential=False)
        off = gpa & (PAGE_SIZE - 1)
        if off + n > PAGE_SIZE:
            raise CoveError(ErrorCode.InvalidArgument, "buffer crosses a page")
        return self.memory.read_page(spa)[off:off + n]

    def _guest_write(self, tvm: Tvm, gpa: int, data: bytes) -> None:
        spa = self._guest_page(tvm, gpa, confidential=True)
        off = gpa & (PAGE_SIZE - 1)
        if off + len(data) > PAGE_SIZE:
            raise CoveError(ErrorCode.InvalidArgument, "buffer crosses a page")
        self.memory.write_page(spa, data, off)

    # -- register ABI ----------------------------------------------------

    def dispatch(self, hart: Hart, function_id: int, args: Sequence[int]) -> tuple[int, list[int]]:
        """Run one host-originated call; returns (status, up to 6 result values)."""
        a = list(args) + [0] * 6
        try:
            handler = self._HANDLERS.get(function_id)
            if handler is None:
                raise CoveError(ErrorCode.UnknownFunction, f"{function_id:#x}")
            values = handler(self, hart, a) or []
        except CoveError as e:
            return int(e.code), []
        return 0, [v & _MASK64 for v in values]

    def _h_info(self, hart, a):
        i = self.tsm_info()
        return [i.version, i.capabilities, i.page_size, i.max_tvms]

    def _h_convert(self, hart, a):
        self.convert_pages(a[0], a[1])

    def _pages(self, start: int, count: int) -> range:
        if count > self.mtt.num_pages:
            raise CoveError(ErrorCode.PageNotFree, f"{count} pages")
        return range(start, start + count)

    def _h_create(self, hart, a):
        return [self.tvm_create(self._pages(a[0], a[1]), bool(a[2]))]

    def _h_table(self, hart, a):
        self.tvm_add_page_table_pages(a[0], self._pages(a[1], a[2]))

    def _h_region(self, hart, a):
        if a[3] not in (0, 1):
            raise CoveError(ErrorCode.InvalidArgument, f"region kind {a[3]}")
        self.tvm_add_memory_region(a[0], MemRegion(a[1], a[2], RegionKind(a[3])))

    def _h_measured(self, hart, a):
        self.tvm_add_measured_pages(a[0], a[1], a[2], a[3])

    def _h_vcpu(self, hart, a):
        tvm_id, vcpu_id, b_start, b_count, src, length = a[:6]
        if length > PAGE_SIZE or self.mtt.page_state(src) is not PageState.NonConfidential:
            raise CoveError(ErrorCode.BadSource, f"program page {src:#x}")
        try:
            prog = TvmProgram.decode(self.memory.read_page(src)[:length])
        except ValueError as e:
            raise CoveError(ErrorCode.InvalidArgument, str(e)) from None
        self.tvm_create_vcpu(tvm_id, vcpu_id, self._pages(b_start, b_count), prog)

    def _h_finalize(self, hart, a):
        return list(struct.unpack("<4Q", self.tvm_finalize(a[0])))

    def _h_run(self, hart, a):
        ex = self.tvm_run(hart, a[0], a[1])
        irqs = sum(1 << i for i in ex.delivered)
        return [int(ex.reason), ex.value, irqs] + list(ex.args[:3])

    def _h_zero(self, hart, a):
        self.tvm_add_zero_pages(a[0], a[1], a[2])

    def _h_shared(self, hart, a):
        self.tvm_add_shared_pages(a[0], a[1], a[2])

    def _h_destroy(self, hart, a):
        self.tvm_destroy(a[0])

    def _h_reassign(self, hart, a):
        return [self.reassign_pages(a[0], a[1])]

    def _h_reclaim(self, hart, a):
        self.reclaim_pages(a[0], a[1])

    def _h_bind(self, hart, a):
        return [self.covi_bind_interrupt_file(a[0], a[1], a[2])]

    _HANDLERS = {
        TSM_INFO: _h_info,
        CONVERT_PAGES: _h_convert,
        TVM_CREATE: _h_create,
        TVM_ADD_PAGE_TABLE_PAGES: _h_table,
        TVM_ADD_MEMORY_REGION: _h_region,
        TVM_ADD_MEASURED_PAGES: _h_measured,
        TVM_CREATE_VCPU: _h_vcpu,
        TVM_FINALIZE: _h_finalize,
        TVM_RUN: _h_run,
        TVM_ADD_ZERO_PAGES: _h_zero,
        TVM_ADD_SHARED_PAGES: _h_shared,
        TVM_DESTROY: _h_destroy,
        REASSIGN_PAGES: _h_reassign,
        RECLAIM_PAGES: _h_reclaim,
        COVI_BIND_INTERRUPT_FILE: _h_bind,
    }
