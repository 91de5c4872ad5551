"""A whole simulated machine: RAM, MTT, harts, TSM-driver and TSM.

The host talks to the TSM only through :meth:`Platform.call` (a TEECALL on one of
its harts). :class:`Host` wraps those calls in typed methods that raise
:class:`CoveError` on a non-zero status, which is how tests and the scenario
runner drive the machine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tsm as abi
from .attestation import TcbMeasurements
from .errors import CoveError, ErrorCode
from .hart import (
    HOST_ACTIVE,
    Activation,
    ActiveKind,
    ExceptionKind,
    Hart,
    HartException,
    PrivilegeLevel,
    hart_access,
    inject_interrupt,
    interrupt_file_access,
)
from .mtt import (
    PAGE_SHIFT,
    PAGE_SIZE,
    TSM_OWNER,
    AccessContext,
    AccessKind,
    MemoryTrackingTable,
    PageState,
    PageUse,
    PhysicalMemory,
)
from .tsm import (
    MappingKind,
    RegionKind,
    Tsm,
    TsmInfo,
    ExitReason,
    TvmExit,
    TvmPhase,
    TvmProgram,
)
from .tsm_driver import BootConfig, DomainSwitchRequest, Response, TsmDriver

DEFAULT_TSM_DRIVER_BLOB = b"covesim tsm-driver image\x00" * 16
DEFAULT_TSM_BLOB = b"covesim tsm image\x00" * 32
DEFAULT_ROOT_SECRET = b"\x01" * 32

# host-side execution modes for raw accesses: (V, privilege)
HOST_MODES = {
    "hs": (0, PrivilegeLevel.S),
    "u": (0, PrivilegeLevel.U),
    "vs": (1, PrivilegeLevel.S),
    "vu": (1, PrivilegeLevel.U),
}


_PLAIN = int(PageState.NonConfidential)
_FREE = int(PageState.ConfidentialFree)
_ASSIGNED = int(PageState.ConfidentialAssigned)
_TVM_DATA = int(PageUse.TvmData)
_SHARED_MAPPING = MappingKind.Shared


@dataclass
class PlatformConfig:
    memory_pages: int = 256
    harts: int = 2
    tsm_driver_blob: bytes = DEFAULT_TSM_DRIVER_BLOB
    tsm_blob: bytes = DEFAULT_TSM_BLOB
    root_secret: bytes = DEFAULT_ROOT_SECRET
    tsm_version: int = 1
    max_tvms: int = 16
    debug_platform: bool = False

    def boot_config(self) -> BootConfig:
        return BootConfig(self.tsm_driver_blob, self.tsm_blob, self.root_secret,
                          self.tsm_version, self.debug_platform, self.max_tvms)


class Platform:
    def __init__(self, config: Optional[PlatformConfig] = None, *, boot: bool = True):
        self.config = config or PlatformConfig()
        self.memory = PhysicalMemory(self.config.memory_pages)
        self.mtt = MemoryTrackingTable(self.memory)
        self.harts = [Hart(i) for i in range(self.config.harts)]
        self.driver = TsmDriver(self.mtt)
        self.host = Host(self)
        # (log length, digest) per TVM whose measurement log last replayed cleanly
        self._replayed: dict[int, tuple[int, bytes]] = {}
        if boot:
            self.boot()

    def boot(self) -> TcbMeasurements:
        return self.driver.boot(self.config.boot_config())

    @property
    def tsm(self) -> Tsm:
        if self.driver.tsm is None:
            raise CoveError(ErrorCode.NotBooted)
        return self.driver.tsm

    @property
    def measurements(self) -> TcbMeasurements:
        if self.driver.measurements is None:
            raise CoveError(ErrorCode.NotBooted)
        return self.driver.measurements

    @property
    def root_public_key(self) -> bytes:
        return self.tsm.identity.root_public_key

    @property
    def scratch_page(self) -> int:
        """Host page used to stage vcpu programs for the TSM to read."""
        return self.config.memory_pages - 1

    def call(self, function_id: int, *args: int, hart: int = 0) -> Response:
        return self.driver.teecall(self.harts[hart], DomainSwitchRequest(function_id, tuple(args)))

    # -- raw accesses ----------------------------------------------------

    def _as_host_mode(self, hart: Hart, mode: str):
        if hart.active.kind is not ActiveKind.Host:
            raise CoveError(ErrorCode.NotHostContext)
        v, priv = HOST_MODES[mode]
        saved = hart.v, hart.priv
        hart.v, hart.priv = v, priv
        return saved

    def host_access(self, page: int, kind: AccessKind, value: Optional[int] = None,
                    offset: int = 0, *, mode: str = "hs", hart: int = 0) -> Optional[int]:
        """One 8-byte access by untrusted software (host, user task, or plain VM)."""
        h = self.harts[hart]
        saved = self._as_host_mode(h, mode)
        try:
            return hart_access(h, self.mtt, (page << PAGE_SHIFT) + offset, kind, value)
        finally:
            h.v, h.priv = saved

    def host_read(self, page: int, offset: int = 0, **kw) -> int:
        return self.host_access(page, AccessKind.Load, None, offset, **kw)

    def host_write(self, page: int, value: int, offset: int = 0, **kw) -> None:
        self.host_access(page, AccessKind.Store, value, offset, **kw)

    def host_write_bytes(self, page: int, data: bytes) -> None:
        ctx = AccessContext(0, self.harts[0].domain, AccessKind.Store)
        if not self.mtt.check(page, ctx).allowed:
            raise HartException(ExceptionKind.AccessFault, page << PAGE_SHIFT)
        self.memory.write_page(page, data)

    def host_read_page(self, page: int) -> bytes:
        """Read a page 8 bytes at a time through the checked host path."""
        return b"".join(struct.pack("<Q", self.host_read(page, off))
                        for off in range(0, PAGE_SIZE, 8))

    def ifile_access(self, file_id: int, kind: AccessKind, value: Optional[int] = None,
                     *, mode: str = "hs", hart: int = 0) -> Optional[int]:
        file = self._file(file_id)
        h = self.harts[hart]
        saved = self._as_host_mode(h, mode)
        try:
            return interrupt_file_access(h, file, kind, value)
        finally:
            h.v, h.priv = saved

    def _file(self, file_id: int):
        file = self.tsm.files.get(file_id)
        if file is None:
            raise CoveError(ErrorCode.Unbound, f"file {file_id}")
        return file

    def inject_interrupt(self, file_id: int, irq: int) -> None:
        inject_interrupt(self._file(file_id), irq)

    # -- guest-side actions (a vcpu executing one instruction) -------------

    def _in_guest(self, tvm_id: int, vcpu_id: int, hart: int, fn):
        tsm = self.tsm
        tvm = tsm.tvm(tvm_id)
        if tvm.phase is not TvmPhase.Runnable:
            raise CoveError(ErrorCode.WrongPhase)
        vcpu = tsm._vcpu(tvm, vcpu_id)
        h = self.harts[hart]
        if h.active.kind is not ActiveKind.Host:
            raise CoveError(ErrorCode.NotHostContext)
        saved = (list(h.gprs), h.priv, h.v)
        h.saved_host_ctx = None
        h.active = Activation(ActiveKind.Tvm, tvm_id, vcpu_id)
        h.v, h.priv, h.c = 1, PrivilegeLevel.S, 1
        h.load_regs(tsm._load_vcpu_image(vcpu))
        try:
            return fn(h, tvm, vcpu)
        finally:
            tsm._save_vcpu_image(vcpu, h.gprs)
            h.gprs, h.priv, h.v = saved
            h.c = 0
            h.active = HOST_ACTIVE

    def guest_access(self, tvm_id: int, vcpu_id: int, gpa: int, kind: AccessKind,
                     value: Optional[int] = None, *, hart: int = 0) -> Optional[int]:
        def go(h, tvm, vcpu):
            return hart_access(h, self.mtt, gpa, kind, value, self.tsm.translator(tvm))
        return self._in_guest(tvm_id, vcpu_id, hart, go)

    def guest_ifile_access(self, tvm_id: int, vcpu_id: int, file_id: int, kind: AccessKind,
                           value: Optional[int] = None, *, hart: int = 0) -> Optional[int]:
        file = self._file(file_id)
        return self._in_guest(tvm_id, vcpu_id, hart,
                              lambda h, tvm, vcpu: interrupt_file_access(h, file, kind, value))

    def guest_covg(self, tvm_id: int, vcpu_id: int, call: int, *args: int, hart: int = 0):
        """Issue a COVG call from a vcpu; returns (status, value) as the guest sees them."""
        def go(h, tvm, vcpu):
            return self.tsm._guest_call(h, tvm, vcpu, abi.Covg(call, tuple(args)))
        if call not in (abi.COVG_GET_EVIDENCE, abi.COVG_SHARE, abi.COVG_UNSHARE):
            raise CoveError(ErrorCode.UnknownFunction, f"{call:#x}")
        return self._in_guest(tvm_id, vcpu_id, hart, go)

    def guest_evidence(self, tvm_id: int, vcpu_id: int, report_data: bytes, *, hart: int = 0):
        """Evidence for the TVM as its vcpu would request it, with ``report_data`` bound in."""
        return self._in_guest(tvm_id, vcpu_id, hart,
                              lambda h, tvm, vcpu: self.tsm.covg_get_evidence(tvm_id, report_data))

    def guest_share(self, tvm_id: int, vcpu_id: int, gpa: int, count: int = 1, *,
                    share: bool = True, hart: int = 0) -> None:
        fn = self.tsm.covg_share if share else self.tsm.covg_unshare
        self._in_guest(tvm_id, vcpu_id, hart, lambda h, tvm, vcpu: fn(tvm_id, gpa, count))

    # -- invariants ------------------------------------------------------

    def invariant_violations(self, pages: Optional[Sequence[int]] = None,
                             tvms: Optional[Iterable[int]] = None) -> list[str]:
        """Structural checks over the MTT, the harts and every live TVM.

        ``pages`` limits the per-page checks (entry shape, scrub, ownership by a live
        domain) to those pages and ``tvms`` limits the per-TVM mapping and measurement
        checks to those TVMs. Both default to everything; the scoped form is meant for
        per-step checking where only the named pages and TVMs can have changed.
        """
        out: list[str] = []
        mtt = self.mtt
        tsm = self.driver.tsm
        if pages is None:
            pages = range(mtt.num_pages)
        state, owner, use = mtt.state, mtt.owner, mtt.use
        for p in pages:
            st, o, u = int(state[p]), int(owner[p]), int(use[p])
            if (st == _ASSIGNED) != (o != -2) or (o != -2) != (u != -1):
                out.append(f"mtt entry for page {p:#x} is malformed")
            elif st == _FREE and not self.memory.is_zero(p):
                out.append(f"free confidential page {p:#x} is not scrubbed")
            elif o >= 0 and tsm is not None and o not in tsm._live:
                out.append(f"page {p:#x} is owned by destroyed or unknown tvm {o}")
        for h in self.harts:
            out.extend(h.invariant_violations())
        if tsm is None:
            return out
        ids = tsm._live if tvms is None else tsm._live.intersection(tvms)
        for tid in sorted(ids):
            out.extend(self._tvm_violations(tsm.tvms[tid]))
        return out

    def _tvm_violations(self, tvm) -> list[str]:
        out = []
        mtt = self.mtt
        data_pages = set(np.flatnonzero((mtt.owner == tvm.tvm_id) & (mtt.use == _TVM_DATA)).tolist())
        mapped = set()
        regions = [(r.first_page, r.first_page + r.page_count, r.kind is RegionKind.Confidential)
                   for r in tvm.regions]
        for gpa_page, m in tvm.gstage.items():
            confidential = next((c for f, e, c in regions if f <= gpa_page < e), None)
            if m.kind is _SHARED_MAPPING:
                if mtt.state[m.spa] != _PLAIN:
                    out.append(f"tvm {tvm.tvm_id}: shared spa {m.spa:#x} is confidential")
                if confidential is not False:
                    out.append(f"tvm {tvm.tvm_id}: shared gpa page {gpa_page:#x} outside shared region")
            else:
                if m.spa in mapped:
                    out.append(f"tvm {tvm.tvm_id}: spa {m.spa:#x} mapped twice")
                mapped.add(m.spa)
                if confidential is not True:
                    out.append(f"tvm {tvm.tvm_id}: gpa page {gpa_page:#x} outside confidential region")
        if mapped != data_pages:
            out.append(f"tvm {tvm.tvm_id}: mapped data pages != MTT-owned data pages")
        reg = tvm.measurement
        key = (len(reg.log), reg.digest)
        if self._replayed.get(tvm.tvm_id) != key:
            if abi.MeasurementRegister.replay(reg.log) != reg.digest:
                out.append(f"tvm {tvm.tvm_id}: measurement log does not replay")
            else:
                self._replayed[tvm.tvm_id] = key
        return out


class Host:
    """Typed COVH/COVI wrappers over :meth:`Platform.call`. Pages are page numbers,
    guest addresses are byte addresses."""

    def __init__(self, platform: Platform):
        self.p = platform

    def _call(self, fid: int, *args: int, hart: int = 0) -> tuple[int, ...]:
        r = self.p.call(fid, *args, hart=hart)
        if not r.ok:
            raise CoveError(r.error, abi.FUNCTION_NAMES.get(fid, hex(fid)))
        return r.values

    def tsm_info(self) -> TsmInfo:
        v = self._call(abi.TSM_INFO)
        return TsmInfo(*v[:4])

    def convert(self, start: int, count: int = 1) -> None:
        self._call(abi.CONVERT_PAGES, start, count)

    def reclaim(self, start: int, count: int = 1) -> None:
        self._call(abi.RECLAIM_PAGES, start, count)

    def reassign(self, start: int, count: int = 1) -> int:
        return self._call(abi.REASSIGN_PAGES, start, count)[0]

    def tvm_create(self, state_start: int, count: int = 1, debug: bool = False) -> int:
        return self._call(abi.TVM_CREATE, state_start, count, int(debug))[0]

    def add_page_table_pages(self, tvm: int, start: int, count: int = 1) -> None:
        self._call(abi.TVM_ADD_PAGE_TABLE_PAGES, tvm, start, count)

    def add_memory_region(self, tvm: int, gpa: int, pages: int,
                          kind: RegionKind = RegionKind.Confidential) -> None:
        self._call(abi.TVM_ADD_MEMORY_REGION, tvm, gpa, pages, int(kind))

    def add_measured_page(self, tvm: int, src: int, dest: int, gpa: int) -> None:
        self._call(abi.TVM_ADD_MEASURED_PAGES, tvm, src, dest, gpa)

    def create_vcpu(self, tvm: int, vcpu: int, backing_start: int, prog: TvmProgram,
                    backing_count: int = 1, scratch: Optional[int] = None) -> None:
        scratch = self.p.scratch_page if scratch is None else scratch
        blob = prog.encode()
        if len(blob) > PAGE_SIZE:
            raise CoveError(ErrorCode.InvalidArgument, "program does not fit in one page")
        self.p.host_write_bytes(scratch, blob)
        self._call(abi.TVM_CREATE_VCPU, tvm, vcpu, backing_start, backing_count, scratch, len(blob))

    def finalize(self, tvm: int) -> bytes:
        return struct.pack("<4Q", *self._call(abi.TVM_FINALIZE, tvm)[:4])

    def run(self, tvm: int, vcpu: int, hart: int = 0) -> TvmExit:
        v = self._call(abi.TVM_RUN, tvm, vcpu, hart=hart)
        delivered = tuple(i for i in range(64) if v[2] >> i & 1)
        reason = ExitReason(v[0])
        args = tuple(v[3:6]) if reason is ExitReason.GuestRequest else ()
        return TvmExit(reason, v[1], args, delivered)

    def add_zero_page(self, tvm: int, dest: int, gpa: int) -> None:
        self._call(abi.TVM_ADD_ZERO_PAGES, tvm, dest, gpa)

    def add_shared_page(self, tvm: int, src: int, gpa: int) -> None:
        self._call(abi.TVM_ADD_SHARED_PAGES, tvm, src, gpa)

    def destroy(self, tvm: int) -> None:
        self._call(abi.TVM_DESTROY, tvm)

    def bind_interrupt_file(self, tvm: int, vcpu: int, page: int) -> int:
        return self._call(abi.COVI_BIND_INTERRUPT_FILE, tvm, vcpu, page)[0]
