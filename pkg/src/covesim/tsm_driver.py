"""M-mode TSM-driver: measured boot of the TCB and the TEECALL/TEERET domain switches.

Register convention for TEECALL (SBI-like): function id in ``a6``, arguments in
``a0``-``a5``. On TEERET the status lands in ``a0`` and up to six result values in
``a1``-``a6``; every other host register is restored from the snapshot taken at
TEECALL, so nothing the TSM left in its working registers reaches the host.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .attestation import TcbIdentity, TcbMeasurements, measure
from .errors import CoveError, ErrorCode
from .hart import HOST_ACTIVE, TSM_ACTIVE, XLEN_MASK, Hart, PrivilegeLevel, SavedContext
from .mtt import PAGE_SIZE, TSM_OWNER, MemoryTrackingTable, PageUse
from .tsm import Tsm

_S, _M = PrivilegeLevel.S, PrivilegeLevel.M

REG_A0 = 10
REG_A6 = 16
ARG_REGS = tuple(range(REG_A0, REG_A0 + 6))
RESPONSE_REGS = tuple(range(REG_A0, REG_A6 + 1))
MAX_RESPONSE_VALUES = 6

# registers the TSM clobbers while handling a call
_TSM_SP, _TSM_SCRATCH = 2, (5, 6, 7)
TSM_STACK_TOP = 0x8000_0000_0000_0000


@dataclass(frozen=True)
class DomainSwitchRequest:
    function_id: int
    args: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.args) > 6:
            raise ValueError("at most six arguments fit in a0-a5")


@dataclass(frozen=True)
class Response:
    status: int
    values: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == 0

    @property
    def error(self) -> Optional[ErrorCode]:
        return None if self.ok else ErrorCode(self.status)


@dataclass(frozen=True)
class BootConfig:
    tsm_driver_blob: bytes
    tsm_blob: bytes
    root_secret: bytes
    tsm_version: int = 1
    debug_platform: bool = False
    max_tvms: int = 16


def _pages_for(blob: bytes) -> int:
    return max(1, -(-len(blob) // PAGE_SIZE))


class TsmDriver:
    def __init__(self, mtt: MemoryTrackingTable):
        self.mtt = mtt
        self.tsm: Optional[Tsm] = None
        self.measurements: Optional[TcbMeasurements] = None
        self.tcb_pages: list[int] = []
        # test hook: runs inside the TSM activation, may scribble on hart registers
        self.tsm_register_hook: Optional[Callable[[Hart], None]] = None

    @property
    def booted(self) -> bool:
        return self.tsm is not None

    def boot(self, config: BootConfig) -> TcbMeasurements:
        """Measure both TCB images, wall off their pages, and start the TSM."""
        if self.booted:
            raise CoveError(ErrorCode.AlreadyBooted)
        m = TcbMeasurements(
            tsm_driver_digest=measure(config.tsm_driver_blob),
            tsm_digest=measure(config.tsm_blob),
            tsm_version=config.tsm_version,
            debug_platform=config.debug_platform,
        )
        # driver image, TSM image, one TSM data page
        layout = [config.tsm_driver_blob, config.tsm_blob, b""]
        npages = sum(_pages_for(b) for b in layout)
        self.mtt.convert_range(0, npages)
        page = 0
        for blob in layout:
            for i in range(_pages_for(blob)):
                self.mtt.memory.write_page(page, blob[i * PAGE_SIZE:(i + 1) * PAGE_SIZE])
                self.mtt.assign_page(page, TSM_OWNER, PageUse.TsmInternal)
                self.tcb_pages.append(page)
                page += 1
        self.mtt.drain_delta()
        identity = TcbIdentity(config.root_secret, m)
        self.tsm = Tsm(self.mtt, identity, version=config.tsm_version, max_tvms=config.max_tvms)
        self.measurements = m
        return m

    def teecall(self, hart: Hart, req: Optional[DomainSwitchRequest] = None) -> Response:
        """Enter the TSM from HS-mode, dispatch, and return via :meth:`teeret`.

        With ``req`` given, its id and arguments are first loaded into the
        calling hart's a6/a0-a5 the way host software would before ECALL.
        """
        if not self.booted:
            raise CoveError(ErrorCode.NotBooted)
        if hart.c != 0 or hart.active is not HOST_ACTIVE or hart.priv is not _S or hart.v != 0:
            raise CoveError(ErrorCode.NotHostContext, f"hart{hart.hart_id} ({hart.mode_name})")
        if req is not None:
            hart.write_reg(REG_A6, req.function_id)
            for reg, val in zip(ARG_REGS, req.args):
                hart.write_reg(reg, val)
        function_id = hart.gprs[REG_A6]
        args = hart.gprs[REG_A0:REG_A0 + len(ARG_REGS)]

        hart.saved_host_ctx = SavedContext(list(hart.gprs), hart.priv, hart.v)
        hart.c = 1
        hart.active = TSM_ACTIVE
        hart.priv, hart.v = _M, 0

        hart.write_reg(_TSM_SP, TSM_STACK_TOP - PAGE_SIZE * hart.hart_id)
        for reg, val in zip(_TSM_SCRATCH, (function_id, args[0], len(self.tsm.tvms))):
            hart.write_reg(reg, val)
        if self.tsm_register_hook is not None:
            self.tsm_register_hook(hart)
        status, values = self.tsm.dispatch(hart, function_id, args)
        if self.tsm_register_hook is not None:
            self.tsm_register_hook(hart)
        response = Response(status, tuple(values))
        self.teeret(hart, response)
        return response

    def teeret(self, hart: Hart, response: Response) -> None:
        if hart.c != 1 or hart.active is not TSM_ACTIVE or hart.saved_host_ctx is None:
            raise CoveError(ErrorCode.NotTsmContext, f"hart{hart.hart_id}")
        saved = hart.saved_host_ctx
        gprs = list(saved.gprs)
        hart.priv, hart.v = saved.priv, saved.v
        hart.c = 0
        hart.active = HOST_ACTIVE
        hart.saved_host_ctx = None
        values = list(response.values)[:MAX_RESPONSE_VALUES]
        values += [0] * (MAX_RESPONSE_VALUES - len(values))
        gprs[REG_A0:REG_A6 + 1] = [v & XLEN_MASK for v in [response.status] + values]
        hart.gprs = gprs

