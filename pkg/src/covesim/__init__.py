"""Desk-scale simulation of a RISC-V confidential-VM platform: memory tracking,
hart confidential mode, a TEE security manager with its lifecycle ABI, and
layered attestation."""

from .errors import CoveError, ErrorCode
from .mtt import PAGE_SIZE, AccessContext, AccessKind, Domain, PageState, PageUse
from .platform import Host, Platform, PlatformConfig
from .tsm import Covg, Exit, MemRegion, RegionKind, Touch, TvmExit, TvmProgram, Wfi, program

__all__ = [
    "AccessContext", "AccessKind", "CoveError", "Covg", "Domain", "ErrorCode", "Exit",
    "Host", "MemRegion", "PAGE_SIZE", "PageState", "PageUse", "Platform", "PlatformConfig",
    "RegionKind", "Touch", "TvmExit", "TvmProgram", "Wfi", "program",
]
