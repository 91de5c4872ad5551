from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from covesim import Exit, Platform, PlatformConfig, RegionKind, TvmProgram, program

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GPA = 0x8000_0000
SHARED_GPA = 0x9000_0000

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def platform() -> Platform:
    return Platform(PlatformConfig(memory_pages=128))


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail, seconds)``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(n: int, passed: bool, detail: str, seconds: float) -> None:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail} ({seconds:.2f} s)"
        lines.append((n, line))
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


def build_tvm(p: Platform, *, base: int = 0x20, payload: bytes = b"payload",
              prog: TvmProgram = program(Exit(0)), confidential_pages: int = 8,
              shared_pages: int = 0, debug: bool = False, finalize: bool = True) -> int:
    """Convert 16 pages at ``base`` and build a TVM with one measured page at GPA.

    Page layout relative to ``base``: +0 state, +1 table, +2 measured data, +3 vcpu,
    +4.. free for the test. The host source page is ``base + 16``.
    """
    h = p.host
    h.convert(base, 16)
    t = h.tvm_create(base, 1, debug)
    h.add_page_table_pages(t, base + 1)
    h.add_memory_region(t, GPA, confidential_pages, RegionKind.Confidential)
    if shared_pages:
        h.add_memory_region(t, SHARED_GPA, shared_pages, RegionKind.NonConfidentialShared)
    p.host_write_bytes(base + 16, payload.ljust(4096, b"\0"))
    h.add_measured_page(t, base + 16, base + 2, GPA)
    h.create_vcpu(t, 0, base + 3, prog)
    if finalize:
        h.finalize(t)
    return t
