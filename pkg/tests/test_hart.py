from __future__ import annotations

import itertools

import pytest
from hypothesis import given, strategies as st

from covesim import AccessKind, CoveError, ErrorCode, Exit, PageUse, Touch, program
from covesim.hart import (
    LEGAL_MODES,
    Activation,
    ActiveKind,
    ExceptionKind,
    Hart,
    HartException,
    InterruptFile,
    PrivilegeLevel,
    hart_access,
    inject_interrupt,
    interrupt_file_access,
    is_legal_mode,
)
from covesim.mtt import MemoryTrackingTable, PhysicalMemory

from conftest import GPA, build_tvm
from oracles import ifile_exception

U, S, M = PrivilegeLevel.U, PrivilegeLevel.S, PrivilegeLevel.M


def test_privilege_encodings():
    assert [int(p) for p in (U, S, M)] == [0b00, 0b01, 0b11]
    with pytest.raises(ValueError):
        PrivilegeLevel.from_encoding(0b10)
    assert PrivilegeLevel.from_encoding(0b11) is M


def test_exactly_seven_legal_rows():
    combos = list(itertools.product((0, 1), (U, S, M), (0, 1)))
    legal = [c for c in combos if is_legal_mode(*c)]
    assert len(combos) == 12 and len(legal) == 7
    assert set(legal) == LEGAL_MODES
    # non-virtualized confidential rows and virtualized M are not in the table
    assert not any(v == 0 and c == 1 for v, _, c in legal)
    assert not any(p is M and v == 1 for v, p, _ in legal)


def test_hart_invariants_flag_bad_states():
    h = Hart(0)
    assert h.invariant_violations() == []
    h.c = 1
    assert h.invariant_violations()
    h = Hart(0)
    h.gprs[0] = 5
    assert h.invariant_violations()
    h = Hart(0, priv=S, v=0, c=1, active=Activation(ActiveKind.Tsm))
    assert any("TSM" in v for v in h.invariant_violations())


def test_x0_is_hardwired():
    h = Hart(0)
    h.write_reg(0, 99)
    assert h.read_reg(0) == 0
    h.load_regs([7] * 32)
    assert h.gprs[0] == 0 and h.gprs[1] == 7


def test_exception_address_rules():
    with pytest.raises(ValueError):
        HartException(ExceptionKind.AccessFault)
    with pytest.raises(ValueError):
        HartException(ExceptionKind.IllegalInstruction, 0x1000)


def test_host_store_to_assigned_page_faults(platform):
    build_tvm(platform)
    with pytest.raises(HartException) as e:
        platform.host_write(0x22, 1)
    assert e.value.kind is ExceptionKind.AccessFault and e.value.addr == 0x22 << 12


def test_tsm_pages_are_host_inaccessible(platform):
    assert platform.driver.tcb_pages
    for page in platform.driver.tcb_pages:
        with pytest.raises(HartException):
            platform.host_read(page)


def test_tvm_reads_back_its_own_store(platform):
    t = build_tvm(platform)
    platform.guest_access(t, 0, GPA + 16, AccessKind.Store, 0x1234)
    assert platform.guest_access(t, 0, GPA + 16, AccessKind.Load) == 0x1234


def test_tvm_touch_of_unmapped_gpa_is_guest_page_fault(platform):
    t = build_tvm(platform)
    with pytest.raises(HartException) as e:
        platform.guest_access(t, 0, GPA + 0x3000, AccessKind.Load)
    assert e.value.kind is ExceptionKind.GuestPageFault and e.value.addr == GPA + 0x3000


def test_unaligned_access_is_rejected(platform):
    with pytest.raises(CoveError) as e:
        platform.host_read(0x30, 4)
    assert e.value.code is ErrorCode.Unaligned


def test_walk_and_final_page_each_checked_once(platform):
    t = build_tvm(platform)
    before = platform.mtt.check_count
    platform.guest_access(t, 0, GPA, AccessKind.Load)
    assert platform.mtt.check_count - before == 2
    before = platform.mtt.check_count
    platform.host_read(0x40)
    assert platform.mtt.check_count - before == 1


def test_walk_through_plain_memory_faults():
    mtt = MemoryTrackingTable(PhysicalMemory(8))
    mtt.convert_range(1, 1)
    mtt.assign_page(1, 0, PageUse.TvmData)
    hart = Hart(0, priv=S, v=1, c=1, active=Activation(ActiveKind.Tvm, 0, 0))
    with pytest.raises(HartException) as e:
        hart_access(hart, mtt, 0, AccessKind.Load, translate=lambda g: (1, 5))
    assert e.value.kind is ExceptionKind.AccessFault and e.value.addr == 5 << 12


# -- interrupt files ----------------------------------------------------------

def _hart_for(c: int, v: int, tvm_id):
    if c == 0:
        return Hart(0, priv=S, v=v, c=0)
    return Hart(0, priv=S, v=1, c=1, active=Activation(ActiveKind.Tvm, tvm_id, 0))


@pytest.mark.parametrize("c,v,same", [(c, v, s) for c in (0, 1) for v in (0, 1) for s in (False, True)
                                      if not (c == 1 and v == 0)])
def test_ifile_exception_truth_table(c, v, same):
    file = InterruptFile(0, 0x30, bound_to=(4, 0), pending={3})
    hart = _hart_for(c, v, 4 if same else 5)
    expected = ifile_exception(c, v, same)
    for kind in (AccessKind.Load, AccessKind.Store):
        if expected is None:
            interrupt_file_access(hart, file, kind, 0b1000)
        else:
            with pytest.raises(HartException) as e:
                interrupt_file_access(hart, file, kind, 1)
            assert e.value.kind.name == expected
            if expected == "AccessFault":
                assert e.value.addr == 0x30 << 12


def test_tsm_activation_cannot_touch_tvm_file():
    file = InterruptFile(0, 0x30, bound_to=(4, 0))
    hart = Hart(0, priv=M, v=0, c=1, active=Activation(ActiveKind.Tsm))
    with pytest.raises(HartException) as e:
        interrupt_file_access(hart, file, AccessKind.Load)
    assert e.value.kind is ExceptionKind.AccessFault


def test_owner_load_and_store_of_pending_bits():
    file = InterruptFile(0, 0x30, bound_to=(4, 0))
    hart = _hart_for(1, 1, 4)
    interrupt_file_access(hart, file, AccessKind.Store, (1 << 5) | (1 << 63) | 1)
    assert file.pending == {5, 63}
    assert interrupt_file_access(hart, file, AccessKind.Load) == (1 << 5) | (1 << 63)
    with pytest.raises(ValueError):
        interrupt_file_access(hart, file, AccessKind.Fetch)


def test_inject_rules():
    file = InterruptFile(0, 0x30, bound_to=(1, 0))
    inject_interrupt(file, 5)
    assert file.pending == {5}
    for bad in (0, 64, -1):
        with pytest.raises(CoveError) as e:
            inject_interrupt(file, bad)
        assert e.value.code is ErrorCode.InvalidIrq
    with pytest.raises(CoveError) as e:
        inject_interrupt(InterruptFile(1, 0x31), 5)
    assert e.value.code is ErrorCode.Unbound


def test_injected_interrupt_is_delivered_at_next_entry(platform):
    t = build_tvm(platform, prog=program(Touch(GPA, AccessKind.Load), Exit(0)))
    fid = platform.host.bind_interrupt_file(t, 0, 0x24)
    platform.inject_interrupt(fid, 5)
    ex = platform.host.run(t, 0)
    assert ex.delivered == (5,)
    assert platform.tsm.tvms[t].vcpus[0].delivered_irqs == {5}


def test_bound_file_from_host_modes(platform):
    t = build_tvm(platform)
    fid = platform.host.bind_interrupt_file(t, 0, 0x24)
    for mode, kind in (("hs", "IllegalInstruction"), ("u", "IllegalInstruction"),
                       ("vs", "VirtualInstruction"), ("vu", "VirtualInstruction")):
        with pytest.raises(HartException) as e:
            platform.ifile_access(fid, AccessKind.Load, mode=mode)
        assert e.value.kind.name == kind
    platform.inject_interrupt(fid, 9)
    assert platform.guest_ifile_access(t, 0, fid, AccessKind.Load) == 1 << 9


@given(st.lists(st.tuples(st.integers(1, 31), st.integers(0, 2**64 - 1)), max_size=20))
def test_x0_survives_any_register_writes(writes):
    h = Hart(0)
    for idx, value in writes + [(0, 1)]:
        h.write_reg(idx, value)
    assert h.gprs[0] == 0 and h.invariant_violations() == []
