from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from covesim import AccessContext, AccessKind, CoveError, Domain, ErrorCode, PageState, PageUse
from covesim.mtt import (
    HOST,
    TSM,
    TSM_OWNER,
    FaultKind,
    MemoryTrackingTable,
    MttEntry,
    PhysicalMemory,
)

from oracles import mtt_allows

KIND_NAMES = {AccessKind.Load: "load", AccessKind.Store: "store",
              AccessKind.Fetch: "fetch", AccessKind.PageWalk: "walk"}


def make_mtt(pages: int = 16) -> MemoryTrackingTable:
    return MemoryTrackingTable(PhysicalMemory(pages))


def all_contexts(tvm_ids=(0, 1)):
    for kind in AccessKind:
        yield AccessContext(0, HOST, kind)
        yield AccessContext(1, TSM, kind)
        for t in tvm_ids:
            yield AccessContext(1, Domain.tvm(t), kind)


def describe(mtt: MemoryTrackingTable, page: int, ctx: AccessContext):
    state = {PageState.NonConfidential: "plain", PageState.ConfidentialFree: "free",
             PageState.ConfidentialAssigned: "assigned"}[mtt.page_state(page)]
    domain = ctx.domain.kind.value
    return state, ctx.c, domain, mtt.owner_of(page) == ctx.domain.tvm_id, KIND_NAMES[ctx.kind]


def test_check_matches_rule_table_for_every_state_and_context():
    mtt = make_mtt(8)
    mtt.convert_range(1, 5)
    mtt.assign_page(2, 0, PageUse.TvmData)
    mtt.assign_page(3, 1, PageUse.GStageTable)
    mtt.assign_page(4, TSM_OWNER, PageUse.TsmInternal)
    for page, ctx in itertools.product(range(6), all_contexts()):
        got = mtt.check(page, ctx)
        assert got.allowed == mtt_allows(*describe(mtt, page, ctx)), (page, ctx)
        if not got.allowed:
            assert got.fault is FaultKind.AccessFault


def test_host_never_reaches_confidential_pages():
    mtt = make_mtt(4)
    mtt.convert_range(0, 3)
    mtt.assign_page(1, 0, PageUse.TvmData)
    for page in range(3):
        for kind in AccessKind:
            assert not mtt.check(page, AccessContext(0, HOST, kind)).allowed


def test_access_context_rejects_inconsistent_c_bit():
    with pytest.raises(ValueError):
        AccessContext(1, HOST, AccessKind.Load)
    with pytest.raises(ValueError):
        AccessContext(0, TSM, AccessKind.Load)
    with pytest.raises(ValueError):
        AccessContext(2, TSM, AccessKind.Load)


def test_check_out_of_bounds_page():
    with pytest.raises(CoveError) as e:
        make_mtt(4).check(4, AccessContext(0, HOST, AccessKind.Load))
    assert e.value.code is ErrorCode.OutOfBounds


def test_convert_four_pages_gives_free_zeroed_pages():
    mtt = make_mtt(8)
    mtt.memory.data[2:6] = 0xAA
    mtt.convert_range(2, 4)
    assert [mtt.page_state(p) for p in range(2, 6)] == [PageState.ConfidentialFree] * 4
    assert not mtt.memory.data[2:6].any()


def test_convert_is_atomic_when_one_page_is_assigned():
    mtt = make_mtt(8)
    mtt.convert_range(3, 1)
    mtt.assign_page(3, 0, PageUse.TvmData)
    before = mtt.state.copy()
    with pytest.raises(CoveError) as e:
        mtt.convert_range(0, 6)
    assert e.value.code is ErrorCode.AlreadyConfidential
    assert np.array_equal(mtt.state, before)


def test_convert_past_end_is_out_of_bounds():
    mtt = make_mtt(8)
    with pytest.raises(CoveError) as e:
        mtt.convert_range(0, 9)
    assert e.value.code is ErrorCode.OutOfBounds


def test_reclaim_released_page_reads_zero():
    mtt = make_mtt(4)
    mtt.convert_range(1, 1)
    mtt.assign_page(1, 0, PageUse.TvmData)
    mtt.memory.write64(1, 8, 0xDEAD_BEEF)
    mtt.release_page(1)
    mtt.reclaim_range(1, 1)
    assert mtt.page_state(1) is PageState.NonConfidential
    assert mtt.memory.is_zero(1)


def test_reclaim_errors():
    mtt = make_mtt(4)
    mtt.convert_range(0, 2)
    mtt.assign_page(1, 0, PageUse.TvmData)
    with pytest.raises(CoveError) as e:
        mtt.reclaim_range(0, 2)
    assert e.value.code is ErrorCode.PageInUse
    with pytest.raises(CoveError) as e:
        mtt.reclaim_range(2, 1)
    assert e.value.code is ErrorCode.NotConfidential


def test_convert_then_reclaim_restores_initial_table():
    mtt = make_mtt(8)
    before = (mtt.state.copy(), mtt.owner.copy(), mtt.use.copy())
    mtt.convert_range(2, 3)
    mtt.reclaim_range(2, 3)
    after = (mtt.state, mtt.owner, mtt.use)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_assign_and_release_rules():
    mtt = make_mtt(4)
    mtt.convert_range(0, 2)
    mtt.assign_page(0, 1, PageUse.TvmData)
    assert mtt.entry(0) == MttEntry(PageState.ConfidentialAssigned, 1, PageUse.TvmData)
    with pytest.raises(CoveError) as e:
        mtt.assign_page(0, 2, PageUse.TvmData)
    assert e.value.code is ErrorCode.NotFree
    with pytest.raises(CoveError) as e:
        mtt.assign_page(3, 1, PageUse.TvmData)
    assert e.value.code is ErrorCode.NotFree
    with pytest.raises(CoveError) as e:
        mtt.release_page(1)
    assert e.value.code is ErrorCode.NotAssigned
    mtt.memory.write64(0, 0, 7)
    mtt.release_page(0)
    assert mtt.memory.is_zero(0)
    mtt.assign_page(0, 2, PageUse.TvmData)
    assert mtt.owner_of(0) == 2


def test_entry_shape_rules():
    with pytest.raises(ValueError):
        MttEntry(PageState.ConfidentialFree, owner=1, use=PageUse.TvmData)
    with pytest.raises(ValueError):
        MttEntry(PageState.ConfidentialAssigned)


def test_drain_delta_reports_changed_pages_once():
    mtt = make_mtt(8)
    mtt.convert_range(2, 2)
    mtt.assign_page(3, 0, PageUse.TvmData)
    assert mtt.drain_delta() == [2, 3]
    assert mtt.drain_delta() == []


def test_physical_memory_alignment_and_bounds():
    mem = PhysicalMemory(2)
    mem.write64(1, 8, -1)
    assert mem.read64(1, 8) == 0xFFFF_FFFF_FFFF_FFFF
    with pytest.raises(CoveError) as e:
        mem.read64(0, 4)
    assert e.value.code is ErrorCode.Unaligned
    with pytest.raises(CoveError) as e:
        mem.read64(2, 0)
    assert e.value.code is ErrorCode.OutOfBounds


# -- properties against a dictionary model -----------------------------------

PAGES = 12
op_strategy = st.one_of(
    st.tuples(st.just("convert"), st.integers(0, PAGES), st.integers(0, 4)),
    st.tuples(st.just("reclaim"), st.integers(0, PAGES), st.integers(0, 4)),
    st.tuples(st.just("assign"), st.integers(0, PAGES - 1), st.integers(-1, 2)),
    st.tuples(st.just("release"), st.integers(0, PAGES - 1), st.just(0)),
    st.tuples(st.just("write"), st.integers(0, PAGES - 1), st.integers(1, 255)),
)


@given(st.lists(op_strategy, max_size=60))
def test_random_sequences_match_model_and_keep_invariants(ops):
    mtt = make_mtt(PAGES)
    model = {p: ("plain", None) for p in range(PAGES)}
    for op, a, b in ops:
        before = mtt.state.copy()
        if op == "convert":
            rng = range(a, a + b)
            ok = a + b <= PAGES and all(model[p][0] == "plain" for p in rng)
            try:
                mtt.convert_range(a, b)
                assert ok
                model.update({p: ("free", None) for p in rng})
            except CoveError:
                assert not ok
        elif op == "reclaim":
            rng = range(a, a + b)
            ok = a + b <= PAGES and all(model[p][0] == "free" for p in rng)
            try:
                mtt.reclaim_range(a, b)
                assert ok
                model.update({p: ("plain", None) for p in rng})
            except CoveError:
                assert not ok
        elif op == "assign":
            ok = model[a][0] == "free"
            try:
                mtt.assign_page(a, b, PageUse.TvmData)
                assert ok
                model[a] = ("assigned", b)
            except CoveError:
                assert not ok
        elif op == "release":
            ok = model[a][0] == "assigned"
            try:
                mtt.release_page(a)
                assert ok
                model[a] = ("free", None)
            except CoveError:
                assert not ok
        else:
            mtt.memory.data[a, 0] = b
        changed = np.flatnonzero(mtt.state != before)
        # range operations are all-or-nothing and never skip the free state
        for p in changed:
            assert (int(before[p]), int(mtt.state[p])) != (0, 2)
        for p in range(PAGES):
            state, owner = model[p]
            assert mtt.page_state(p).name == {"plain": "NonConfidential", "free": "ConfidentialFree",
                                              "assigned": "ConfidentialAssigned"}[state]
            assert mtt.owner_of(p) == owner


@given(st.lists(st.integers(0, PAGES - 1), min_size=1, max_size=8, unique=True),
       st.binary(min_size=1, max_size=64))
def test_every_confidential_exit_scrubs(pages, sentinel):
    mtt = make_mtt(PAGES)
    mtt.convert_range(0, PAGES)
    for p in pages:
        mtt.assign_page(p, 3, PageUse.TvmData)
        mtt.memory.write_page(p, sentinel)
        mtt.release_page(p)
        assert mtt.memory.is_zero(p)
        mtt.memory.write_page(p, sentinel)
    mtt.reclaim_range(0, PAGES)
    assert not mtt.memory.data.any()
