"""The nine acceptance criteria, each at its stated size, tolerance and time limit."""

from __future__ import annotations

import itertools
import random
import struct
import time

from covesim import AccessKind, CoveError, Exit, Platform, PlatformConfig, Touch, Wfi
from covesim import TvmProgram, program
from covesim.attestation import AttestationEvidence, Policy, verify_encoded
from covesim.hart import HartException, InterruptFile, interrupt_file_access
from covesim.mtt import HOST, TSM, TSM_OWNER, AccessContext, Domain, MemoryTrackingTable, PageUse
from covesim.mtt import PhysicalMemory
from covesim.platform import HOST_MODES
from covesim.scenario import run_scenario
from covesim.scenario.catalog import load_scenario
from covesim.scenario.fuzz import fuzz
from covesim.tsm import FUNCTION_NAMES, TSM_INFO, ExitReason
from covesim.tsm_driver import REG_A0, REG_A6, DomainSwitchRequest

from conftest import GPA
from oracles import ifile_exception, measurement_chain, mtt_allows, sha256, vcpu_record

STATE_WORDS = {0: "plain", 1: "free", 2: "assigned"}
KIND_WORDS = {AccessKind.Load: "load", AccessKind.Store: "store",
              AccessKind.Fetch: "fetch", AccessKind.PageWalk: "walk"}


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_rule_table_exhaustive(criterion):
    start = time.perf_counter()
    mtt = MemoryTrackingTable(PhysicalMemory(64))
    mtt.convert_range(20, 44)
    owners = (0, 1, TSM_OWNER)
    for i, page in enumerate(range(40, 64)):
        mtt.assign_page(page, owners[i % 3], list(PageUse)[i % len(PageUse)])
    contexts = [AccessContext(0, HOST, k) for k in AccessKind]
    contexts += [AccessContext(1, TSM, k) for k in AccessKind]
    contexts += [AccessContext(1, Domain.tvm(t), k) for t in (0, 1, 2) for k in AccessKind]
    states_seen, checks, mismatches = set(), 0, []
    for page, ctx in itertools.product(range(64), contexts):
        state = STATE_WORDS[int(mtt.state[page])]
        states_seen.add(state)
        same = mtt.owner_of(page) == ctx.domain.tvm_id
        want = mtt_allows(state, ctx.c, ctx.domain.kind.value, same, KIND_WORDS[ctx.kind])
        checks += 1
        if mtt.check(page, ctx).allowed != want:
            mismatches.append((page, ctx))
    elapsed = time.perf_counter() - start
    ok = not mismatches and states_seen == {"plain", "free", "assigned"} and elapsed < 1.0
    criterion(1, ok, f"{checks} checks, {len(mismatches)} mismatches", elapsed)
    assert not mismatches, mismatches[:5]
    assert states_seen == {"plain", "free", "assigned"}
    assert elapsed < 1.0


# -- 2 ---------------------------------------------------------------------------------

def _lifecycle(order):
    """Build up to the three ordered steps, run them in ``order``, and return each outcome."""
    p = Platform(PlatformConfig(memory_pages=64))
    h = p.host
    h.convert(0x10, 6)
    t = h.tvm_create(0x10)
    h.add_page_table_pages(t, 0x11)
    h.add_memory_region(t, GPA, 2)
    h.create_vcpu(t, 0, 0x12, program(Exit(0)))
    p.host_write_bytes(0x30, b"payload")
    steps = {
        "add_measured_pages": lambda: h.add_measured_page(t, 0x30, 0x13, GPA),
        "finalize": lambda: h.finalize(t),
        "run": lambda: h.run(t, 0),
    }
    out = []
    for name in order:
        try:
            steps[name]()
            out.append("ok")
        except CoveError as e:
            out.append(e.code.name)
    return out


def _documented(order):
    """Measured adds are refused once finalized; runs are refused until finalized."""
    finalized, out = False, []
    for name in order:
        if name == "finalize":
            finalized = True
            out.append("ok")
        elif name == "add_measured_pages":
            out.append("WrongPhase" if finalized else "ok")
        else:
            out.append("ok" if finalized else "WrongPhase")
    return out


def test_criterion_2_lifecycle_conformance(criterion):
    start = time.perf_counter()
    scenario = load_scenario("lifecycle_happy_path")
    report = run_scenario(scenario)
    covh = [FUNCTION_NAMES[i] for i in range(0x0E)]
    first_seen = []
    for step in scenario.steps:
        if step.op in covh and step.op not in first_seen:
            first_seen.append(step.op)
    canonical = ["add_measured_pages", "finalize", "run"]
    swaps = []
    for i in range(len(canonical) - 1):
        order = list(canonical)
        order[i], order[i + 1] = order[i + 1], order[i]
        swaps.append(order)
    bad = [(o, _lifecycle(o), _documented(o)) for o in swaps if _lifecycle(o) != _documented(o)]
    # every swap must trip exactly one documented WrongPhase
    errors = [_documented(o).count("WrongPhase") for o in swaps]
    in_order = _lifecycle(canonical)
    elapsed = time.perf_counter() - start
    ok = (report.ok and first_seen == covh and not bad and errors == [1, 1]
          and in_order == ["ok"] * 3 and elapsed < 1.0)
    criterion(2, ok, f"happy path {len(report.failures)} failures over {len(first_seen)} intrinsics, "
                     f"{len(swaps)} adjacent swaps, {len(bad)} wrong", elapsed)
    assert report.ok, report.summary()
    assert first_seen == covh
    assert in_order == ["ok"] * 3
    assert not bad, bad
    assert errors == [1, 1]
    assert elapsed < 1.0


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_ownership_fuzz(criterion):
    start = time.perf_counter()
    reports = [fuzz(seed, 100_000) for seed in (1, 2, 3)]
    elapsed = time.perf_counter() - start
    violations = sum(len(r.violations) for r in reports)
    ops = sum(r.ops_run for r in reports)
    ok = violations == 0 and ops == 300_000 and elapsed < 60.0
    criterion(3, ok, f"{ops} ops over 3 seeds, {violations} divergences", elapsed)
    for r in reports:
        assert r.ok, r.violations[:3]
    assert ops == 300_000
    assert elapsed < 60.0


# -- 4 ---------------------------------------------------------------------------------

def _scrub_cycle(p: Platform, rng: random.Random) -> tuple[int, int]:
    """One convert -> assign -> sentinel -> destroy -> reclaim or reassign cycle.

    Returns (nonzero bytes the host saw after reclaim, nonzero bytes a second TVM could see).
    """
    h = p.host
    n = rng.randint(1, 3)
    total = 3 + 2 * n
    base = rng.randrange(0x10, 0x60 - total)
    h.convert(base, total)
    t = h.tvm_create(base)
    h.add_page_table_pages(t, base + 1)
    h.add_memory_region(t, GPA, 2 * n)
    for j in range(n):
        p.host_write_bytes(0x70, rng.randbytes(4096))
        h.add_measured_page(t, 0x70, base + 3 + j, GPA + j * 4096)
    offsets = [rng.randrange(0, 4096, 8) for _ in range(n)]
    actions = [Touch(GPA + (n + j) * 4096 + off, AccessKind.Store, rng.getrandbits(64) | 1)
               for j, off in enumerate(offsets)]
    actions += [Touch(GPA + j * 4096, AccessKind.Load) for j in range(n)]
    h.create_vcpu(t, 0, base + 2, TvmProgram(tuple(actions)))
    h.finalize(t)
    spare = base + 3 + n
    while True:
        ex = h.run(t, 0)
        if ex.reason is not ExitReason.GuestPageFault:
            break
        h.add_zero_page(t, spare, ex.value)
        spare += 1
    pages = range(base, base + total)
    assert all(not p.memory.is_zero(pg) for pg in range(base + 3, base + total))
    h.destroy(t)
    host_seen = tvm_seen = 0
    if rng.random() < 0.5:
        h.reclaim(base, total)
        for pg in pages:
            host_seen += sum(p.host_read(pg, off) != 0 for off in [0] + offsets)
            host_seen += int(not p.memory.is_zero(pg))
    else:
        h.reassign(base, total)
        # a second TVM gets the same pages; what it is handed must already be clean
        tvm_seen += sum(int(not p.memory.is_zero(pg)) for pg in pages)
        t2 = h.tvm_create(base)
        h.add_page_table_pages(t2, base + 1)
        h.add_memory_region(t2, GPA, 2 * n)
        loads = [Touch(GPA + j * 4096 + off, AccessKind.Load)
                 for j in range(2 * n) for off in offsets]
        h.create_vcpu(t2, 0, base + 2, TvmProgram(tuple(loads)))
        h.finalize(t2)
        spare = base + 3
        while True:
            ex = h.run(t2, 0)
            if ex.reason is not ExitReason.GuestPageFault:
                break
            h.add_zero_page(t2, spare, ex.value)
            spare += 1
        tvm_seen += int(ex.value != 0)
        h.destroy(t2)
        h.reclaim(base, total)
    return host_seen, tvm_seen


def test_criterion_4_scrub(criterion):
    rng = random.Random(4)
    p = Platform(PlatformConfig(memory_pages=128))
    start = time.perf_counter()
    host_seen = tvm_seen = 0
    for _ in range(1000):
        a, b = _scrub_cycle(p, rng)
        host_seen += a
        tvm_seen += b
    elapsed = time.perf_counter() - start
    ok = host_seen == 0 and tvm_seen == 0 and elapsed < 10.0 and not p.invariant_violations()
    criterion(4, ok, f"1000 cycles, host saw {host_seen} and second TVM saw {tvm_seen} nonzero", elapsed)
    assert host_seen == 0 and tvm_seen == 0
    assert p.invariant_violations() == []
    assert elapsed < 10.0


def test_scrub_check_catches_a_missing_scrub(monkeypatch):
    # the criterion 4 harness must notice if scrubbing stopped happening
    rng = random.Random(9)
    p = Platform(PlatformConfig(memory_pages=128))
    monkeypatch.setattr(PhysicalMemory, "zero", lambda self, start, count=1: None)
    seen = sum(sum(_scrub_cycle(p, rng)) for _ in range(10))
    assert seen > 0


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_context_isolation(criterion):
    rng = random.Random(5)
    p = Platform(PlatformConfig(memory_pages=64))
    planted: list[int] = []

    def plant(hart):
        for reg in range(1, 32):
            s = rng.getrandbits(64) | (1 << 63)
            planted.append(s)
            hart.write_reg(reg, s)
    p.driver.tsm_register_hook = plant
    fids = [TSM_INFO, 0x01, 0x0D, 0x0C, 0x02, 0x08, 0x3F, 0x100]
    start = time.perf_counter()
    leaks = changed = mode_changes = 0
    for i in range(10_000):
        hart = p.harts[i % 2]
        hart.load_regs([rng.getrandbits(62) for _ in range(32)])
        planted.clear()
        req = DomainSwitchRequest(rng.choice(fids), (rng.randrange(0x10, 0x30), rng.randint(1, 2)))
        before, mode = list(hart.gprs), (hart.priv, hart.v, hart.c)
        p.driver.teecall(hart, req)
        after = hart.gprs
        secrets = set(planted)
        leaks += sum(v in secrets for v in after)
        changed += sum(after[r] != before[r] for r in range(32) if not REG_A0 <= r <= REG_A6)
        mode_changes += (hart.priv, hart.v, hart.c) != mode
    elapsed = time.perf_counter() - start
    ok = leaks == 0 and changed == 0 and mode_changes == 0
    criterion(5, ok, f"10000 round-trips, {leaks} leaked sentinels, {changed} changed registers", elapsed)
    assert leaks == 0 and changed == 0 and mode_changes == 0


# -- 6 ---------------------------------------------------------------------------------

def _build(p: Platform, pages, prog, base=0x10) -> bytes:
    h = p.host
    t = h.tvm_create(base)
    h.add_page_table_pages(t, base + 1)
    h.add_memory_region(t, GPA, 8)
    for i, (gpa, content) in enumerate(pages):
        p.host_write_bytes(0x70, content)
        h.add_measured_page(t, 0x70, base + 3 + i, gpa)
    h.create_vcpu(t, 0, base + 2, prog)
    digest = h.finalize(t)
    h.destroy(t)
    return digest


def test_criterion_6_measurement(criterion):
    rng = random.Random(6)
    p = Platform(PlatformConfig(memory_pages=128))
    p.host.convert(0x10, 12)
    start = time.perf_counter()
    digests, problems = set(), []
    for i in range(1000):
        k = rng.randint(2, 4)
        gpas = [GPA + g * 4096 for g in rng.sample(range(8), k)]
        pages = [(g, rng.randbytes(rng.randint(0, 64)).ljust(4096, b"\0")) for g in gpas]
        prog = program(*[Touch(rng.choice(gpas), AccessKind.Load) for _ in range(rng.randint(0, 3))],
                       Exit(rng.getrandbits(8)))
        d = _build(p, pages, prog)
        records = pages + [vcpu_record(0, prog.encode())]
        hash_fn = (lambda b: sha256(b)) if i % 100 == 0 else None
        if d != measurement_chain(records, hash_fn):
            problems.append((i, "chain"))
        if _build(p, pages, prog) != d:
            problems.append((i, "determinism"))
        j, bit = rng.randrange(k), rng.randrange(4096 * 8)
        flipped = bytearray(pages[j][1])
        flipped[bit // 8] ^= 1 << (bit % 8)
        mutated = pages[:j] + [(pages[j][0], bytes(flipped))] + pages[j + 1:]
        d_flip = _build(p, mutated, prog)
        if d_flip == d or d_flip != measurement_chain(mutated + [records[-1]]):
            problems.append((i, "bit flip"))
        a, b = rng.sample(range(k), 2)
        swapped = list(pages)
        swapped[a], swapped[b] = swapped[b], swapped[a]
        d_swap = _build(p, swapped, prog)
        if d_swap == d or d_swap != measurement_chain(swapped + [records[-1]]):
            problems.append((i, "order swap"))
        digests.add(d)
    elapsed = time.perf_counter() - start
    ok = not problems and len(digests) == 1000
    criterion(6, ok, f"1000 builds, {len(digests)} distinct digests, {len(problems)} problems", elapsed)
    assert not problems, problems[:5]
    assert len(digests) == 1000


# -- 7 ---------------------------------------------------------------------------------

def _field_spans(blob: bytes) -> list[tuple[str, int, int]]:
    """(name, start, end) of every certificate field's content bytes inside an evidence blob."""
    def u32(pos):
        return struct.unpack_from("<I", blob, pos)[0]
    spans, pos = [], 8
    for c in range(u32(4)):
        cert_end = pos + 4 + u32(pos)
        pos += 4 + 7
        for name in ("subject", "key", "claims", "issuer", "signature"):
            n = u32(pos)
            if name == "claims":
                inner = pos + 8
                for _ in range(u32(pos + 4)):
                    for part in ("claim-name", "claim-value"):
                        m = u32(inner)
                        spans.append((f"cert{c}.{part}", inner + 4, inner + 4 + m))
                        inner += 4 + m
            else:
                spans.append((f"cert{c}.{name}", pos + 4, pos + 4 + n))
            pos += 4 + n
        assert pos == cert_end
    return [s for s in spans if s[2] > s[1]]


def test_criterion_7_attestation(criterion):
    rng = random.Random(7)
    start = time.perf_counter()
    accepted = tamper_total = tamper_rejected = 0
    debug_forbidden = debug_total = 0
    for i in range(1000):
        cfg = PlatformConfig(memory_pages=48, root_secret=rng.randbytes(32),
                             tsm_blob=rng.randbytes(rng.randint(1, 3000)),
                             tsm_driver_blob=rng.randbytes(rng.randint(1, 500)),
                             tsm_version=rng.randint(1, 9))
        p = Platform(cfg)
        h = p.host
        debug = rng.random() < 0.3
        h.convert(0x10, 6)
        t = h.tvm_create(0x10, 1, debug)
        h.add_page_table_pages(t, 0x11)
        h.add_memory_region(t, GPA, 1)
        p.host_write_bytes(0x20, rng.randbytes(rng.randint(1, 4096)))
        h.add_measured_page(t, 0x20, 0x12, GPA)
        h.create_vcpu(t, 0, 0x13, program(Exit(0)))
        digest = h.finalize(t)
        blob = p.guest_evidence(t, 0, rng.randbytes(64)).encode()
        root = p.root_public_key
        policy = Policy((sha256(cfg.tsm_driver_blob), sha256(cfg.tsm_blob)), debug, digest)
        accepted += verify_encoded(blob, root, policy).accepted
        if debug:
            debug_total += 1
            strict = Policy(policy.expected_tcb_digests, False, digest)
            debug_forbidden += str(verify_encoded(blob, root, strict)) == "Reject(DebugForbidden)"
        # one tampered byte inside every field of every certificate, plus one anywhere
        spans = _field_spans(blob)
        positions = [rng.randrange(a, b) for _, a, b in spans] + [rng.randrange(len(blob))]
        for pos in positions:
            bad = bytearray(blob)
            bad[pos] ^= rng.randint(1, 255)
            tamper_total += 1
            tamper_rejected += not verify_encoded(bytes(bad), root, policy).accepted
    elapsed = time.perf_counter() - start
    ok = (accepted == 1000 and tamper_rejected == tamper_total
          and debug_forbidden == debug_total > 0)
    criterion(7, ok, f"{accepted}/1000 accepted, {tamper_rejected}/{tamper_total} tampers rejected, "
                     f"{debug_forbidden}/{debug_total} debug rejected", elapsed)
    assert accepted == 1000
    assert tamper_rejected == tamper_total
    assert debug_forbidden == debug_total > 0


def test_every_byte_tamper_rejects_on_one_platform():
    p = Platform(PlatformConfig(memory_pages=48))
    h = p.host
    h.convert(0x10, 4)
    t = h.tvm_create(0x10)
    h.create_vcpu(t, 0, 0x11, program(Exit(0)))
    h.finalize(t)
    blob = p.guest_evidence(t, 0, bytes(64)).encode()
    assert len(_field_spans(blob)) >= 4 * 4
    for pos in range(len(blob)):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        assert not verify_encoded(bytes(bad), p.root_public_key).accepted, pos
    assert verify_encoded(blob, p.root_public_key).accepted
    assert AttestationEvidence.decode(blob).encode() == blob


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_8_interrupt_file_truth_table(criterion):
    start = time.perf_counter()
    p = Platform(PlatformConfig(memory_pages=64))
    h = p.host
    h.convert(0x10, 8)
    tvms = []
    for base in (0x10, 0x14):
        t = h.tvm_create(base)
        h.create_vcpu(t, 0, base + 1, program(Exit(0)))
        h.finalize(t)
        tvms.append((t, h.bind_interrupt_file(t, 0, base + 2)))
    (a, file_a), (b, file_b) = tvms
    unbound = InterruptFile(99, 0x30)
    files = {"own": p.tsm.files[file_a], "other": p.tsm.files[file_b], "unbound": unbound}

    def in_host(mode, fn):
        hart = p.harts[0]
        saved = hart.v, hart.priv
        hart.v, hart.priv = HOST_MODES[mode]
        try:
            return fn(hart)
        finally:
            hart.v, hart.priv = saved

    def in_tsm(fn):
        box = []
        p.driver.tsm_register_hook = lambda hart: box.append(fn(hart)) if not box else None
        try:
            p.call(TSM_INFO)
        finally:
            p.driver.tsm_register_hook = None
        return box[0]

    def in_tvm(fn):
        return p._in_guest(a, 0, 0, lambda hart, tvm, vcpu: fn(hart))

    accessors = {f"host@{m}": (lambda fn, m=m: in_host(m, fn)) for m in HOST_MODES}
    accessors["tsm"] = in_tsm
    accessors["tvm"] = in_tvm
    rows, wrong, cells = set(), [], 0
    for (who, enter), (owner, file), kind in itertools.product(
            accessors.items(), files.items(), (AccessKind.Load, AccessKind.Store)):
        def attempt(hart):
            try:
                interrupt_file_access(hart, file, kind, file.pending_bits())
                return (hart.c, hart.v, None)
            except HartException as e:
                return (hart.c, hart.v, e.kind.name)
        c, v, got = enter(attempt)
        same = who == "tvm" and owner == "own"
        want = None if owner == "unbound" else ifile_exception(c, v, same)
        rows.add((c, v, owner))
        cells += 1
        if got != want:
            wrong.append((who, owner, kind.name, got, want))
    elapsed = time.perf_counter() - start
    expected_rows = {(c, v, o) for c, v in ((0, 0), (0, 1), (1, 0), (1, 1)) for o in files}
    ok = not wrong and rows == expected_rows and elapsed < 1.0
    criterion(8, ok, f"{cells} cells over {len(rows)} (C, V, ownership) rows, {len(wrong)} wrong", elapsed)
    assert not wrong, wrong
    assert rows == expected_rows
    assert elapsed < 1.0


# -- 9 ---------------------------------------------------------------------------------

REGION_PAGES = 6


def _random_program(rng: random.Random) -> TvmProgram:
    actions = []
    for _ in range(rng.randint(1, 14)):
        gpa = GPA + rng.randrange(REGION_PAGES) * 4096 + rng.choice((0, 8, 16, 4088))
        r = rng.random()
        if r < 0.4:
            actions.append(Touch(gpa, AccessKind.Store, rng.getrandbits(64)))
        elif r < 0.8:
            actions.append(Touch(gpa, AccessKind.Load))
        elif r < 0.9:
            actions.append(Touch(gpa, AccessKind.Fetch))
        else:
            actions.append(Wfi())
    if rng.random() < 0.5:
        actions.append(Exit(rng.getrandbits(16)))
    return TvmProgram(tuple(actions))


def _run_variant(p: Platform, prog: TvmProgram, payload: bytes, premap: bool):
    h = p.host
    t = h.tvm_create(0x10)
    h.add_page_table_pages(t, 0x11)
    h.add_memory_region(t, GPA, REGION_PAGES)
    p.host_write_bytes(0x70, payload)
    h.add_measured_page(t, 0x70, 0x13, GPA)
    h.create_vcpu(t, 0, 0x12, prog)
    h.finalize(t)
    spare = iter(range(0x14, 0x14 + REGION_PAGES))
    if premap:
        for g in range(1, REGION_PAGES):
            h.add_zero_page(t, next(spare), GPA + g * 4096)
    faults = 0
    while True:
        ex = h.run(t, 0)
        if ex.reason is ExitReason.Halted:
            break
        if ex.reason is ExitReason.GuestPageFault:
            faults += 1
            h.add_zero_page(t, next(spare), ex.value)
    tvm = p.tsm.tvms[t]
    visible = {}
    for g in range(REGION_PAGES):
        m = tvm.gstage.get((GPA >> 12) + g)
        visible[g] = p.memory.read_page(m.spa) if m else bytes(4096)
    regs = p.tsm._load_vcpu_image(tvm.vcpus[0])
    h.destroy(t)
    return ex.value, visible, regs, faults


def test_criterion_9_demand_fault_equivalence(criterion):
    rng = random.Random(9)
    pa = Platform(PlatformConfig(memory_pages=128))
    pb = Platform(PlatformConfig(memory_pages=128))
    pa.host.convert(0x10, 12)
    pb.host.convert(0x10, 12)
    start = time.perf_counter()
    mismatches, faults_taken = [], 0
    for i in range(1000):
        prog = _random_program(rng)
        payload = rng.randbytes(64)
        code_a, mem_a, regs_a, _ = _run_variant(pa, prog, payload, premap=True)
        code_b, mem_b, regs_b, faults = _run_variant(pb, prog, payload, premap=False)
        faults_taken += faults
        if (code_a, mem_a, regs_a) != (code_b, mem_b, regs_b):
            mismatches.append(i)
    elapsed = time.perf_counter() - start
    ok = not mismatches and faults_taken > 0
    criterion(9, ok, f"1000 programs, {faults_taken} demand faults resumed, "
                     f"{len(mismatches)} mismatches", elapsed)
    assert not mismatches, mismatches[:5]
    assert faults_taken > 0
