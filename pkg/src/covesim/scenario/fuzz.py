"""Seeded, model-checked fuzzing of the host ABI.

Each step picks a host or guest operation, biased toward calls that are legal
in the current lifecycle state, with a configurable share of deliberately
illegal ones. The reference oracle predicts the outcome before the call runs;
afterwards the fuzzer compares the outcome, the full page-ownership table, a
random access-control probe, and the platform's own structural invariants.
"""

from __future__ import annotations

import bisect
import hashlib
import itertools
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..mtt import HOST as HOST_DOMAIN, TSM as TSM_DOMAIN, AccessContext, AccessKind, Domain
from ..platform import Platform, PlatformConfig
from ..tsm import Exit, TvmProgram, Touch, Wfi
from .dsl import Actor, Step
from .oracle import STATE_NAMES, F, N, OwnershipOracle, Refused
from .runner import Outcome, _Context, execute_step

HOST = Actor("host")
ADVERSARY = Actor("adversary")

GPA_BASE_PAGE = 0x80000
REGION_SLOTS = 8
SLOT_PAGES = 16
MAX_VCPUS = 3

_PROBE_KINDS = ((AccessKind.Load, "load"), (AccessKind.Store, "store"),
                (AccessKind.Fetch, "fetch"), (AccessKind.PageWalk, "walk"))

Mutation = Callable[[Platform, int], None]


@dataclass
class FuzzReport:
    seed: int
    ops: int
    illegal_bias: float
    ops_run: int = 0
    violations: list[tuple[int, str]] = field(default_factory=list)
    op_counts: Counter = field(default_factory=Counter)
    outcome_counts: Counter = field(default_factory=Counter)
    illegal_injections: int = 0
    tvms_created: int = 0
    max_live_tvms: int = 0
    trace_digest: str = ""

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def first_violation(self) -> Optional[int]:
        return self.violations[0][0] if self.violations else None

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "ops": self.ops,
            "illegal_bias": self.illegal_bias,
            "ops_run": self.ops_run,
            "violations": [list(v) for v in self.violations],
            "op_counts": dict(sorted(self.op_counts.items())),
            "outcome_counts": dict(sorted(self.outcome_counts.items())),
            "illegal_injections": self.illegal_injections,
            "tvms_created": self.tvms_created,
            "max_live_tvms": self.max_live_tvms,
            "trace_digest": self.trace_digest,
        }, sort_keys=True, indent=1)


def _program_actions(prog: TvmProgram) -> list:
    out = []
    for a in prog.actions:
        if isinstance(a, Touch):
            out.append((a.kind.value if a.kind is not AccessKind.Store else "store", a.gpa))
        elif isinstance(a, Wfi):
            out.append(("wfi",))
        else:
            out.append(("exit", a.code))
    return out


class _Fuzzer:
    def __init__(self, seed: int, illegal_bias: float, memory_pages: int, max_tvms: int):
        self.rng = random.Random(seed)
        self.bias = illegal_bias
        self.platform = Platform(PlatformConfig(memory_pages=memory_pages, max_tvms=max_tvms))
        p = self.platform
        self.ctx = _Context(p)
        self.n = memory_pages
        tcb = len(p.mtt.pages_owned_by(-1))
        self.oracle = OwnershipOracle(memory_pages, tcb, p.scratch_page, max_tvms)
        self.scratch = p.scratch_page
        self._by_state: dict[int, list[int]] = {}   # page lists per state, cleared every step
        self._contexts: dict[tuple, AccessContext] = {}

    # -- page pickers ----------------------------------------------------

    def _pages_in(self, state: int) -> list[int]:
        cached = self._by_state.get(state)
        if cached is None:
            st = self.oracle.state
            cached = self._by_state[state] = [i for i, s in enumerate(st[:self.n - 1]) if s == state]
        return cached

    def _run_from(self, state: int) -> Optional[tuple[int, int]]:
        pages = self._pages_in(state)
        if not pages:
            return None
        start = self.rng.choice(pages)
        count = 1
        limit = self.rng.randint(1, 4)
        while count < limit and start + count < self.n - 1 and self.oracle.state[start + count] == state:
            count += 1
        return start, count

    def _one(self, state: int) -> Optional[int]:
        pages = self._pages_in(state)
        return self.rng.choice(pages) if pages else None

    def _tvm(self, pred) -> Optional[int]:
        ids = [t for t, m in sorted(self.oracle.tvms.items()) if pred(m)]
        return self.rng.choice(ids) if ids else None

    def _gpa_in(self, t, shared: Optional[bool], unmapped: bool = False) -> Optional[int]:
        cands = [first + i for first, count, sh in t.regions if shared is None or sh == shared
                 for i in range(count)]
        if unmapped:
            cands = [c for c in cands if c not in t.mapped]
        return self.rng.choice(cands) * 4096 if cands else None

    def _random_gpa(self) -> int:
        page = GPA_BASE_PAGE + self.rng.randrange(REGION_SLOTS * SLOT_PAGES)
        return page * 4096 + (self.rng.randrange(512) * 8 if self.rng.random() < 0.2 else 0)

    def _program(self, t) -> TvmProgram:
        acts = []
        for _ in range(self.rng.randint(1, 6)):
            r = self.rng.random()
            if r < 0.75:
                page = self._gpa_in(t, None) if t.regions and self.rng.random() < 0.8 else None
                gpa = (page if page is not None else self._random_gpa() & ~0xFFF) + self.rng.randrange(512) * 8
                kind = self.rng.choice((AccessKind.Load, AccessKind.Store, AccessKind.Fetch))
                acts.append(Touch(gpa, kind, self.rng.getrandbits(16) if kind is AccessKind.Store else 0))
            elif r < 0.9:
                acts.append(Wfi())
            else:
                acts.append(Exit(self.rng.randrange(256)))
        if self.rng.random() < 0.5:
            acts.append(Exit(self.rng.randrange(256)))
        return TvmProgram(tuple(acts))

    # -- generation ------------------------------------------------------

    def legal(self) -> Optional[tuple[Actor, str, tuple]]:
        o, rng = self.oracle, self.rng
        choices = []
        n_free, n_plain = o.state.count(F), o.state.count(N)
        choices.append(("convert", 3 if n_free < 8 else 1))
        choices.append(("reclaim", 2 if n_plain < 8 else 0.5))
        choices.append(("reassign", 0.3))
        choices.append(("tvm_create", 2 if len(o.tvms) < 2 else 0.5))
        choices.append(("probe", 1))
        if o.tvms:
            choices += [("tvm_add_page_table_pages", 1), ("tvm_add_memory_region", 2),
                        ("tvm_add_measured_pages", 2), ("tvm_create_vcpu", 2), ("tvm_finalize", 1.5),
                        ("tvm_run", 5), ("tvm_add_zero_pages", 3), ("tvm_add_shared_pages", 1.5),
                        ("covg_share", 1), ("covg_unshare", 0.3), ("covi_bind_interrupt_file", 0.5),
                        ("tvm_destroy", 0.1 + 0.1 * len(o.tvms))]
        names, weights = zip(*choices)
        cum = list(itertools.accumulate(weights))
        # some picks have no legal arguments in the current state; redraw a few times
        for _ in range(6):
            chosen = self._legal_args(names[bisect.bisect(cum, rng.random() * cum[-1])])
            if chosen is not None:
                return chosen
        return None

    def _legal_args(self, op: str):
        o, rng = self.oracle, self.rng
        if op == "convert":
            r = self._run_from(N)
            return r and (HOST, op, r)
        if op in ("reclaim", "reassign"):
            r = self._run_from(F)
            return r and (HOST, op, r)
        if op == "probe":
            return (ADVERSARY, "read", (rng.randrange(self.n),))
        if op == "tvm_create":
            p = self._one(F)
            return None if p is None else (HOST, op, (p,))
        if op == "tvm_add_page_table_pages":
            t, p = self._tvm(lambda m: True), self._one(F)
            return None if p is None else (HOST, op, (t, p))
        if op == "tvm_add_memory_region":
            t = self._tvm(lambda m: not m.running)
            if t is None:
                return None
            slot = rng.randrange(REGION_SLOTS)
            count = rng.randint(1, SLOT_PAGES)
            kind = "shared" if rng.random() < 0.3 else "confidential"
            return (HOST, op, (t, (GPA_BASE_PAGE + slot * SLOT_PAGES) * 4096, count, kind))
        if op == "tvm_add_measured_pages":
            t = self._tvm(lambda m: not m.running)
            if t is None:
                return None
            if not self._has_table_room(o.tvms[t]):
                return self._legal_args("tvm_add_page_table_pages")
            gpa = self._gpa_in(o.tvms[t], False, unmapped=True)
            src, dest = self._one(N), self._one(F)
            if None in (gpa, src, dest):
                return None
            return (HOST, op, (t, src, dest, gpa))
        if op == "tvm_create_vcpu":
            t = self._tvm(lambda m: not m.running and len(m.vcpus) < MAX_VCPUS)
            p = self._one(F)
            if t is None or p is None:
                return None
            vid = min(set(range(MAX_VCPUS)) - set(o.tvms[t].vcpus))
            return (HOST, op, (t, vid, p, self._program(o.tvms[t])))
        if op == "tvm_finalize":
            t = self._tvm(lambda m: not m.running and m.vcpus)
            return None if t is None else (HOST, op, (t,))
        if op == "tvm_run":
            t = self._tvm(lambda m: m.running and any(v.runnable for v in m.vcpus.values()))
            if t is None:
                return None
            vid = rng.choice([i for i, v in sorted(o.tvms[t].vcpus.items()) if v.runnable])
            return (HOST, op, (t, vid))
        if op == "tvm_add_zero_pages":
            t = self._tvm(lambda m: m.running)
            dest = self._one(F)
            if t is None or dest is None:
                return None
            if not self._has_table_room(o.tvms[t]):
                return (HOST, "tvm_add_page_table_pages", (t, dest))
            gpa = self._faulting_gpa(o.tvms[t]) or self._gpa_in(o.tvms[t], False, unmapped=True)
            return None if gpa is None else (HOST, op, (t, dest, gpa))
        if op == "tvm_add_shared_pages":
            t = self._tvm(lambda m: m.running and any(g not in m.mapped for g in m.offers))
            src = self._one(N)
            if t is None or src is None:
                return None
            gpa = rng.choice(sorted(g for g in o.tvms[t].offers if g not in o.tvms[t].mapped))
            return (HOST, op, (t, src, gpa * 4096))
        if op in ("covg_share", "covg_unshare"):
            t = self._tvm(lambda m: m.running and any(sh for _, _, sh in m.regions))
            if t is None:
                return None
            gpa = self._gpa_in(o.tvms[t], True)
            vid = min(o.tvms[t].vcpus)
            return (Actor("tvm", "vs", t, vid), op, (gpa, rng.randint(1, 2)))
        if op == "covi_bind_interrupt_file":
            t = self._tvm(lambda m: any(not v.bound for v in m.vcpus.values()))
            p = self._one(F)
            if t is None or p is None:
                return None
            vid = rng.choice([i for i, v in sorted(o.tvms[t].vcpus.items()) if not v.bound])
            return (HOST, op, (t, vid, p))
        if op == "tvm_destroy":
            t = self._tvm(lambda m: True)
            return (HOST, op, (t,))
        raise AssertionError(op)

    @staticmethod
    def _has_table_room(t) -> bool:
        return len(t.mapped) < t.tables * 512

    def _faulting_gpa(self, t) -> Optional[int]:
        for v in t.vcpus.values():
            if v.runnable and v.pc < len(v.actions) and v.actions[v.pc][0] != "wfi" \
                    and v.actions[v.pc][0] != "exit":
                page = v.actions[v.pc][1] // 4096
                if page not in t.mapped and t.region(page) is False:
                    return page * 4096
        return None

    def illegal(self) -> tuple[Actor, str, tuple]:
        rng, o = self.rng, self.oracle
        page = lambda: rng.randrange(self.n + 4)
        live = sorted(o.tvms)

        def tvm() -> int:
            if live and rng.random() < 0.75:
                return rng.choice(live)
            return rng.randrange(o.next_tvm + 2)

        vcpu = lambda: rng.randrange(MAX_VCPUS + 1)
        op = rng.choice(("convert", "reclaim", "reassign", "tvm_create", "tvm_add_page_table_pages",
                         "tvm_add_memory_region", "tvm_add_measured_pages", "tvm_create_vcpu",
                         "tvm_finalize", "tvm_run", "tvm_add_zero_pages", "tvm_add_shared_pages",
                         "tvm_destroy", "covi_bind_interrupt_file", "covg_share", "covg_unshare"))
        if op in ("convert", "reclaim", "reassign"):
            return HOST, op, (page(), rng.randrange(6))
        if op == "tvm_create":
            return HOST, op, (page(), rng.randrange(3))
        if op == "tvm_add_page_table_pages":
            return HOST, op, (tvm(), page(), rng.randrange(3))
        if op == "tvm_add_memory_region":
            return HOST, op, (tvm(), self._random_gpa(), rng.randrange(4),
                              rng.choice(("confidential", "shared")))
        if op == "tvm_add_measured_pages":
            return HOST, op, (tvm(), page(), page(), self._random_gpa())
        if op == "tvm_create_vcpu":
            t = o.tvms.get(rng.randrange(o.next_tvm + 1))
            prog = self._program(t) if t else TvmProgram((Exit(1),))
            return HOST, op, (tvm(), vcpu(), page(), prog)
        if op in ("tvm_finalize", "tvm_destroy"):
            return HOST, op, (tvm(),)
        if op == "tvm_run":
            return HOST, op, (tvm(), vcpu())
        if op in ("tvm_add_zero_pages", "tvm_add_shared_pages"):
            return HOST, op, (tvm(), page(), self._random_gpa())
        if op == "covi_bind_interrupt_file":
            return HOST, op, (tvm(), vcpu(), page())
        return Actor("tvm", "vs", tvm(), vcpu()), op, (self._random_gpa(), rng.randint(1, 3))

    # -- prediction ------------------------------------------------------

    def predict(self, actor: Actor, op: str, a: tuple) -> tuple[Outcome, bool]:
        """Expected outcome, and whether an exit value should be compared exactly."""
        o = self.oracle
        try:
            if op == "read":
                if o.host_read(a[0]):
                    return Outcome("fault", "AccessFault", a[0] << 12), True
                return Outcome("ok"), False
            if op == "convert":
                o.convert(*a)
            elif op == "reclaim":
                o.reclaim(*a)
            elif op == "reassign":
                return Outcome("ok", value=o.reassign(*a)), True
            elif op == "tvm_create":
                return Outcome("ok", value=o.tvm_create(*a)), True
            elif op == "tvm_add_page_table_pages":
                o.add_page_table_pages(*a)
            elif op == "tvm_add_memory_region":
                o.add_memory_region(a[0], a[1], a[2], a[3] == "shared")
            elif op == "tvm_add_measured_pages":
                o.add_measured_page(*a)
            elif op == "tvm_create_vcpu":
                o.create_vcpu(a[0], a[1], a[2], _program_actions(a[3]))
            elif op == "tvm_finalize":
                o.finalize(*a)
            elif op == "tvm_run":
                reason, value = o.run(*a)
                return Outcome("exit", reason, value), value is not None
            elif op == "tvm_add_zero_pages":
                o.add_zero_page(*a)
            elif op == "tvm_add_shared_pages":
                o.add_shared_page(*a)
            elif op == "tvm_destroy":
                o.destroy(*a)
            elif op == "covi_bind_interrupt_file":
                return Outcome("ok", value=o.bind_interrupt_file(*a)), True
            elif op == "covg_share":
                o.share(actor.tvm_id, actor.vcpu_id, *a)
            elif op == "covg_unshare":
                o.unshare(actor.tvm_id, actor.vcpu_id, *a)
            else:  # pragma: no cover
                raise AssertionError(op)
        except Refused as r:
            code = r.args[0]
            if code.startswith("fault:"):
                return Outcome("fault", code[6:]), False
            return Outcome("error", code), True
        return Outcome("ok"), True

    # -- checks ----------------------------------------------------------

    def compare(self, expected: Outcome, exact: bool, got: Outcome) -> Optional[str]:
        if expected.kind != got.kind or expected.code != got.code:
            return f"expected {expected}, got {got}"
        if exact and expected.value is not None and expected.value != got.value:
            return f"expected {expected}, got {got}"
        return None

    def check_tables(self) -> list[str]:
        mtt, o = self.platform.mtt, self.oracle
        states, owners = mtt.state.tolist(), mtt.owner.tolist()
        if states == o.state and owners == o.owner:
            return []
        p = next(i for i in range(self.n) if (states[i], owners[i]) != (o.state[i], o.owner[i]))
        return [f"page {p:#x}: mtt says {STATE_NAMES[states[p]]}/{owners[p]}, "
                f"oracle says {STATE_NAMES[o.state[p]]}/{o.owner[p]}"]

    def probe(self) -> Optional[str]:
        rng, o = self.rng, self.oracle
        page = rng.randrange(self.n)
        kind, kname = _PROBE_KINDS[int(rng.random() * 4)]
        pick = rng.random()
        if pick < 0.3:
            c, domain, tid = 0, "host", None
        elif pick < 0.5:
            c, domain, tid = 1, "tsm", None
        else:
            c, domain, tid = 1, "tvm", int(rng.random() * max(o.next_tvm, 1))
        key = (c, tid, kind)
        ctx = self._contexts.get(key)
        if ctx is None:
            dom = HOST_DOMAIN if c == 0 else TSM_DOMAIN if tid is None else Domain.tvm(tid)
            ctx = self._contexts[key] = AccessContext(c, dom, kind)
        got = self.platform.mtt.check(page, ctx).allowed
        want = o.may_access(page, c, domain, tid, kname)
        if got != want:
            return f"probe {domain}{'' if tid is None else tid} {kname} page {page:#x}: " \
                   f"mtt {'allows' if got else 'denies'}, oracle {'allows' if want else 'denies'}"
        return None

def fuzz(seed: int, op_count: int, illegal_bias: float = 0.2, *,
         mutate: Optional[Mutation] = None, memory_pages: int = 96,
         max_tvms: int = 4) -> FuzzReport:
    """Run ``op_count`` oracle-checked operations; identical arguments give identical reports.

    ``mutate`` is a test hook called as ``mutate(platform, seq)`` after each operation and
    before the checks, so detectors can be shown to fire on the first divergent step.
    """
    if op_count < 1:
        raise ValueError("op_count must be at least 1")
    if not 0.0 <= illegal_bias <= 1.0:
        raise ValueError("illegal_bias is a fraction in [0, 1]")
    fz = _Fuzzer(seed & 0xFFFF_FFFF_FFFF_FFFF, illegal_bias, memory_pages, max_tvms)
    report = FuzzReport(seed, op_count, illegal_bias)
    h = hashlib.sha256()
    p = fz.platform
    for seq in range(op_count):
        chosen = None
        fz._by_state.clear()
        if fz.rng.random() >= illegal_bias:
            chosen = fz.legal()
        if chosen is None:
            chosen = fz.illegal()
            report.illegal_injections += 1
        actor, op, args = chosen
        step = Step(actor, op, tuple(args), None)
        expected, exact = fz.predict(actor, op, args)
        got = execute_step(fz.ctx, step)
        if mutate is not None:
            mutate(p, seq)
        delta = p.mtt.drain_delta()
        report.ops_run += 1
        report.op_counts[op] += 1
        report.outcome_counts[got.kind if got.kind != "error" else f"error:{got.code}"] += 1
        h.update(f"{actor}|{op}|{args!r}|{got}\n".encode())
        problems = []
        mismatch = fz.compare(expected, exact, got)
        if mismatch:
            problems.append(f"{step.source()}: {mismatch}")
        problems += fz.check_tables()
        probe = fz.probe()
        if probe:
            problems.append(probe)
        own = p.mtt.owner
        touched = {o for o in (int(own[d]) for d in delta) if o >= 0}
        if actor.kind == "tvm":
            touched.add(actor.tvm_id)
        elif op.startswith("tvm_") and args:
            touched.add(args[0])
        problems += p.invariant_violations(delta, touched)
        for msg in problems:
            report.violations.append((seq, msg))
        if problems:
            break
        report.max_live_tvms = max(report.max_live_tvms, len(fz.oracle.tvms))
    report.tvms_created = fz.oracle.next_tvm
    report.trace_digest = h.hexdigest()
    return report
