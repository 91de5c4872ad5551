"""Execute parsed scenarios against a fresh platform and record a trace."""

from __future__ import annotations

import contextlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..attestation import Policy, verify_evidence
from ..errors import CoveError
from ..hart import ActiveKind, HartException
from ..mtt import AccessKind, PageState
from ..platform import HOST_MODES, Platform, PlatformConfig
from ..tsm import FUNCTION_NAMES, RegionKind
from .catalog import GATE_ERRORS
from .dsl import Expect, Scenario, Step, parse_scenario


@dataclass(frozen=True)
class Outcome:
    kind: str                     # ok | error | fault | exit | verdict
    code: Optional[str] = None
    value: Optional[int] = None

    def __str__(self) -> str:
        parts = [self.kind]
        if self.code is not None:
            parts.append(self.code)
        if self.value is not None:
            parts.append(hex(self.value))
        return " ".join(parts)

    def as_expect(self) -> Expect:
        """The expectation that this outcome, and only outcomes like it, satisfies."""
        if self.kind == "ok":
            return Expect("ok") if self.value is None else Expect("value", value=self.value)
        if self.kind == "exit":
            return Expect("exit", self.code, self.value)
        return Expect(self.kind, self.code)


OK = Outcome("ok")


def matches(expect: Expect, out: Outcome) -> bool:
    if expect.kind == "ok":
        return out.kind in ("ok", "exit", "verdict")
    if expect.kind == "value":
        return out.kind == "ok" and out.value == expect.value
    if expect.kind == "exit":
        return (out.kind == "exit" and out.code == expect.code
                and (expect.value is None or out.value == expect.value))
    return out.kind == expect.kind and out.code == expect.code


@dataclass(frozen=True)
class Failure:
    step: int
    line: int
    source: str
    expected: str
    actual: str


@dataclass
class Report:
    name: str
    steps_run: int = 0
    failures: list[Failure] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    error_coverage: Counter = field(default_factory=Counter)

    @property
    def ok(self) -> bool:
        return not self.failures

    def trace_lines(self) -> list[str]:
        return [json.dumps(rec, separators=(",", ":")) for rec in self.trace]

    def summary(self) -> str:
        lines = [f"{self.name}: {self.steps_run} steps, {len(self.failures)} failures"]
        for f in self.failures:
            lines.append(f"  step {f.step} (line {f.line}) `{f.source}`: "
                         f"expected {f.expected}, got {f.actual}")
        return "\n".join(lines)


def platform_config(cfg: dict) -> PlatformConfig:
    kw = dict(cfg)
    if "debug_platform" in kw:
        kw["debug_platform"] = bool(kw["debug_platform"])
    return PlatformConfig(**kw)


@contextlib.contextmanager
def _mode(platform: Platform, mode: str, hart: int = 0):
    """Run host code on ``hart`` with the given (V, privilege), restoring afterwards."""
    h = platform.harts[hart]
    if mode == "hs" or h.active.kind is not ActiveKind.Host:
        yield
        return
    saved = h.v, h.priv
    h.v, h.priv = HOST_MODES[mode]
    try:
        yield
    finally:
        h.v, h.priv = saved


_ACCESS = {"read": AccessKind.Load, "write": AccessKind.Store, "fetch": AccessKind.Fetch}


class _Context:
    def __init__(self, platform: Platform):
        self.platform = platform
        self.digests: dict[int, bytes] = {}


def _host_step(ctx: _Context, step: Step) -> Outcome:
    p, op, a = ctx.platform, step.op, step.args
    host = p.host
    mode = step.actor.mode
    if op in ("read", "write", "fetch"):
        kind = _ACCESS[op]
        value = a[1] if op == "write" else None
        offset = a[2] if op == "write" and len(a) > 2 else (a[1] if op != "write" and len(a) > 1 else 0)
        got = p.host_access(a[0], kind, value, offset, mode=mode)
        return OK if got is None else Outcome("ok", value=got)
    if op == "fill":
        p.host_write_bytes(a[0], bytes([a[1] & 0xFF]) * 4096)
        return OK
    if op in ("ifile_read", "ifile_write"):
        kind = AccessKind.Load if op == "ifile_read" else AccessKind.Store
        got = p.ifile_access(a[0], kind, a[1] if len(a) > 1 else None, mode=mode)
        return OK if got is None else Outcome("ok", value=got)
    if op == "inject":
        p.inject_interrupt(a[0], a[1])
        return OK
    if op == "boot":
        p.boot()
        return OK
    with _mode(p, mode):
        if op == "teecall":
            r = p.call(*a)
            if not r.ok:
                raise CoveError(r.error)
            return Outcome("ok", value=r.values[0] if r.values else 0)
        if op == "tsm_info":
            return Outcome("ok", value=host.tsm_info().version)
        if op == "convert":
            host.convert(a[0], a[1])
        elif op == "reclaim":
            host.reclaim(a[0], a[1])
        elif op == "reassign":
            return Outcome("ok", value=host.reassign(a[0], a[1]))
        elif op == "tvm_create":
            count = a[1] if len(a) > 1 else 1
            return Outcome("ok", value=host.tvm_create(a[0], count, bool(a[2]) if len(a) > 2 else False))
        elif op == "tvm_add_page_table_pages":
            host.add_page_table_pages(a[0], a[1], a[2] if len(a) > 2 else 1)
        elif op == "tvm_add_memory_region":
            kind = RegionKind.Confidential if a[3] == "confidential" else RegionKind.NonConfidentialShared
            host.add_memory_region(a[0], a[1], a[2], kind)
        elif op == "tvm_add_measured_pages":
            host.add_measured_page(a[0], a[1], a[2], a[3])
        elif op == "tvm_create_vcpu":
            host.create_vcpu(a[0], a[1], a[2], a[3])
        elif op == "tvm_finalize":
            ctx.digests[a[0]] = host.finalize(a[0])
        elif op == "tvm_run":
            ex = host.run(a[0], a[1])
            return Outcome("exit", ex.reason.name, ex.value)
        elif op == "tvm_add_zero_pages":
            host.add_zero_page(a[0], a[1], a[2])
        elif op == "tvm_add_shared_pages":
            host.add_shared_page(a[0], a[1], a[2])
        elif op == "tvm_destroy":
            host.destroy(a[0])
        elif op == "covi_bind_interrupt_file":
            return Outcome("ok", value=host.bind_interrupt_file(a[0], a[1], a[2]))
        else:  # pragma: no cover - the parser rejects unknown ops
            raise ValueError(op)
    return OK


def _tvm_step(ctx: _Context, step: Step) -> Outcome:
    p, op, a = ctx.platform, step.op, step.args
    t, v = step.actor.tvm_id, step.actor.vcpu_id
    if op in ("read", "write", "fetch"):
        kind = _ACCESS[op]
        got = p.guest_access(t, v, a[0], kind, a[1] if op == "write" else None)
        return OK if got is None else Outcome("ok", value=got)
    if op in ("ifile_read", "ifile_write"):
        kind = AccessKind.Load if op == "ifile_read" else AccessKind.Store
        got = p.guest_ifile_access(t, v, a[0], kind, a[1] if len(a) > 1 else None)
        return OK if got is None else Outcome("ok", value=got)
    if op in ("covg_share", "covg_unshare"):
        p.guest_share(t, v, a[0], a[1] if len(a) > 1 else 1, share=op == "covg_share")
        return OK
    # get_evidence: the report data is the argument as 64 little-endian bytes
    report = (a[0] & ((1 << 512) - 1)).to_bytes(64, "little")
    evidence = p.guest_evidence(t, v, report)
    m = p.measurements
    policy = Policy((m.tsm_driver_digest, m.tsm_digest), allow_debug=False,
                    expected_tvm_measurement=ctx.digests.get(t))
    verdict = verify_evidence(evidence, p.root_public_key, policy)
    return Outcome("verdict", "Accept" if verdict.accepted else verdict.reason.value)


def execute_step(ctx: _Context, step: Step) -> Outcome:
    try:
        if step.actor.kind == "tvm":
            return _tvm_step(ctx, step)
        return _host_step(ctx, step)
    except CoveError as e:
        return Outcome("error", e.code.name)
    except HartException as e:
        return Outcome("fault", e.kind.value, e.addr)


def _coverage_op(step: Step, out: Outcome) -> str:
    """Gate errors count against the call gate; raw teecalls against the function they name."""
    if out.code in GATE_ERRORS and step.actor.kind != "tvm":
        return "teecall"
    if step.op != "teecall":
        return step.op
    return FUNCTION_NAMES.get(step.args[0], "teecall")


def _delta_record(platform: Platform, pages: Iterable[int]) -> list:
    out = []
    for p in pages:
        state = PageState(int(platform.mtt.state[p]))
        out.append([p, state.name, platform.mtt.owner_of(p)])
    return out


def run_scenario(scenario: Scenario, *, check_invariants: bool = True) -> Report:
    """Run every step on a fresh platform; failures are collected, never raised."""
    platform = Platform(platform_config(scenario.config))
    ctx = _Context(platform)
    report = Report(scenario.name)
    for i, step in enumerate(scenario.steps):
        out = execute_step(ctx, step)
        delta = platform.mtt.drain_delta()
        report.steps_run += 1
        if out.kind == "error":
            report.error_coverage[f"{_coverage_op(step, out)}:{out.code}"] += 1
        report.trace.append({
            "seq": i,
            "actor": str(step.actor),
            "op": step.op,
            "args": [_json_arg(x) for x in step.args],
            "result": str(out),
            "mtt_delta": _delta_record(platform, delta),
        })
        if step.expect is not None and not matches(step.expect, out):
            report.failures.append(Failure(i, step.line, step.source(), str(step.expect), str(out)))
        if check_invariants:
            for v in platform.invariant_violations(delta):
                report.failures.append(Failure(i, step.line, step.source(), "invariants hold", v))
    return report


def _json_arg(a):
    from .dsl import format_arg
    return a if isinstance(a, int) else format_arg(a)


def scenario_from_trace(records: Iterable[dict], config: Optional[dict] = None,
                        name: str = "replay") -> Scenario:
    """Turn trace records back into a scenario whose expectations are the recorded results."""
    from .dsl import format_arg
    lines = []
    for rec in records:
        args = " ".join(format_arg(x) for x in rec["args"])
        kind, *rest = rec["result"].split()
        out = Outcome(kind, rest[0] if rest and kind != "ok" else None,
                      int(rest[-1], 16) if (kind == "ok" and rest) or (kind in ("exit", "fault") and len(rest) > 1) else None)
        lines.append(f"{rec['actor']} {rec['op']} {args} expect {out.as_expect()}")
    scenario = parse_scenario("\n".join(lines), name)
    scenario.config = dict(config or {})
    return scenario


def replay_trace(records: list[dict], config: Optional[dict] = None) -> list[tuple[int, str, str]]:
    """Re-run a trace; returns (seq, recorded, replayed) for every step whose result differs."""
    report = run_scenario(scenario_from_trace(records, config), check_invariants=False)
    return [(r["seq"], r["result"], n["result"])
            for r, n in zip(records, report.trace) if r["result"] != n["result"]]
