"""Line-oriented scenario language.

::

    # comment
    name host_steals_page
    config memory_pages 128
    host convert 0x40 4 expect ok
    host tvm_create 0x40 expect value 0
    adversary read 0x41 expect fault AccessFault
    adversary@vs ifile_read 0 expect fault VirtualInstruction
    tvm 0 0 read 0x80000000 expect value 0
    host tvm_create_vcpu 0 0 0x43 [load 0x80000000; wfi; exit 3]

Integers are decimal or ``0x`` hex with optional ``_`` separators. Host page
arguments are page numbers; guest addresses are byte addresses. An actor may
carry an execution mode suffix (``@hs``, ``@u``, ``@vs``, ``@vu``). Adversary
steps must state an expectation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from ..attestation import RejectReason
from ..errors import ErrorCode
from ..hart import ExceptionKind
from ..mtt import AccessKind
from ..tsm import (
    COVG_GET_EVIDENCE,
    COVG_SHARE,
    COVG_UNSHARE,
    Covg,
    Exit,
    ExitReason,
    Touch,
    TvmProgram,
    Wfi,
)


class ParseError(Exception):
    """Positioned scenario syntax error (1-based line and column)."""

    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"{line}:{column}: {message}")


class UnknownOp(ParseError):
    pass


class ArityMismatch(ParseError):
    pass


INT, WORD, PROG = "int", "word", "prog"

# op -> (positional kinds, number of trailing optional ints)
HOST_OPS: dict[str, tuple[tuple[str, ...], int]] = {
    "boot": ((), 0),
    "tsm_info": ((), 0),
    "convert": ((INT, INT), 0),
    "reclaim": ((INT, INT), 0),
    "reassign": ((INT, INT), 0),
    "tvm_create": ((INT,), 2),                   # state_start [count] [debug]
    "tvm_add_page_table_pages": ((INT, INT), 1),  # tvm start [count]
    "tvm_add_memory_region": ((INT, INT, INT, WORD), 0),
    "tvm_add_measured_pages": ((INT, INT, INT, INT), 0),
    "tvm_create_vcpu": ((INT, INT, INT, PROG), 0),
    "tvm_finalize": ((INT,), 0),
    "tvm_run": ((INT, INT), 0),
    "tvm_add_zero_pages": ((INT, INT, INT), 0),
    "tvm_add_shared_pages": ((INT, INT, INT), 0),
    "tvm_destroy": ((INT,), 0),
    "covi_bind_interrupt_file": ((INT, INT, INT), 0),
    "inject": ((INT, INT), 0),
    "read": ((INT,), 1),
    "write": ((INT, INT), 1),
    "fetch": ((INT,), 1),
    "fill": ((INT, INT), 0),
    "ifile_read": ((INT,), 0),
    "ifile_write": ((INT, INT), 0),
    "teecall": ((INT,), 6),
}

TVM_OPS: dict[str, tuple[tuple[str, ...], int]] = {
    "read": ((INT,), 0),
    "write": ((INT, INT), 0),
    "fetch": ((INT,), 0),
    "ifile_read": ((INT,), 0),
    "ifile_write": ((INT, INT), 0),
    "covg_share": ((INT,), 1),
    "covg_unshare": ((INT,), 1),
    "get_evidence": ((INT,), 0),
}

REGION_WORDS = {"confidential": 0, "shared": 1}
MODES = ("hs", "u", "vs", "vu")

EXPECT_KINDS = ("ok", "error", "fault", "value", "exit", "verdict")


@dataclass(frozen=True)
class Actor:
    kind: str                  # host | adversary | tvm
    mode: str = "hs"
    tvm_id: Optional[int] = None
    vcpu_id: Optional[int] = None

    def __str__(self) -> str:
        if self.kind == "tvm":
            return f"tvm {self.tvm_id} {self.vcpu_id}"
        return self.kind if self.mode == "hs" else f"{self.kind}@{self.mode}"


@dataclass(frozen=True)
class Expect:
    kind: str
    code: Optional[str] = None
    value: Optional[int] = None

    def __str__(self) -> str:
        parts = [self.kind]
        if self.code is not None:
            parts.append(self.code)
        if self.value is not None:
            parts.append(str(self.value))
        return " ".join(parts)


Arg = Union[int, str, TvmProgram]


@dataclass(frozen=True)
class Step:
    actor: Actor
    op: str
    args: tuple[Arg, ...]
    expect: Optional[Expect]
    line: int = 0

    def source(self) -> str:
        """Canonical text of the step without its expectation."""
        return " ".join([str(self.actor), self.op] + [format_arg(a) for a in self.args])


@dataclass
class Scenario:
    name: str
    steps: list[Step] = field(default_factory=list)
    config: dict[str, Union[int, bytes]] = field(default_factory=dict)


def format_arg(a: Arg) -> str:
    if isinstance(a, TvmProgram):
        return format_program(a)
    if isinstance(a, int):
        return hex(a) if a > 9 else str(a)
    return a


_COVG_NAMES = {"get_evidence": COVG_GET_EVIDENCE, "share": COVG_SHARE, "unshare": COVG_UNSHARE}


def format_program(prog: TvmProgram) -> str:
    parts = []
    for a in prog.actions:
        if isinstance(a, Touch):
            val = f" {a.value:#x}" if a.kind is AccessKind.Store else ""
            parts.append(f"{a.kind.value} {a.gpa:#x}{val}")
        elif isinstance(a, Covg):
            parts.append(" ".join(["covg", hex(a.call)] + [hex(x) for x in a.args]))
        elif isinstance(a, Wfi):
            parts.append("wfi")
        else:
            parts.append(f"exit {a.code}")
    return "[" + "; ".join(parts) + "]"


_INT_RE = re.compile(r"^(0x[0-9a-fA-F_]+|[0-9][0-9_]*)$")


def parse_int(text: str) -> Optional[int]:
    if not _INT_RE.match(text) or text.endswith("_") or "__" in text:
        return None
    digits = text.replace("_", "")
    try:
        return int(digits[2:], 16) if digits.startswith("0x") else int(digits)
    except ValueError:
        # decimal literals beyond the interpreter's digit limit
        return None


def _tokenize(line: str, lineno: int) -> list[tuple[str, int]]:
    """Split on whitespace, keeping ``[...]`` and ``"..."`` groups whole."""
    tokens = []
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "#":
            break
        start = i
        if ch in "[\"":
            close = "]" if ch == "[" else "\""
            j = line.find(close, i + 1)
            if j < 0:
                raise ParseError(lineno, start + 1, f"unterminated {ch}")
            i = j + 1
        else:
            while i < n and not line[i].isspace() and line[i] not in "[\"#":
                i += 1
        tokens.append((line[start:i], start + 1))
    return tokens


def _int_token(tok: str, col: int, lineno: int) -> int:
    v = parse_int(tok)
    if v is None:
        raise ParseError(lineno, col, f"expected integer, got {tok!r}")
    return v


def parse_program(text: str, lineno: int, col: int) -> TvmProgram:
    body = text[1:-1].strip()
    actions = []
    if not body:
        return TvmProgram(())
    for part in re.split(r"[;,]", body):
        words = part.split()
        if not words:
            raise ParseError(lineno, col, "empty program action")
        op, rest = words[0].lower(), words[1:]

        def ints(k_min: int, k_max: int) -> list[int]:
            if not k_min <= len(rest) <= k_max:
                raise ArityMismatch(lineno, col, f"program action {op!r} takes {k_min}..{k_max} args")
            out = []
            for w in rest:
                v = parse_int(w)
                if v is None:
                    raise ParseError(lineno, col, f"bad integer {w!r} in program")
                out.append(v)
            return out

        if op in ("load", "fetch"):
            actions.append(Touch(ints(1, 1)[0], AccessKind(op)))
        elif op == "store":
            gpa, value = ints(2, 2)
            actions.append(Touch(gpa, AccessKind.Store, value))
        elif op == "wfi":
            ints(0, 0)
            actions.append(Wfi())
        elif op == "exit":
            actions.append(Exit(ints(1, 1)[0]))
        elif op == "covg":
            if not rest:
                raise ArityMismatch(lineno, col, "covg needs a call id")
            call = _COVG_NAMES.get(rest[0])
            if call is not None:
                rest = rest[1:]
                args = ints(0, 6)
            else:
                vals = ints(1, 7)
                call, args = vals[0], vals[1:]
            actions.append(Covg(call, tuple(args)))
        else:
            raise UnknownOp(lineno, col, f"unknown program action {op!r}")
    return TvmProgram(tuple(actions))


def _parse_expect(tokens: list[tuple[str, int]], lineno: int) -> Expect:
    if not tokens:
        raise ParseError(lineno, 1, "empty expectation")
    kind, col = tokens[0]
    rest = tokens[1:]
    if kind not in EXPECT_KINDS:
        raise ParseError(lineno, col, f"unknown expectation {kind!r}")
    if kind == "ok":
        if rest:
            raise ArityMismatch(lineno, rest[0][1], "'expect ok' takes no arguments")
        return Expect("ok")
    if kind == "value":
        if len(rest) != 1:
            raise ArityMismatch(lineno, col, "'expect value' takes one integer")
        return Expect("value", value=_int_token(*rest[0], lineno))
    if not rest:
        raise ArityMismatch(lineno, col, f"'expect {kind}' needs a name")
    name, ncol = rest[0]
    names = {
        "error": [c.name for c in ErrorCode if c],
        "fault": [k.value for k in ExceptionKind],
        "exit": [r.name for r in ExitReason],
        "verdict": ["Accept"] + [r.value for r in RejectReason],
    }[kind]
    if name not in names:
        raise ParseError(lineno, ncol, f"unknown {kind} name {name!r}")
    value = None
    if kind == "exit" and len(rest) == 2:
        value = _int_token(*rest[1], lineno)
    elif len(rest) > 1:
        raise ArityMismatch(lineno, rest[1][1], f"too many arguments to 'expect {kind}'")
    return Expect(kind, name, value)


def _parse_config(tokens: list[tuple[str, int]], lineno: int, cfg: dict) -> None:
    if len(tokens) != 3:
        raise ArityMismatch(lineno, tokens[0][1], "config takes a key and a value")
    (_, _), (key, kcol), (val, vcol) = tokens
    if key in ("memory_pages", "harts", "tsm_version", "max_tvms", "debug_platform"):
        cfg[key] = _int_token(val, vcol, lineno)
    elif key in ("tsm_blob", "tsm_driver_blob", "root_secret"):
        if val.startswith("\""):
            cfg[key] = val[1:-1].encode("utf-8", "replace")
        elif val.startswith("0x") and len(val) % 2 == 0:
            try:
                cfg[key] = bytes.fromhex(val[2:])
            except ValueError:
                raise ParseError(lineno, vcol, "bad hex byte string") from None
        else:
            raise ParseError(lineno, vcol, "expected \"text\" or 0x-hex bytes")
        if key == "root_secret" and len(cfg[key]) != 32:
            raise ParseError(lineno, vcol, "root_secret must be 32 bytes")
    else:
        raise ParseError(lineno, kcol, f"unknown config key {key!r}")


def _parse_actor(tokens: list[tuple[str, int]], lineno: int) -> tuple[Actor, int]:
    word, col = tokens[0]
    base, _, mode = word.partition("@")
    if base == "tvm":
        if mode:
            raise ParseError(lineno, col, "tvm actors run in confidential VS-mode only")
        if len(tokens) < 3:
            raise ArityMismatch(lineno, col, "tvm actor needs <tvm> <vcpu>")
        return Actor("tvm", "vs", _int_token(*tokens[1], lineno), _int_token(*tokens[2], lineno)), 3
    if base not in ("host", "adversary"):
        raise ParseError(lineno, col, f"unknown actor {base!r}")
    mode = mode or "hs"
    if mode not in MODES:
        raise ParseError(lineno, col, f"unknown mode {mode!r}")
    return Actor(base, mode), 1


def parse_line(line: str, lineno: int, scenario: Scenario) -> Optional[Step]:
    tokens = _tokenize(line, lineno)
    if not tokens:
        return None
    head, col = tokens[0]
    if head == "name":
        if len(tokens) != 2:
            raise ArityMismatch(lineno, col, "name takes one word")
        scenario.name = tokens[1][0]
        return None
    if head == "config":
        _parse_config(tokens, lineno, scenario.config)
        return None
    actor, used = _parse_actor(tokens, lineno)
    tokens = tokens[used:]
    if not tokens:
        raise ArityMismatch(lineno, len(line) + 1, "missing operation")
    op, opcol = tokens[0]
    table = TVM_OPS if actor.kind == "tvm" else HOST_OPS
    if op not in table:
        raise UnknownOp(lineno, opcol, f"unknown operation {op!r}")
    rest = tokens[1:]
    expect = None
    for i, (tok, _) in enumerate(rest):
        if tok == "expect":
            expect = _parse_expect(rest[i + 1:], lineno)
            rest = rest[:i]
            break
    kinds, optional = table[op]
    if not len(kinds) <= len(rest) <= len(kinds) + optional:
        lo, hi = len(kinds), len(kinds) + optional
        want = str(lo) if lo == hi else f"{lo}..{hi}"
        raise ArityMismatch(lineno, opcol, f"{op} takes {want} arguments, got {len(rest)}")
    args: list[Arg] = []
    for i, (tok, tcol) in enumerate(rest):
        kind = kinds[i] if i < len(kinds) else INT
        if kind == INT:
            args.append(_int_token(tok, tcol, lineno))
        elif kind == WORD:
            if tok not in REGION_WORDS:
                raise ParseError(lineno, tcol, f"expected confidential|shared, got {tok!r}")
            args.append(tok)
        else:
            if not tok.startswith("["):
                raise ParseError(lineno, tcol, "expected a [program]")
            args.append(parse_program(tok, lineno, tcol))
    if actor.kind == "adversary" and expect is None:
        raise ParseError(lineno, col, "adversary steps must state an expectation")
    return Step(actor, op, tuple(args), expect, lineno)


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Parse a whole scenario; raises :class:`ParseError` (or a subclass) on bad input."""
    scenario = Scenario(name)
    for lineno, line in enumerate(text.splitlines(), start=1):
        step = parse_line(line, lineno, scenario)
        if step is not None:
            scenario.steps.append(step)
    return scenario
