"""Command-line entry point: ``python -m covesim <command>``. Exit status is 0 iff nothing failed."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .attestation import AttestationEvidence, Policy, verify_encoded
from .platform import Platform, PlatformConfig
from .scenario.catalog import list_scenarios, load_scenario
from .scenario.dsl import ParseError
from .scenario.fuzz import fuzz
from .scenario.runner import run_scenario
from .tsm import Exit, RegionKind, program


def read_root_key(path: Path) -> bytes:
    """A root public key file holds either 64 hex digits or the 32 raw key bytes."""
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii").strip()
        if len(text) == 64:
            return bytes.fromhex(text)
    except (UnicodeDecodeError, ValueError):
        pass
    if len(raw) != 32:
        raise ValueError(f"{path}: expected 32 key bytes or 64 hex digits")
    return raw


def _hex_bytes(text: str) -> bytes:
    try:
        return bytes.fromhex(text.removeprefix("0x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a hex string: {text!r}") from None


def _percent(text: str) -> float:
    pct = float(text)
    if not 0.0 <= pct <= 100.0:
        raise argparse.ArgumentTypeError("percentage must be within 0..100")
    return pct


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ParseError as e:
        print(f"error: {args.scenario}: {e}", file=sys.stderr)
        return 2
    except KeyError:
        print(f"error: {args.scenario} is neither a file nor a bundled scenario", file=sys.stderr)
        return 2
    report = run_scenario(scenario)
    if args.trace:
        Path(args.trace).write_text("".join(line + "\n" for line in report.trace_lines()))
    print(report.summary())
    return 0 if report.ok else 1


def cmd_fuzz(args) -> int:
    report = fuzz(args.seed, args.ops, args.illegal_bias / 100.0)
    print(report.to_json())
    return 0 if report.ok else 1


def cmd_attest_verify(args) -> int:
    blob = Path(args.evidence).read_bytes()
    root = read_root_key(Path(args.root_key))
    policy = Policy(allow_debug=args.allow_debug, expected_tvm_measurement=args.expect_measurement)
    try:
        print(AttestationEvidence.decode(blob).dump())
    except ValueError as e:
        print(f"evidence does not decode: {e}")
    verdict = verify_encoded(blob, root, policy)
    print(f"verdict: {verdict}")
    return 0 if verdict.accepted else 1


def cmd_list(args) -> int:
    for name in list_scenarios():
        print(name)
    return 0


def cmd_attest_demo(args) -> int:
    """Build and finalize a one-page TVM, then write its evidence and the platform root key."""
    cfg = PlatformConfig() if args.root_secret is None else PlatformConfig(root_secret=args.root_secret)
    if len(cfg.root_secret) != 32 or len(args.report_data) > 64:
        print("error: the root secret is 32 bytes and report data at most 64", file=sys.stderr)
        return 2
    p = Platform(cfg)
    host = p.host
    host.convert(0x20, 8)
    tvm = host.tvm_create(0x20, 1, args.debug)
    host.add_page_table_pages(tvm, 0x21)
    host.add_memory_region(tvm, 0x8000_0000, 1, RegionKind.Confidential)
    p.host_write_bytes(0x40, args.payload.encode().ljust(4096, b"\0")[:4096])
    host.add_measured_page(tvm, 0x40, 0x22, 0x8000_0000)
    host.create_vcpu(tvm, 0, 0x23, program(Exit(0)))
    digest = host.finalize(tvm)
    evidence = p.guest_evidence(tvm, 0, args.report_data.ljust(64, b"\0")[:64])
    Path(args.evidence).write_bytes(evidence.encode())
    Path(args.root_key).write_text(p.root_public_key.hex() + "\n")
    print(f"tvm measurement: {digest.hex()}")
    print(f"wrote {args.evidence} and {args.root_key}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covesim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file or a bundled scenario by name")
    run.add_argument("scenario")
    run.add_argument("--trace", help="write one JSON record per step to this path")
    run.set_defaults(fn=cmd_run)

    fz = sub.add_parser("fuzz", help="oracle-checked random operations")
    fz.add_argument("--seed", type=int, required=True)
    fz.add_argument("--ops", type=int, required=True)
    fz.add_argument("--illegal-bias", type=_percent, default=20.0, metavar="PCT",
                    help="percentage of operations drawn as deliberately illegal calls")
    fz.set_defaults(fn=cmd_fuzz)

    av = sub.add_parser("attest-verify", help="verify an evidence chain against a root key")
    av.add_argument("--evidence", required=True)
    av.add_argument("--root-key", required=True)
    av.add_argument("--allow-debug", action="store_true")
    av.add_argument("--expect-measurement", type=_hex_bytes, metavar="HEX")
    av.set_defaults(fn=cmd_attest_verify)

    ls = sub.add_parser("list-scenarios", help="names of the bundled scenarios")
    ls.set_defaults(fn=cmd_list)

    demo = sub.add_parser("attest-demo", help="produce sample evidence and root key files")
    demo.add_argument("--evidence", default="evidence.bin")
    demo.add_argument("--root-key", default="root_key.hex")
    demo.add_argument("--debug", action="store_true", help="the TVM opts into debug")
    demo.add_argument("--payload", default="hello from a confidential guest")
    demo.add_argument("--report-data", type=_hex_bytes, default=b"")
    demo.add_argument("--root-secret", type=_hex_bytes, metavar="HEX",
                      help="32-byte device secret; defaults to the simulator's fixed secret")
    demo.set_defaults(fn=cmd_attest_demo)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)
