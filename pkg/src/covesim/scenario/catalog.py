"""Bundled scenarios and the table of error codes each operation can return."""

from __future__ import annotations

from collections import Counter
from importlib import resources
from pathlib import Path
from typing import Union

from .dsl import Scenario, parse_scenario

# Errors raised by the call gate itself, before any handler runs.
GATE_ERRORS = frozenset({"UnknownFunction", "NotHostContext", "NotBooted"})

# Every error code an operation can return through the ABI or the raw access paths.
# NotBooted and NotTsmContext are not reachable from a scenario (platforms boot on
# creation and scenario steps never hold the TSM context); unit tests cover them.
ERROR_CATALOG: dict[str, frozenset[str]] = {k: frozenset(v) for k, v in {
    "teecall": {"UnknownFunction", "NotHostContext"},
    "boot": {"AlreadyBooted"},
    "tsm_info": set(),
    "convert": {"OutOfBounds", "AlreadyConfidential", "PageInUse"},
    "reclaim": {"OutOfBounds", "PageInUse", "NotConfidential"},
    "reassign": {"OutOfBounds", "PageInUse", "NotConfidential"},
    "tvm_create": {"TooFewPages", "TvmLimit", "PageNotFree"},
    "tvm_add_page_table_pages": {"UnknownTvm", "PageNotFree"},
    "tvm_add_memory_region": {"UnknownTvm", "WrongPhase", "InvalidArgument", "Overlap"},
    "tvm_add_measured_pages": {"UnknownTvm", "WrongPhase", "BadSource", "PageNotFree",
                               "InvalidArgument", "GpaUnmappedRegion", "GpaAlreadyMapped",
                               "OutOfTablePages"},
    "tvm_create_vcpu": {"UnknownTvm", "WrongPhase", "DuplicateVcpu", "InvalidArgument",
                        "TooFewPages", "PageNotFree", "BadSource"},
    "tvm_finalize": {"UnknownTvm", "WrongPhase", "NoVcpus"},
    "tvm_run": {"UnknownTvm", "WrongPhase", "UnknownVcpu", "VcpuNotRunnable"},
    "tvm_add_zero_pages": {"UnknownTvm", "WrongPhase", "PageNotFree", "InvalidArgument",
                           "GpaUnmappedRegion", "GpaAlreadyMapped", "OutOfTablePages"},
    "tvm_add_shared_pages": {"UnknownTvm", "WrongPhase", "SourceConfidential", "InvalidArgument",
                             "GpaUnmappedRegion", "GpaNotShared", "GpaAlreadyMapped",
                             "OutOfTablePages"},
    "tvm_destroy": {"UnknownTvm"},
    "covi_bind_interrupt_file": {"UnknownTvm", "UnknownVcpu", "AlreadyBound", "PageNotFree"},
    "covg_share": {"UnknownTvm", "WrongPhase", "InvalidArgument", "GpaUnmappedRegion"},
    "covg_unshare": {"UnknownTvm", "WrongPhase", "InvalidArgument", "GpaUnmappedRegion"},
    "get_evidence": {"UnknownTvm", "WrongPhase"},
    "inject": {"InvalidIrq", "Unbound"},
    "ifile_read": {"Unbound"},
    "ifile_write": {"Unbound"},
    "read": {"Unaligned"},
    "write": {"Unaligned"},
    "fetch": {"Unaligned"},
}.items()}


def missing_coverage(coverage: Counter) -> list[str]:
    """``op:Code`` pairs from the catalog that ``coverage`` never hit."""
    return sorted(f"{op}:{code}" for op, codes in ERROR_CATALOG.items()
                  for code in codes if not coverage.get(f"{op}:{code}"))


def _scenario_dir():
    return resources.files("covesim") / "scenarios"


def list_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in _scenario_dir().iterdir() if p.name.endswith(".cove"))


def bundled_text(name: str) -> str:
    path = _scenario_dir() / f"{name}.cove"
    if not path.is_file():
        raise KeyError(name)
    return path.read_text()


def load_scenario(ref: Union[str, Path]) -> Scenario:
    """Load a scenario from a file path, or by bundled name when no such file exists."""
    path = Path(ref)
    if path.is_file():
        return parse_scenario(path.read_text(), path.stem)
    return parse_scenario(bundled_text(str(ref)), str(ref))
