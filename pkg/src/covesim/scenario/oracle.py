"""Independent reference model of page ownership and TVM lifecycle.

The model shares no state or code paths with the simulator: pages are plain
lists, TVMs are small records, and every host call is predicted from first
principles (which error, if any, the call must return, and how ownership moves).
The fuzzer runs it side by side with the real platform and flags any divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

# page states and owners use the same small integers as the hardware table so the
# two can be compared wholesale; the values themselves carry no behaviour
N, F, A = 0, 1, 2
STATE_NAMES = {N: "NonConfidential", F: "ConfidentialFree", A: "ConfidentialAssigned"}
TSM = -1
NOBODY = -2
PAGE = 4096
TABLE_FANOUT = 512


@dataclass
class VcpuModel:
    actions: list            # ("load"|"store"|"fetch", gpa) | ("wfi",) | ("exit", code)
    pc: int = 0
    runnable: bool = True
    bound: bool = False


@dataclass
class TvmModel:
    tvm_id: int
    running: bool = False
    regions: list = field(default_factory=list)      # (first_page, count, shared)
    mapped: dict = field(default_factory=dict)       # gpa page -> host page if shared, else None
    tables: int = 0
    vcpus: dict = field(default_factory=dict)
    offers: set = field(default_factory=set)

    def region(self, gpa_page: int):
        for first, count, shared in self.regions:
            if first <= gpa_page < first + count:
                return shared
        return None


class Refused(Exception):
    """A predicted error; ``args[0]`` is the error code name."""


class OwnershipOracle:
    def __init__(self, num_pages: int, tcb_pages: int, scratch: int, max_tvms: int):
        self.n = num_pages
        self.state = [N] * num_pages
        self.owner: list[int] = [NOBODY] * num_pages
        for p in range(tcb_pages):
            self.state[p], self.owner[p] = A, TSM
        self.scratch = scratch
        self.max_tvms = max_tvms
        self.tvms: dict[int, TvmModel] = {}
        self.next_tvm = 0
        self.next_file = 0
        self.files: dict[int, tuple[int, int]] = {}

    # -- helpers ---------------------------------------------------------

    def _in_range(self, start: int, count: int) -> list[int]:
        if start < 0 or count < 0 or start + count > self.n:
            raise Refused("OutOfBounds")
        return list(range(start, start + count))

    def _free(self, pages) -> None:
        for p in pages:
            if not 0 <= p < self.n or self.state[p] != F:
                raise Refused("PageNotFree")

    def _range_arg(self, start: int, count: int) -> list[int]:
        if count > self.n:
            raise Refused("PageNotFree")
        return list(range(start, start + count))

    def _tvm(self, tvm_id: int) -> TvmModel:
        t = self.tvms.get(tvm_id)
        if t is None:
            raise Refused("UnknownTvm")
        return t

    def _phase(self, t: TvmModel, running: bool) -> None:
        if t.running != running:
            raise Refused("WrongPhase")

    def _gpa_page(self, gpa: int) -> int:
        if gpa % PAGE:
            raise Refused("InvalidArgument")
        return gpa // PAGE

    def _new_mapping(self, t: TvmModel, gpa: int, shared: bool) -> int:
        page = self._gpa_page(gpa)
        if t.region(page) is not shared:
            raise Refused("GpaUnmappedRegion")
        if page in t.mapped:
            raise Refused("GpaAlreadyMapped")
        if len(t.mapped) >= t.tables * TABLE_FANOUT:
            raise Refused("OutOfTablePages")
        return page

    def _assign(self, pages, owner: int) -> None:
        for p in pages:
            self.state[p], self.owner[p] = A, owner

    def _shared_pages(self, t: TvmModel, gpa: int, count: int) -> list[int]:
        first = self._gpa_page(gpa)
        pages = list(range(first, first + count))
        for p in pages:
            if t.region(p) is not True:
                raise Refused("GpaUnmappedRegion")
        return pages

    # -- predictions (each applies its effect when the call succeeds) -----

    def convert(self, start: int, count: int) -> None:
        pages = self._in_range(start, count)
        shared = {spa for t in self.tvms.values() for spa in t.mapped.values() if spa is not None}
        if shared.intersection(pages):
            raise Refused("PageInUse")
        if any(self.state[p] != N for p in pages):
            raise Refused("AlreadyConfidential")
        for p in pages:
            self.state[p] = F

    def _released_only(self, start: int, count: int) -> list[int]:
        pages = self._in_range(start, count)
        if any(self.state[p] == A for p in pages):
            raise Refused("PageInUse")
        if any(self.state[p] == N for p in pages):
            raise Refused("NotConfidential")
        return pages

    def reclaim(self, start: int, count: int) -> None:
        for p in self._released_only(start, count):
            self.state[p] = N

    def reassign(self, start: int, count: int) -> int:
        return len(self._released_only(start, count))

    def tvm_create(self, start: int, count: int = 1) -> int:
        pages = self._range_arg(start, count)
        if not pages:
            raise Refused("TooFewPages")
        if len(self.tvms) >= self.max_tvms:
            raise Refused("TvmLimit")
        self._free(pages)
        tvm_id = self.next_tvm
        self.next_tvm += 1
        self._assign(pages, tvm_id)
        self.tvms[tvm_id] = TvmModel(tvm_id)
        return tvm_id

    def add_page_table_pages(self, tvm_id: int, start: int, count: int = 1) -> None:
        pages = self._range_arg(start, count)
        t = self._tvm(tvm_id)
        self._free(pages)
        self._assign(pages, tvm_id)
        t.tables += len(pages)

    def add_memory_region(self, tvm_id: int, gpa: int, count: int, shared: bool) -> None:
        t = self._tvm(tvm_id)
        self._phase(t, False)
        first = self._gpa_page(gpa)
        if count < 1:
            raise Refused("InvalidArgument")
        for f, c, _ in t.regions:
            if first < f + c and f < first + count:
                raise Refused("Overlap")
        t.regions.append((first, count, shared))

    def add_measured_page(self, tvm_id: int, src: int, dest: int, gpa: int) -> None:
        t = self._tvm(tvm_id)
        self._phase(t, False)
        if not 0 <= src < self.n or self.state[src] != N:
            raise Refused("BadSource")
        self._free([dest])
        page = self._new_mapping(t, gpa, False)
        self._assign([dest], tvm_id)
        t.mapped[page] = None

    def create_vcpu(self, tvm_id: int, vcpu_id: int, backing: int, actions: list,
                    backing_count: int = 1) -> None:
        if self.state[self.scratch] != N:
            raise Refused("fault:AccessFault")
        pages = self._range_arg(backing, backing_count)
        t = self._tvm(tvm_id)
        self._phase(t, False)
        if vcpu_id in t.vcpus:
            raise Refused("DuplicateVcpu")
        if not 0 <= vcpu_id < 1 << 31:
            raise Refused("InvalidArgument")
        if not pages:
            raise Refused("TooFewPages")
        self._free(pages)
        self._assign(pages, tvm_id)
        t.vcpus[vcpu_id] = VcpuModel(list(actions))

    def finalize(self, tvm_id: int) -> None:
        t = self._tvm(tvm_id)
        self._phase(t, False)
        if not t.vcpus:
            raise Refused("NoVcpus")
        t.running = True

    def run(self, tvm_id: int, vcpu_id: int) -> tuple[str, Optional[int]]:
        """Predicted exit (reason, value); value is None when it depends on memory."""
        t = self._tvm(tvm_id)
        self._phase(t, True)
        v = t.vcpus.get(vcpu_id)
        if v is None:
            raise Refused("UnknownVcpu")
        if not v.runnable:
            raise Refused("VcpuNotRunnable")
        while v.pc < len(v.actions):
            act = v.actions[v.pc]
            if act[0] in ("load", "store", "fetch"):
                page = act[1] // PAGE
                if page not in t.mapped:
                    return "GuestPageFault", page * PAGE
                v.pc += 1
            elif act[0] == "wfi":
                v.pc += 1
                return "Wfi", 0
            else:
                v.pc += 1
                v.runnable = False
                return "Halted", act[1]
        v.runnable = False
        return "Halted", None

    def add_zero_page(self, tvm_id: int, dest: int, gpa: int) -> None:
        t = self._tvm(tvm_id)
        self._phase(t, True)
        self._free([dest])
        page = self._new_mapping(t, gpa, False)
        self._assign([dest], tvm_id)
        t.mapped[page] = None

    def add_shared_page(self, tvm_id: int, src: int, gpa: int) -> None:
        t = self._tvm(tvm_id)
        self._phase(t, True)
        if not 0 <= src < self.n:
            raise Refused("OutOfBounds")
        if self.state[src] != N:
            raise Refused("SourceConfidential")
        page = self._gpa_page(gpa)
        if t.region(page) is not True:
            raise Refused("GpaUnmappedRegion")
        if page not in t.offers:
            raise Refused("GpaNotShared")
        self._new_mapping(t, gpa, True)
        t.mapped[page] = src

    def destroy(self, tvm_id: int) -> None:
        self._tvm(tvm_id)
        for p in range(self.n):
            if self.owner[p] == tvm_id:
                self.state[p], self.owner[p] = F, NOBODY
        self.files = {f: b for f, b in self.files.items() if b[0] != tvm_id}
        del self.tvms[tvm_id]

    def bind_interrupt_file(self, tvm_id: int, vcpu_id: int, page: int) -> int:
        t = self._tvm(tvm_id)
        v = t.vcpus.get(vcpu_id)
        if v is None:
            raise Refused("UnknownVcpu")
        if v.bound:
            raise Refused("AlreadyBound")
        self._free([page])
        self._assign([page], tvm_id)
        v.bound = True
        fid = self.next_file
        self.next_file += 1
        self.files[fid] = (tvm_id, vcpu_id)
        return fid

    def _guest(self, tvm_id: int, vcpu_id: int) -> TvmModel:
        t = self._tvm(tvm_id)
        self._phase(t, True)
        if vcpu_id not in t.vcpus:
            raise Refused("UnknownVcpu")
        return t

    def share(self, tvm_id: int, vcpu_id: int, gpa: int, count: int = 1) -> None:
        t = self._guest(tvm_id, vcpu_id)
        t.offers.update(self._shared_pages(t, gpa, count))

    def unshare(self, tvm_id: int, vcpu_id: int, gpa: int, count: int = 1) -> None:
        t = self._guest(tvm_id, vcpu_id)
        for p in self._shared_pages(t, gpa, count):
            t.offers.discard(p)
            t.mapped.pop(p, None)

    def host_read(self, page: int) -> bool:
        """True when a plain host load of ``page`` must fault."""
        return not 0 <= page < self.n or self.state[page] != N

    # -- access rule -----------------------------------------------------

    def may_access(self, page: int, c: int, domain: str, tvm_id: Optional[int], kind: str) -> bool:
        """Whether a hart in ``domain`` ("host" | "tsm" | "tvm") may perform ``kind`` on ``page``."""
        st = self.state[page]
        if c == 0:
            return st == N
        if st == N:
            if domain == "tvm":
                return kind in ("load", "store")
            return kind != "fetch"
        if st == A and domain == "tvm":
            return self.owner[page] == tvm_id
        return True
