"""Build a TVM step by step, let it demand-fault a zero page, then tear it down.

Run with ``python demos/lifecycle_walkthrough.py``.
"""

from covesim import AccessKind, CoveError, Exit, Platform, PlatformConfig, Touch, program
from covesim.tsm import ExitReason

GPA = 0x8000_0000

p = Platform(PlatformConfig(memory_pages=64))
h = p.host
print("tsm info:", h.tsm_info())

h.convert(0x10, 6)
t = h.tvm_create(0x10)
h.add_page_table_pages(t, 0x11)
h.add_memory_region(t, GPA, 4)
p.host_write_bytes(0x30, b"initial image")
h.add_measured_page(t, 0x30, 0x12, GPA)

prog = program(Touch(GPA, AccessKind.Load),
               Touch(GPA + 0x1000, AccessKind.Store, 0xC0FFEE),
               Touch(GPA + 0x1000, AccessKind.Load),
               Exit(7))
h.create_vcpu(t, 0, 0x13, prog)
print("measurement:", h.finalize(t).hex())

try:
    p.host_read(0x12, 0)
except Exception as e:
    print("host read of a TVM page:", type(e).__name__, e)

while True:
    ex = h.run(t, 0)
    print("exit:", ex.reason.name, hex(ex.value))
    if ex.reason is not ExitReason.GuestPageFault:
        break
    h.add_zero_page(t, 0x14, ex.value)

try:
    h.add_measured_page(t, 0x30, 0x15, GPA + 0x2000)
except CoveError as e:
    print("measured add after finalize:", e.code.name)

h.destroy(t)
h.reclaim(0x10, 6)
print("page 0x14 after reclaim is zero:", p.memory.is_zero(0x14))
