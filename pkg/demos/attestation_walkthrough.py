"""Request evidence from inside a TVM and check it against a few verifier policies.

Run with ``python demos/attestation_walkthrough.py``.
"""

import hashlib

from covesim import Exit, Platform, PlatformConfig, program
from covesim.attestation import Policy, verify_encoded

GPA = 0x8000_0000

cfg = PlatformConfig(memory_pages=64)
p = Platform(cfg)
h = p.host
h.convert(0x10, 4)
t = h.tvm_create(0x10)
h.add_page_table_pages(t, 0x11)
h.add_memory_region(t, GPA, 1)
p.host_write_bytes(0x30, b"workload")
h.add_measured_page(t, 0x30, 0x12, GPA)
h.create_vcpu(t, 0, 0x13, program(Exit(0)))
digest = h.finalize(t)

evidence = p.guest_evidence(t, 0, b"nonce".ljust(64, b"\0"))
print(evidence.dump())
blob, root = evidence.encode(), p.root_public_key

tcb = (hashlib.sha256(cfg.tsm_driver_blob).digest(), hashlib.sha256(cfg.tsm_blob).digest())
print("matching policy:   ", verify_encoded(blob, root, Policy(tcb, False, digest)))
print("wrong measurement: ", verify_encoded(blob, root, Policy(tcb, False, bytes(32))))
tampered = bytearray(blob)
tampered[len(blob) // 2] ^= 1
print("one byte tampered: ", verify_encoded(bytes(tampered), root, Policy(tcb, False, digest)))
