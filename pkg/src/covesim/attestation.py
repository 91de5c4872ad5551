"""Layered (DICE-style) credentials for the TCB and per-TVM attestation evidence.

Each layer's compound device identifier (CDI) is ``HMAC-SHA256(parent_cdi, digest)``
over the next layer's measurement; an Ed25519 key pair is derived from every CDI,
and the parent key signs the child's certificate. Certificates use a small
canonical length-prefixed encoding::

    cert  := "CVCERT1" LP(subject) LP(public_key) LP(claims) LP(issuer) LP(signature)
    claims:= LE32(n) { LP(name) LP(value) }*   (names sorted, UTF-8)
    LP(x) := LE32(len(x)) x

The signature covers everything before ``LP(signature)``. Evidence is
``"CVEV" LE32(n) { LP(cert) }*`` ordered root first.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DIGEST_SIZE = 32
REPORT_DATA_SIZE = 64

ROT = "RoT"
TSM_DRIVER = "TsmDriver"
TSM = "Tsm"
LAYER_NAMES = (ROT, TSM_DRIVER, TSM)

_CERT_MAGIC = b"CVCERT1"
_EVIDENCE_MAGIC = b"CVEV"
_KEY_LABEL = b"covesim/dice/ed25519-seed"


def measure(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def tvm_subject(tvm_id: int) -> str:
    return f"Tvm:{tvm_id}"


@dataclass(frozen=True, repr=False)
class Cdi:
    """A layer secret. Never rendered, serialized, or handed to the host."""

    value: bytes

    def __post_init__(self):
        if len(self.value) != DIGEST_SIZE:
            raise ValueError("CDI must be 32 bytes")

    def __repr__(self) -> str:
        return "Cdi(<secret>)"


def kdf(parent: Cdi, layer_digest: bytes) -> Cdi:
    return Cdi(hmac.new(parent.value, layer_digest, hashlib.sha256).digest())


def _private_key(cdi: Cdi) -> Ed25519PrivateKey:
    seed = hmac.new(cdi.value, _KEY_LABEL, hashlib.sha256).digest()
    return Ed25519PrivateKey.from_private_bytes(seed)


def _public_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def public_key_for(cdi: Cdi) -> bytes:
    return _public_bytes(_private_key(cdi))


def _lp(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise ValueError("truncated encoding")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ValueError("trailing bytes")


def encode_claims(claims: Mapping[str, bytes]) -> bytes:
    out = [struct.pack("<I", len(claims))]
    for name in sorted(claims):
        out.append(_lp(name.encode()))
        out.append(_lp(bytes(claims[name])))
    return b"".join(out)


def decode_claims(buf: bytes) -> dict[str, bytes]:
    r = _Reader(buf)
    claims = {}
    for _ in range(r.u32()):
        name = r.lp().decode()
        claims[name] = r.lp()
    r.done()
    return claims


def u64_claim(n: int) -> bytes:
    return struct.pack("<Q", n)


def bool_claim(b: bool) -> bytes:
    return b"\x01" if b else b"\x00"


@dataclass(frozen=True)
class LayerCert:
    subject: str
    subject_public_key: bytes
    claims: Mapping[str, bytes]
    issuer: str
    signature: bytes = b""

    def tbs(self) -> bytes:
        return b"".join([
            _CERT_MAGIC,
            _lp(self.subject.encode()),
            _lp(self.subject_public_key),
            _lp(encode_claims(self.claims)),
            _lp(self.issuer.encode()),
        ])

    def encode(self) -> bytes:
        return self.tbs() + _lp(self.signature)

    @classmethod
    def decode(cls, buf: bytes) -> "LayerCert":
        r = _Reader(buf)
        if r.take(len(_CERT_MAGIC)) != _CERT_MAGIC:
            raise ValueError("bad certificate magic")
        subject = r.lp().decode()
        key = r.lp()
        claims = decode_claims(r.lp())
        issuer = r.lp().decode()
        sig = r.lp()
        r.done()
        return cls(subject, key, claims, issuer, sig)

    def signed_by(self, cdi: Cdi) -> "LayerCert":
        sig = _private_key(cdi).sign(self.tbs())
        return LayerCert(self.subject, self.subject_public_key, dict(self.claims), self.issuer, sig)

    def verify_with(self, public_key: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(self.signature, self.tbs())
        except (InvalidSignature, ValueError):
            return False
        return True


def root_certificate(uds: Cdi) -> LayerCert:
    """Self-signed certificate of the root of trust's device identity."""
    return LayerCert(ROT, public_key_for(uds), {}, ROT).signed_by(uds)


def derive_layer(
    parent_cdi: Cdi,
    layer_digest: bytes,
    claims: Mapping[str, bytes],
    *,
    subject: str,
    issuer: str,
) -> tuple[Cdi, LayerCert]:
    """Measure-and-derive one layer: the child's CDI and a certificate signed by the parent."""
    child = kdf(parent_cdi, layer_digest)
    cert = LayerCert(subject, public_key_for(child), dict(claims), issuer).signed_by(parent_cdi)
    return child, cert


@dataclass(frozen=True)
class TcbMeasurements:
    tsm_driver_digest: bytes
    tsm_digest: bytes
    tsm_version: int
    debug_platform: bool = False

    def __post_init__(self):
        if len(self.tsm_driver_digest) != DIGEST_SIZE or len(self.tsm_digest) != DIGEST_SIZE:
            raise ValueError("TCB digests are 32 bytes")


class TcbIdentity:
    """The RoT -> TSM-driver -> TSM part of the chain, plus the TSM's CDI.

    Held by the TSM; only certificates leave this object.
    """

    def __init__(self, root_secret: bytes, tcb: TcbMeasurements):
        uds = Cdi(root_secret)
        root = root_certificate(uds)
        driver_cdi, driver_cert = derive_layer(
            uds, tcb.tsm_driver_digest, {"measurement": tcb.tsm_driver_digest},
            subject=TSM_DRIVER, issuer=ROT,
        )
        self._tsm_cdi, tsm_cert = derive_layer(
            driver_cdi,
            tcb.tsm_digest,
            {
                "measurement": tcb.tsm_digest,
                "version": u64_claim(tcb.tsm_version),
                "debug_platform": bool_claim(tcb.debug_platform),
            },
            subject=TSM, issuer=TSM_DRIVER,
        )
        self.tcb = tcb
        self.certs = (root, driver_cert, tsm_cert)
        self.root_public_key = root.subject_public_key

    def issue(self, tvm_id: int, tvm_measurement: bytes, debug_opt_in: bool,
              report_data: bytes) -> "AttestationEvidence":
        return issue_tvm_evidence(
            self._tsm_cdi, tvm_measurement, debug_opt_in, report_data,
            tcb_chain=self.certs, tvm_id=tvm_id,
        )


@dataclass(frozen=True)
class AttestationEvidence:
    chain: tuple[LayerCert, ...]

    @property
    def leaf(self) -> LayerCert:
        return self.chain[-1]

    @property
    def tvm_measurement(self) -> bytes:
        return self.leaf.claims["tvm_measurement"]

    @property
    def debug_opt_in(self) -> bool:
        return self.leaf.claims["debug_opt_in"] != b"\x00"

    @property
    def report_data(self) -> bytes:
        return self.leaf.claims["report_data"]

    def encode(self) -> bytes:
        parts = [_EVIDENCE_MAGIC, struct.pack("<I", len(self.chain))]
        parts += [_lp(c.encode()) for c in self.chain]
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "AttestationEvidence":
        r = _Reader(buf)
        if r.take(len(_EVIDENCE_MAGIC)) != _EVIDENCE_MAGIC:
            raise ValueError("bad evidence magic")
        chain = tuple(LayerCert.decode(r.lp()) for _ in range(r.u32()))
        r.done()
        return cls(chain)

    def dump(self) -> str:
        """Human-readable rendering, one field per line."""
        lines = [f"evidence: {len(self.chain)} certificates"]
        for i, cert in enumerate(self.chain):
            lines.append(f"[{i}] subject: {cert.subject}")
            lines.append(f"    issuer: {cert.issuer}")
            lines.append(f"    public_key: {cert.subject_public_key.hex()}")
            for name in sorted(cert.claims):
                lines.append(f"    claim.{name}: {cert.claims[name].hex()}")
            lines.append(f"    signature: {cert.signature.hex()}")
        return "\n".join(lines)


def issue_tvm_evidence(
    tsm_cdi: Cdi,
    tvm_measurement: bytes,
    debug_opt_in: bool,
    report_data: bytes,
    *,
    tcb_chain: tuple[LayerCert, ...],
    tvm_id: int = 0,
) -> AttestationEvidence:
    if len(report_data) != REPORT_DATA_SIZE:
        raise ValueError("report_data must be 64 bytes")
    _, leaf = derive_layer(
        tsm_cdi,
        tvm_measurement,
        {
            "tvm_measurement": bytes(tvm_measurement),
            "debug_opt_in": bool_claim(debug_opt_in),
            "report_data": bytes(report_data),
        },
        subject=tvm_subject(tvm_id),
        issuer=TSM,
    )
    return AttestationEvidence(tuple(tcb_chain) + (leaf,))


class RejectReason(enum.Enum):
    BadSignature = "BadSignature"
    ChainBroken = "ChainBroken"
    WrongRoot = "WrongRoot"
    TcbMismatch = "TcbMismatch"
    DebugForbidden = "DebugForbidden"
    MeasurementMismatch = "MeasurementMismatch"


@dataclass(frozen=True)
class Verdict:
    reason: Optional[RejectReason] = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __str__(self) -> str:
        return "Accept" if self.accepted else f"Reject({self.reason.value})"


ACCEPT = Verdict()


@dataclass(frozen=True)
class Policy:
    # (tsm_driver_digest, tsm_digest); None skips the TCB comparison
    expected_tcb_digests: Optional[tuple[bytes, bytes]] = None
    allow_debug: bool = False
    expected_tvm_measurement: Optional[bytes] = None


def verify_evidence(
    evidence: AttestationEvidence, trusted_root_public_key: bytes, policy: Policy = Policy()
) -> Verdict:
    """Relying-party check of an evidence chain. Never raises on bad input."""
    chain = evidence.chain
    if len(chain) != 4:
        return Verdict(RejectReason.ChainBroken)
    if chain[0].subject_public_key != trusted_root_public_key:
        return Verdict(RejectReason.WrongRoot)
    expected = LAYER_NAMES + (chain[3].subject,)
    if not chain[3].subject.startswith("Tvm:"):
        return Verdict(RejectReason.ChainBroken)
    for i, cert in enumerate(chain):
        issuer = ROT if i == 0 else chain[i - 1].subject
        if cert.subject != expected[i] or cert.issuer != issuer:
            return Verdict(RejectReason.ChainBroken)
    for i, cert in enumerate(chain):
        signer = chain[max(i - 1, 0)].subject_public_key
        if not cert.verify_with(signer):
            return Verdict(RejectReason.BadSignature)

    try:
        driver_digest = chain[1].claims["measurement"]
        tsm_digest = chain[2].claims["measurement"]
        debug_platform = chain[2].claims["debug_platform"] != b"\x00"
        leaf = chain[3].claims
        measurement, debug_opt_in = leaf["tvm_measurement"], leaf["debug_opt_in"] != b"\x00"
        _ = leaf["report_data"]
    except KeyError:
        return Verdict(RejectReason.ChainBroken)

    if policy.expected_tcb_digests is not None:
        if (driver_digest, tsm_digest) != tuple(policy.expected_tcb_digests):
            return Verdict(RejectReason.TcbMismatch)
    if (debug_opt_in or debug_platform) and not policy.allow_debug:
        return Verdict(RejectReason.DebugForbidden)
    if (policy.expected_tvm_measurement is not None
            and measurement != policy.expected_tvm_measurement):
        return Verdict(RejectReason.MeasurementMismatch)
    return ACCEPT


def verify_encoded(blob: bytes, trusted_root_public_key: bytes, policy: Policy = Policy()) -> Verdict:
    """:func:`verify_evidence` over the wire form; undecodable input is a broken chain."""
    try:
        evidence = AttestationEvidence.decode(blob)
    except (ValueError, UnicodeDecodeError, struct.error):
        return Verdict(RejectReason.ChainBroken)
    return verify_evidence(evidence, trusted_root_public_key, policy)
