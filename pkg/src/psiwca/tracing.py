"""End-to-end contact-tracing token lifecycle with a simulated TEE.

Devices broadcast high-entropy nonces and store the keyed hash of
(nonce, location cell, time cell); receivers hash the same tuple under
the same device key, so sender- and receiver-side entries match exactly
when (and only when) the context matches. Infected devices upload their
stored hashes through a verification server that checks a keyed
commitment over the exact submitted sequence; traces run the bucketed
PSI-WCA query against the two evaluation servers.

The trusted component is simulated: an in-process object holds K1/K2,
and remote attestation is a stubbed keyed handshake. No raw nonce,
location, or timestamp ever leaves a device; only hashes do.
"""
from __future__ import annotations

import hashlib
import hmac as hmac_mod
import os
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

from .bucketing import BucketConfig, Stash, assign_day, plan_to_query
from .dpf import DomainPoint
from .errors import InvalidInputError, ProtocolError
from .group import Group, GroupElement
from .psi import AnswerShare, WeightedToken, client_reconstruct
from .service import (
    KeyServer,
    MsgType,
    VerificationServer,
    WireFrame,
    decode_answer,
    encode_bucketed_query,
    encode_submit,
    open_provision_blob,
    raise_on_error,
    upload_commitment,
)

NONCE_BITS = 128
TIME_SLOT_MINUTES = 10  # quantization when callers pass wall-clock minutes


def minutes_to_slot(minutes: int) -> int:
    return minutes // TIME_SLOT_MINUTES


@dataclass(frozen=True)
class RawToken:
    """A broadcast nonce; context is attached at hash time, never sent."""

    nonce: bytes

    def __post_init__(self):
        if len(self.nonce) != NONCE_BITS // 8:
            raise InvalidInputError("nonce must be 128 bits")

    def over_the_air(self) -> bytes:
        return self.nonce


@dataclass(frozen=True)
class ReceiveContext:
    cell: str
    day: int
    slot: int


@dataclass(frozen=True)
class RiskScore:
    value: GroupElement


def encode_context(nonce: bytes, cell: str, day: int, slot: int) -> bytes:
    """Canonical (nonce, location, time) encoding fed to the device PRF.

    This exact byte string is what must never appear in any server-bound
    message; the transcript scan greps for it and for the raw nonce.
    """
    cell_b = cell.encode()
    return b"ctx\x01" + struct.pack("<H", len(cell_b)) + cell_b + struct.pack("<qI", day, slot) + nonce


class CryptoSuite:
    """Keyed primitives held inside the simulated TEE."""

    def __init__(self, k1: bytes, k2: bytes, domain_bits: int = 74):
        if len(k1) != 32 or len(k2) != 32:
            raise InvalidInputError("K1/K2 must be 256-bit keys")
        self.k1 = k1
        self.k2 = k2
        self.domain_bits = domain_bits

    def true_token(self, nonce: bytes, cell: str, day: int, slot: int) -> DomainPoint:
        """Hash-then-PRF token: truncated H(F(K1, (nonce, location, time)))."""
        prf = hmac_mod.new(self.k1, encode_context(nonce, cell, day, slot), hashlib.sha256).digest()
        digest = hashlib.sha256(prf).digest()[:16]  # 128-bit true token
        value = int.from_bytes(digest, "little") & ((1 << self.domain_bits) - 1)
        return DomainPoint(value, self.domain_bits)

    def upload_tag(self, vc: bytes, tokens: Sequence[DomainPoint]) -> bytes:
        return upload_commitment(self.k2, vc, tokens)


def provision_suite(key_server: KeyServer, device_id: bytes, enrollment_key: bytes,
                    domain_bits: int = 74) -> CryptoSuite:
    """Stubbed remote attestation: keyed evidence out, sealed keys back."""
    evidence = hmac_mod.new(enrollment_key, b"attest" + device_id, hashlib.sha256).digest()
    blob = key_server.provision(device_id, evidence)
    k1, k2 = open_provision_blob(enrollment_key, device_id, blob)
    return CryptoSuite(k1, k2, domain_bits)


Scorer = Callable[[ReceiveContext], "GroupElement | RiskScore | int"]


@dataclass
class _OwnEntry:
    point: DomainPoint
    day: int


@dataclass
class _SeenEntry:
    point: DomainPoint
    weight: GroupElement
    day: int
    queried: bool = False


class Device:
    """One simulated handset: broadcast/receive state plus the query stash."""

    def __init__(
        self,
        device_id: str,
        suite: CryptoSuite,
        group: Group | None = None,
        T: int = 14,
        bucket_cfg: BucketConfig | None = None,
        rng=None,
    ):
        self.device_id = device_id
        self.suite = suite
        self.group = group or Group()
        self.T = T
        self.bucket_cfg = bucket_cfg or BucketConfig(
            buckets=1, capacity=64, choices=1,
            hash_seed=hashlib.blake2b(device_id.encode(), digest_size=16).digest(),
        )
        self._rng = rng or os.urandom
        self.day = 0
        self.slot = 0
        self.cell = ""
        self.own: list[_OwnEntry] = []       # U: hashes of own broadcasts
        self.seen: list[_SeenEntry] = []     # Y: hashes of received tokens
        self.stash = Stash()
        self.risk_total = self.group.zero()
        self.sent_log: list[bytes] = []      # every server-bound byte string
        self._trace_counter = 0

    # -- clock / movement ---------------------------------------------------

    def set_position(self, day: int, slot: int, cell: str) -> None:
        if day < self.day:
            raise ProtocolError("device clock cannot run backwards")
        self.day = day
        self.slot = slot
        self.cell = cell
        self._expire()

    def _expire(self) -> None:
        cutoff = self.day - self.T
        self.own = [e for e in self.own if e.day > cutoff]
        self.seen = [e for e in self.seen if e.day > cutoff]

    # -- protocol steps -------------------------------------------------------

    def broadcast_step(self) -> RawToken:
        """Generate a fresh nonce, store its context hash, emit the nonce."""
        if not self.cell:
            raise ProtocolError("device has no position yet")
        token = RawToken(bytes(self._rng(16)))
        u = self.suite.true_token(token.nonce, self.cell, self.day, self.slot)
        self.own.append(_OwnEntry(u, self.day))
        self._expire()
        return token

    def receive_step(self, token: RawToken, scorer: Scorer | None = None) -> None:
        """Hash the received nonce under this device's own context."""
        ctx = ReceiveContext(self.cell, self.day, self.slot)
        w = scorer(ctx) if scorer is not None else 1
        if isinstance(w, RiskScore):
            w = w.value
        if isinstance(w, int):
            w = self.group.element(w)
        y = self.suite.true_token(token.nonce, self.cell, self.day, self.slot)
        self.seen.append(_SeenEntry(y, w, self.day))
        self._expire()

    def upload(self, vs: VerificationServer) -> bytes:
        """Submit the stored own-hash set through the verification server."""
        vc = vs.issue_challenge()
        tokens = [e.point for e in self.own]
        payload = encode_submit(vc, tokens, self.suite.k2)
        self.sent_log.append(payload)
        frame = vs.dispatch(WireFrame(MsgType.SUBMIT, b"\x00" * 16, payload))
        raise_on_error(frame)
        return bytes(frame.payload)

    def trace(self, transport0, transport1) -> GroupElement:
        """Run one day's bucketed query; returns the cumulative risk total.

        Each stored hash is queried exactly once: new entries join the
        bucket plan together with previously deferred ones, and entries
        that still do not fit wait in the stash for the next trace call.
        """
        fresh = [
            WeightedToken(e.point, e.weight)
            for e in self.seen
            if not e.queried
        ]
        for e in self.seen:
            e.queried = True
        plan, self.stash = assign_day(
            fresh, self.stash, self.bucket_cfg, self.day, self.group, self.suite.domain_bits
        )
        self._trace_counter += 1
        seed = hashlib.blake2b(
            self.device_id.encode() + struct.pack("<qI", self.day, self._trace_counter),
            key=self.suite.k1,
            digest_size=32,
        ).digest()
        bq0, bq1 = plan_to_query(plan, seed, self.group, self.suite.domain_bits)
        answers = []
        for bq, transport in ((bq0, transport0), (bq1, transport1)):
            payload = encode_bucketed_query(bq)
            frame = WireFrame(MsgType.QUERY, bq.query_id, payload)
            self.sent_log.append(frame.to_bytes())
            resp = raise_on_error(transport(frame))
            if resp.query_id != bq.query_id:
                raise ProtocolError("answer does not match the outstanding query id")
            answers.append(AnswerShare(resp.query_id, decode_answer(resp.payload, self.group)))
        self.risk_total = self.risk_total + client_reconstruct(answers[0], answers[1])
        return self.risk_total

    def pending_queries(self) -> int:
        return len(self.stash)


# ---------------------------------------------------------------------------
# Scenario files


@dataclass(frozen=True)
class TraceOutcome:
    device_id: str
    expected: int
    actual: int

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass(frozen=True)
class ScenarioRecord:
    kind: str
    args: tuple


def parse_scenario(text: str) -> list[ScenarioRecord]:
    """Line-oriented records: DEVICE id | AT id day slot cell | INFECT id |
    TRACE id expected_total. '#' starts a comment."""
    records = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].upper()
        try:
            if kind == "DEVICE" and len(parts) == 2:
                records.append(ScenarioRecord("DEVICE", (parts[1],)))
            elif kind == "AT" and len(parts) == 5:
                records.append(ScenarioRecord("AT", (parts[1], int(parts[2]), int(parts[3]), parts[4])))
            elif kind == "INFECT" and len(parts) == 2:
                records.append(ScenarioRecord("INFECT", (parts[1],)))
            elif kind == "TRACE" and len(parts) == 3:
                records.append(ScenarioRecord("TRACE", (parts[1], int(parts[2]))))
            else:
                raise ValueError("unrecognized record")
        except ValueError as exc:
            raise InvalidInputError(f"scenario line {lineno}: {exc}: {raw!r}") from exc
    return records


class ScenarioRunner:
    """Replays a scenario against a fabric of transports.

    AT records accumulate into (day, slot) co-location groups; a group is
    flushed (everyone broadcasts, everyone else present receives) when a
    record for a different (day, slot) or any non-AT record arrives. Day
    changes roll the server epochs.
    """

    def __init__(
        self,
        key_server: KeyServer,
        enrollment_key: bytes,
        vs: VerificationServer,
        transport0,
        transport1,
        roll: Callable[[int], None],
        group: Group | None = None,
        domain_bits: int = 74,
        T: int = 14,
        scorer: Scorer | None = None,
        bucket_cfg: BucketConfig | None = None,
        rng_seed: int = 0,
    ):
        self.key_server = key_server
        self.enrollment_key = enrollment_key
        self.vs = vs
        self.transports = (transport0, transport1)
        self.roll = roll
        self.group = group or Group()
        self.domain_bits = domain_bits
        self.T = T
        self.scorer = scorer
        self.bucket_cfg = bucket_cfg
        self.devices: dict[str, Device] = {}
        self.outcomes: list[TraceOutcome] = []
        self._pending: list[tuple[str, int, int, str]] = []
        self._current_day = 0
        self._nonce_counter = 0
        self._rng_seed = rng_seed

    def _mk_rng(self, device_id: str):
        import random as _random

        r = _random.Random(f"{self._rng_seed}:{device_id}")
        return lambda n: r.getrandbits(8 * n).to_bytes(n, "little")

    def run(self, records: Sequence[ScenarioRecord]) -> list[TraceOutcome]:
        for rec in records:
            if rec.kind != "AT":
                self._flush()
            if rec.kind == "DEVICE":
                (did,) = rec.args
                suite = provision_suite(self.key_server, did.encode(), self.enrollment_key, self.domain_bits)
                self.devices[did] = Device(
                    did, suite, self.group, self.T, bucket_cfg=self.bucket_cfg,
                    rng=self._mk_rng(did),
                )
            elif rec.kind == "AT":
                did, day, slot, cell = rec.args
                if self._pending and (day, slot) != (self._pending[0][1], self._pending[0][2]):
                    self._flush()
                self._pending.append((did, day, slot, cell))
            elif rec.kind == "INFECT":
                (did,) = rec.args
                self.devices[did].upload(self.vs)
            elif rec.kind == "TRACE":
                did, expected = rec.args
                dev = self.devices[did]
                total = dev.trace(*self.transports)
                self.outcomes.append(TraceOutcome(did, expected, total.values[0]))
        self._flush()
        return self.outcomes

    def _flush(self) -> None:
        if not self._pending:
            return
        day, slot = self._pending[0][1], self._pending[0][2]
        if day > self._current_day:
            self._current_day = day
            self.roll(day)
        by_cell: dict[str, list[str]] = {}
        for did, _, _, cell in self._pending:
            self.devices[did].set_position(day, slot, cell)
            by_cell.setdefault(cell, []).append(did)
        for cell, ids in by_cell.items():
            broadcasts = [(did, self.devices[did].broadcast_step()) for did in ids]
            for did, token in broadcasts:
                for other in ids:
                    if other != did:
                        self.devices[other].receive_step(token, self.scorer)
        self._pending = []
