"""Leak-free streaming scheduler: hash tokens into buckets, defer overflow.

Tokens are hashed into `m` buckets of capacity `b` using `c` keyed hash
choices. Each token goes greedily to the least-loaded candidate bucket;
if every candidate is full the token moves to a FIFO stash and is placed
with priority the next day. Under-full buckets are padded with dummy
slots (fresh random point, identity weight) so each day's transcript is
exactly m*b keys regardless of the input multiset.

"Leaky" balancing variants (a server-chosen hash that flattens the
observed loads, or buckets determined by token prefixes) would trade
client privacy for balance and are deliberately not implemented.
"""
from __future__ import annotations

import hashlib
import io
import random
import struct
from dataclasses import dataclass, field
from typing import Sequence

from .dpf import DomainPoint, PrgCounter, random_point
from .errors import InvalidInputError
from .group import Group, GroupElement
from .psi import AnswerShare, QueryShare, WeightedToken, derive_query_id, gen_batch
from .dpf import eval_batch_sum

HASH_SEED_BYTES = 16


@dataclass(frozen=True)
class BucketConfig:
    buckets: int            # m
    capacity: int           # b
    choices: int = 1        # c
    rerandomize: bool = False
    hash_seed: bytes = b"\x00" * HASH_SEED_BYTES

    def __post_init__(self):
        if self.buckets < 1 or self.capacity < 1:
            raise InvalidInputError("bucket count and capacity must be >= 1")
        if self.choices < 1:
            raise InvalidInputError("need at least one hash choice")
        if len(self.hash_seed) != HASH_SEED_BYTES:
            raise InvalidInputError(f"hash seed must be {HASH_SEED_BYTES} bytes")

    def day_seed(self, day: int) -> bytes:
        """Per-day hash seed; constant unless rerandomizing daily."""
        if not self.rerandomize:
            return self.hash_seed
        return hashlib.blake2b(
            b"day-seed" + struct.pack("<q", day), key=self.hash_seed, digest_size=HASH_SEED_BYTES
        ).digest()

    def occupancy_ratio(self, n_tokens: int) -> float:
        return n_tokens / (self.buckets * self.capacity)


def hash_to_buckets(token: DomainPoint, seed: bytes, choices: int, buckets: int) -> list[int]:
    """The token's candidate buckets: `choices` independent keyed hashes.

    Deterministic given the seed; duplicates are possible and kept as-is.
    """
    if buckets < 1:
        raise InvalidInputError("bucket count must be >= 1")
    out = []
    tok = token.to_bytes() + bytes([token.bits])
    for i in range(choices):
        h = hashlib.blake2b(tok + struct.pack("<I", i), key=seed, digest_size=8)
        out.append(int.from_bytes(h.digest(), "little") % buckets)
    return out


@dataclass(frozen=True)
class StashEntry:
    token: DomainPoint
    weight: GroupElement
    arrival_day: int


@dataclass
class Stash:
    """FIFO deferral queue: oldest arrival first, then insertion order."""

    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Slot:
    kind: str  # "real" | "dummy"
    token: DomainPoint
    weight: GroupElement
    arrival_day: int | None
    wait: int | None


@dataclass(frozen=True)
class Placement:
    """Audit record of one greedy decision, for property checks."""

    kind: str
    arrival_day: int
    candidates: tuple[int, ...]
    chosen: int | None        # None when deferred
    loads_at_choice: tuple[int, ...]


@dataclass(frozen=True)
class BucketPlan:
    day: int
    config: BucketConfig
    buckets: tuple  # m tuples of exactly b Slots
    waits: tuple    # waits of real tokens placed today, in placement order
    audit: tuple    # Placement records in processing order

    def load_vector(self) -> list[int]:
        """Real-token count per bucket (always <= capacity)."""
        return [sum(1 for s in bs if s.kind == "real") for bs in self.buckets]

    def occupancy_ratio(self) -> float:
        """This day's realized load: placed real tokens over m*b slots."""
        return sum(self.load_vector()) / (self.config.buckets * self.config.capacity)

    def slot_vector(self) -> list[int]:
        return [len(bs) for bs in self.buckets]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("day,bucket,slot,kind,arrival_day,wait\n")
        for q, bs in enumerate(self.buckets):
            for s_idx, slot in enumerate(bs):
                arr = "" if slot.arrival_day is None else str(slot.arrival_day)
                wait = "" if slot.wait is None else str(slot.wait)
                out.write(f"{self.day},{q},{s_idx},{slot.kind},{arr},{wait}\n")
        return out.getvalue()


def assign_day(
    new_tokens: Sequence[WeightedToken],
    stash: Stash,
    cfg: BucketConfig,
    day: int,
    group: Group,
    domain_bits: int,
) -> tuple[BucketPlan, Stash]:
    """Run one day of the greedy bucketing process.

    Stash entries are placed first (FIFO), then the day's arrivals in
    order. A token goes to the least-loaded of its candidate buckets,
    ties broken by lowest bucket index; if all candidates are full it is
    deferred to the returned stash. Every bucket is then padded with
    dummy slots to exactly the configured capacity.
    """
    seed = cfg.day_seed(day)
    m, b, c = cfg.buckets, cfg.capacity, cfg.choices
    loads = [0] * m
    placed: list[list[Slot]] = [[] for _ in range(m)]
    next_stash = Stash()
    waits: list[int] = []
    audit: list[Placement] = []

    ordered = [(e.token, e.weight, e.arrival_day) for e in stash.entries]
    ordered += [(wt.token, wt.weight, day) for wt in new_tokens]

    for token, weight, arrival in ordered:
        if token.bits != domain_bits:
            raise InvalidInputError("token bit-length does not match the configured domain")
        cands = hash_to_buckets(token, seed, c, m)
        best = None
        for q in cands:
            if best is None or loads[q] < loads[best] or (loads[q] == loads[best] and q < best):
                best = q
        snapshot = tuple(loads[q] for q in cands)
        if loads[best] >= b:
            next_stash.entries.append(StashEntry(token, weight, arrival))
            audit.append(Placement("defer", arrival, tuple(cands), None, snapshot))
        else:
            wait = day - arrival
            loads[best] += 1
            placed[best].append(Slot("real", token, weight, arrival, wait))
            waits.append(wait)
            audit.append(Placement("place", arrival, tuple(cands), best, snapshot))

    dummy_rng = random.Random(
        hashlib.blake2b(b"dummy" + struct.pack("<q", day), key=seed, digest_size=8).digest()
    )
    zero = group.zero()
    for q in range(m):
        while len(placed[q]) < b:
            placed[q].append(Slot("dummy", random_point(domain_bits, dummy_rng), zero, None, None))

    plan = BucketPlan(day, cfg, tuple(tuple(bs) for bs in placed), tuple(waits), tuple(audit))
    return plan, next_stash


@dataclass(frozen=True)
class BucketedQuery:
    """One day's padded query: exactly m*b keys for one party."""

    query_id: bytes
    day: int
    config: BucketConfig
    domain_bits: int
    shares: tuple  # m QueryShares of exactly b keys each


def plan_to_query(
    plan: BucketPlan,
    seed: bytes,
    group: Group,
    domain_bits: int,
    counter: PrgCounter | None = None,
) -> tuple[BucketedQuery, BucketedQuery]:
    """Turn a complete plan into the two per-party bucketed queries."""
    cfg = plan.config
    alphas, betas = [], []
    for bs in plan.buckets:
        if len(bs) != cfg.capacity:
            raise InvalidInputError("plan has an unpadded bucket")
        for slot in bs:
            alphas.append(slot.token)
            betas.append(slot.weight if slot.kind == "real" else group.zero())
    keys0, keys1 = gen_batch(alphas, betas, seed, counter)
    qid = derive_query_id(seed + struct.pack("<q", plan.day))
    b = cfg.capacity

    def bundle(keys):
        shares = tuple(
            QueryShare(qid, plan.day, tuple(keys[q * b : (q + 1) * b]))
            for q in range(cfg.buckets)
        )
        return BucketedQuery(qid, plan.day, cfg, domain_bits, shares)

    return bundle(keys0), bundle(keys1)


def bucketed_server_eval(
    bq: BucketedQuery,
    tokens: Sequence[DomainPoint],
    blind: GroupElement,
    counter: PrgCounter | None = None,
) -> AnswerShare:
    """Evaluate a bucketed query: each server token is checked in every
    distinct candidate bucket, against only that bucket's keys."""
    cfg = bq.config
    seed = cfg.day_seed(bq.day)
    per_bucket: list[list[DomainPoint]] = [[] for _ in range(cfg.buckets)]
    for tok in tokens:
        if tok.bits != bq.domain_bits:
            raise InvalidInputError("server token bit-length does not match the query")
        # Deduplicate so a token colliding into one bucket twice is counted once.
        for q in set(hash_to_buckets(tok, seed, cfg.choices, cfg.buckets)):
            per_bucket[q].append(tok)
    value = blind
    for q, toks in enumerate(per_bucket):
        if toks:
            value = value + eval_batch_sum(list(bq.shares[q].keys), toks, counter)
    return AnswerShare(bq.query_id, value)
