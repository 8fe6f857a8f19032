"""The PSI-WCA protocol engine.

One round: the client sends each server one key per (token, weight) input
pair; each server folds its whole token set through every key, adds a
shared blind, and returns a single group element. The two answers add up
to the weighted intersection sum. An incremental window mode stores per
(key-epoch, token-epoch) partial sums so that sliding-window results stay
exactly equal to the one-shot protocol on the window unions.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .dpf import DomainPoint, DpfKey, PrgCounter, eval_batch_sum, gen_batch
from .errors import InvalidInputError, ProtocolError
from .group import Group, GroupElement

QUERY_ID_BYTES = 16
BLIND_SEED_BYTES = 32


@dataclass(frozen=True)
class WeightedToken:
    token: DomainPoint
    weight: GroupElement


@dataclass(frozen=True)
class QueryShare:
    query_id: bytes
    epoch: int
    keys: tuple[DpfKey, ...]

    def __post_init__(self):
        if len(self.query_id) != QUERY_ID_BYTES:
            raise InvalidInputError("query id must be 16 bytes")
        if not self.keys:
            raise InvalidInputError("query must carry at least one key")
        bits = self.keys[0].domain_bits
        group = self.keys[0].group
        for k in self.keys:
            if k.domain_bits != bits or k.group != group:
                raise InvalidInputError("keys in a query must share domain and group")

    @property
    def domain_bits(self) -> int:
        return self.keys[0].domain_bits

    @property
    def group(self) -> Group:
        return self.keys[0].group


@dataclass(frozen=True)
class AnswerShare:
    query_id: bytes
    value: GroupElement


def derive_query_id(seed: bytes) -> bytes:
    return hashlib.blake2b(b"query-id", key=_norm_key(seed), digest_size=QUERY_ID_BYTES).digest()


def _norm_key(seed: bytes) -> bytes:
    return seed if len(seed) <= 64 else hashlib.sha256(seed).digest()


def client_gen_query(
    inputs: Sequence[WeightedToken],
    seed: bytes,
    epoch: int = 0,
    counter: PrgCounter | None = None,
) -> tuple[QueryShare, QueryShare]:
    """Generate the two per-server query shares for the client's inputs.

    Duplicate tokens are allowed; their weights accumulate additively in
    the result. Deterministic given `seed`.
    """
    if not inputs:
        raise InvalidInputError("client input list is empty")
    group = inputs[0].weight.group
    bits = inputs[0].token.bits
    for wt in inputs:
        if wt.weight.group != group:
            raise InvalidInputError("mixed weight groups in client input")
        if wt.token.bits != bits:
            raise InvalidInputError("mixed token bit-lengths in client input")
    keys0, keys1 = gen_batch([wt.token for wt in inputs], [wt.weight for wt in inputs], seed, counter)
    qid = derive_query_id(seed)
    return (
        QueryShare(qid, epoch, tuple(keys0)),
        QueryShare(qid, epoch, tuple(keys1)),
    )


def server_eval(
    share: QueryShare,
    tokens: Iterable[DomainPoint],
    blind: GroupElement,
    counter: PrgCounter | None = None,
) -> AnswerShare:
    """Fold the server's token set through every key and add the blind."""
    toks = list(tokens)
    bits = share.domain_bits
    for i, t in enumerate(toks):
        if t.bits != bits:
            raise InvalidInputError(f"server token {i} has {t.bits} bits, query expects {bits}")
    if share.group != blind.group:
        raise InvalidInputError("blind group does not match query group")
    if not toks:
        return AnswerShare(share.query_id, blind)
    total = eval_batch_sum(list(share.keys), toks, counter)
    return AnswerShare(share.query_id, total + blind)


def derive_blinds(shared_seed: bytes, query_id: bytes, group: Group) -> tuple[GroupElement, GroupElement]:
    """Derive (r, -r) for a query from the servers' shared secret.

    Deterministic per (seed, query id); the two outputs always cancel.
    """
    if len(shared_seed) != BLIND_SEED_BYTES:
        raise InvalidInputError(f"shared seed must be {BLIND_SEED_BYTES} bytes")
    vals = []
    for c, m in enumerate(group.moduli):
        h = hashlib.blake2b(
            b"blind" + query_id + struct.pack("<I", c), key=shared_seed, digest_size=8
        )
        vals.append(int.from_bytes(h.digest(), "little") % m)
    r = GroupElement(group, tuple(vals))
    return r, -r


def client_reconstruct(a0: AnswerShare, a1: AnswerShare) -> GroupElement:
    if a0.query_id != a1.query_id:
        raise ProtocolError("answer shares carry different query ids")
    return a0.value + a1.value


def intersection_sum_plain(
    inputs: Sequence[WeightedToken], tokens: Iterable[DomainPoint]
) -> GroupElement:
    """Brute-force oracle: sum of weights whose token is in the server set."""
    if not inputs:
        raise InvalidInputError("client input list is empty")
    group = inputs[0].weight.group
    present = {t.value for t in tokens}
    acc = group.zero()
    for wt in inputs:
        if wt.token.value in present:
            acc = acc + wt.weight
    return acc


# ---------------------------------------------------------------------------
# Incremental sliding-window mode


@dataclass
class EpochWindow:
    """Sliding-window engine simulating the client and both servers.

    Each epoch the client generates keys only for its new tokens; the
    servers evaluate (new keys x all stored tokens) and (stored keys x new
    tokens), keeping one partial sum per (key-epoch, token-epoch) pair per
    party. Expired epochs drop their rows and columns, so the running sum
    always equals the one-shot protocol on the live window.
    """

    T: int
    group: Group
    shared_seed: bytes
    master_seed: bytes
    current_epoch: int | None = None
    _client_keys: dict = field(default_factory=dict)   # epoch -> (keys0, keys1)
    _server_tokens: dict = field(default_factory=dict)  # epoch -> list[DomainPoint]
    _partials: dict = field(default_factory=dict)       # (ke, te) -> (g0, g1)

    def advance(
        self,
        epoch: int,
        new_client_tokens: Sequence[WeightedToken],
        new_server_tokens: Sequence[DomainPoint],
        counter: PrgCounter | None = None,
    ) -> tuple[AnswerShare, AnswerShare]:
        """Roll the window to `epoch` and return the current blinded answers."""
        if self.current_epoch is not None and epoch <= self.current_epoch:
            raise ProtocolError(f"epoch regression: {epoch} <= {self.current_epoch}")
        self.current_epoch = epoch
        self._expire(epoch)

        if new_client_tokens:
            seed = hashlib.blake2b(
                b"epoch-keys" + struct.pack("<q", epoch), key=_norm_key(self.master_seed), digest_size=32
            ).digest()
            k0, k1 = gen_batch(
                [wt.token for wt in new_client_tokens],
                [wt.weight for wt in new_client_tokens],
                seed,
                counter,
            )
            self._client_keys[epoch] = (k0, k1)
        self._server_tokens[epoch] = list(new_server_tokens)

        new_keys = self._client_keys.get(epoch)
        for te, toks in self._server_tokens.items():
            if new_keys is not None and toks:
                self._partials[(epoch, te)] = (
                    eval_batch_sum(new_keys[0], toks, counter),
                    eval_batch_sum(new_keys[1], toks, counter),
                )
        new_toks = self._server_tokens[epoch]
        for ke, (k0, k1) in self._client_keys.items():
            if ke != epoch and new_toks:
                prev = self._partials.get((ke, epoch), (self.group.zero(), self.group.zero()))
                self._partials[(ke, epoch)] = (
                    prev[0] + eval_batch_sum(k0, new_toks, counter),
                    prev[1] + eval_batch_sum(k1, new_toks, counter),
                )
        return self.window_answers()

    def window_answers(self) -> tuple[AnswerShare, AnswerShare]:
        qid = hashlib.blake2b(
            b"window-query" + struct.pack("<q", self.current_epoch or 0),
            key=_norm_key(self.master_seed),
            digest_size=QUERY_ID_BYTES,
        ).digest()
        r0, r1 = derive_blinds(self.shared_seed, qid, self.group)
        v0, v1 = self.group.zero(), self.group.zero()
        for g0, g1 in self._partials.values():
            v0 = v0 + g0
            v1 = v1 + g1
        return AnswerShare(qid, v0 + r0), AnswerShare(qid, v1 + r1)

    def window_total(self) -> GroupElement:
        a0, a1 = self.window_answers()
        return client_reconstruct(a0, a1)

    def live_client_tokens(self) -> list[int]:
        return sorted(self._client_keys.keys())

    def live_server_epochs(self) -> list[int]:
        return sorted(self._server_tokens.keys())

    def _expire(self, epoch: int) -> None:
        cutoff = epoch - self.T
        dead = [e for e in self._server_tokens if e <= cutoff]
        for e in dead:
            del self._server_tokens[e]
        dead_k = [e for e in self._client_keys if e <= cutoff]
        for e in dead_k:
            del self._client_keys[e]
        dead_p = [p for p in self._partials if p[0] <= cutoff or p[1] <= cutoff]
        for p in dead_p:
            del self._partials[p]
