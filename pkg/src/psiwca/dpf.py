"""Distributed point functions over an Abelian payload group.

A point function takes a fixed special input to a payload value and every
other input to the group identity. It is split into two keys; each party
evaluates its key locally and the two output shares add up to the function
value. The construction is the usual binary-tree one: a length-doubling PRG
expands a per-node seed into two child seeds plus control bits, and one
correction word per level forces the two parties' trees to collapse onto
each other everywhere except along the path to the special input.

The PRG is a fixed-key block cipher in a Matyas-Meyer-Oseas-style mode:
``child = E_K(x) XOR x`` where ``x`` is the parent seed XORed with a
per-direction tweak. One cipher call yields one child, so key generation
costs 4 calls per domain bit (both children, both parties) and evaluation
costs 1 call per domain bit. All hot paths are vectorized: seeds live in
uint64 numpy arrays and each level issues a single ECB batch encryption.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import _kernels
from .errors import ConfigurationError, InvalidInputError
from .group import Group, GroupElement

LAMBDA_BITS = 128
SEED_BYTES = 16
MAX_DOMAIN_BITS = 128
EVAL_ALL_MAX_BITS = 20

KEY_MAGIC = 0xD5
KEY_VERSION = 1

# Fixed cipher key (hex digits of pi); the PRG needs no secret key, only a
# fixed random permutation.
_FIXED_KEY = bytes.fromhex("243f6a8885a308d313198a2e03707344")

_U0 = np.uint64(0)
_U1 = np.uint64(1)
_TWEAK_L = np.uint64(1)
_TWEAK_R = np.uint64(2)
_CLEAR_LOW = np.uint64(0xFFFFFFFFFFFFFFFE)
# Tweaks >= 3 are reserved for output conversion so they never collide with
# the two tree directions.
_CONVERT_TWEAK_BASE = 3


class PrgCounter:
    """Tally of tree seed expansions (one block-cipher call each).

    Counts only the two-child tree expansions that the cost model is stated
    in; the single output-conversion call at a leaf is not tallied. Addition
    is lock-protected so concurrent evaluations may share a counter.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.expansions = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.expansions += int(n)

    def reset(self) -> None:
        with self._lock:
            self.expansions = 0


GLOBAL_COUNTER = PrgCounter()


def _count(counter: PrgCounter | None, n: int) -> None:
    (counter if counter is not None else GLOBAL_COUNTER).add(n)


@dataclass(frozen=True)
class DomainPoint:
    """A fixed-length bit string, stored as an int plus its bit length."""

    value: int
    bits: int

    def __post_init__(self):
        if not (1 <= self.bits <= MAX_DOMAIN_BITS):
            raise InvalidInputError(f"domain bit-length {self.bits} outside [1, {MAX_DOMAIN_BITS}]")
        if not (0 <= self.value < (1 << self.bits)):
            raise InvalidInputError("point value outside its domain")

    def bit(self, level: int) -> int:
        """Bit at `level`, counting from the most significant."""
        return (self.value >> (self.bits - 1 - level)) & 1

    def to_bytes(self) -> bytes:
        return self.value.to_bytes((self.bits + 7) // 8, "little")

    @classmethod
    def from_bytes(cls, data: bytes, bits: int) -> "DomainPoint":
        return cls(int.from_bytes(data, "little"), bits)


def random_point(bits: int, rng) -> DomainPoint:
    if hasattr(rng, "getrandbits"):
        return DomainPoint(rng.getrandbits(bits), bits)
    # numpy Generator
    nbytes = (bits + 7) // 8
    raw = int.from_bytes(rng.bytes(nbytes), "little")
    return DomainPoint(raw & ((1 << bits) - 1), bits)


@dataclass(frozen=True)
class CorrectionWord:
    seed_word: bytes  # 16 bytes
    t_left: int
    t_right: int

    def __post_init__(self):
        if len(self.seed_word) != SEED_BYTES:
            raise InvalidInputError("correction seed word must be 16 bytes")
        if self.t_left not in (0, 1) or self.t_right not in (0, 1):
            raise InvalidInputError("control bits must be 0/1")


@dataclass(frozen=True)
class DpfKey:
    party: int
    domain_bits: int
    group: Group
    root_seed: bytes
    level_corrections: tuple[CorrectionWord, ...]
    output_correction: GroupElement

    def __post_init__(self):
        if self.party not in (0, 1):
            raise InvalidInputError("party must be 0 or 1")
        if len(self.root_seed) != SEED_BYTES:
            raise InvalidInputError("root seed must be 16 bytes")
        if len(self.level_corrections) != self.domain_bits:
            raise InvalidInputError("need exactly one correction word per domain bit")

    def to_bytes(self) -> bytes:
        """Serialize per the byte-exact codec in WIRE.md."""
        out = bytearray([KEY_MAGIC, KEY_VERSION, LAMBDA_BITS, self.domain_bits])
        out += self.group.descriptor_bytes()
        out.append(self.party)
        out += self.root_seed
        for cw in self.level_corrections:
            out += cw.seed_word
            out.append(cw.t_left | (cw.t_right << 1))
        out += self.group.element_to_bytes(self.output_correction)
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DpfKey":
        if len(buf) < 4:
            raise InvalidInputError("key buffer too short")
        if buf[0] != KEY_MAGIC:
            raise InvalidInputError("bad key magic")
        if buf[1] != KEY_VERSION:
            raise InvalidInputError(f"unsupported key version {buf[1]}")
        if buf[2] != LAMBDA_BITS:
            raise ConfigurationError(f"unsupported security parameter {buf[2]}")
        bits = buf[3]
        group, used = Group.from_descriptor(buf, 4)
        off = 4 + used
        expect = off + 1 + SEED_BYTES + bits * (SEED_BYTES + 1) + group.element_byte_length()
        if len(buf) != expect:
            raise InvalidInputError("key buffer length mismatch")
        party = buf[off]
        off += 1
        root = bytes(buf[off : off + SEED_BYTES])
        off += SEED_BYTES
        cws = []
        for _ in range(bits):
            w = bytes(buf[off : off + SEED_BYTES])
            tbits = buf[off + SEED_BYTES]
            cws.append(CorrectionWord(w, tbits & 1, (tbits >> 1) & 1))
            off += SEED_BYTES + 1
        outcw = group.element_from_bytes(buf, off)
        return cls(party, bits, group, root, tuple(cws), outcw)

    def byte_length(self) -> int:
        return len(self.to_bytes())


def serialized_key_length(domain_bits: int, group: Group) -> int:
    """Key byte length as a function of (lambda, domain bits, group) only."""
    return 5 + len(group.descriptor_bytes()) + SEED_BYTES \
        + domain_bits * (SEED_BYTES + 1) + group.element_byte_length()


# ---------------------------------------------------------------------------
# PRG plumbing


_tls = threading.local()


def _aes_ecb(data) -> bytes:
    # ECB keeps no state across blocks, so one encryptor per thread is safe
    # to reuse and skips the per-call key schedule.
    enc = getattr(_tls, "enc", None)
    if enc is None:
        enc = Cipher(algorithms.AES(_FIXED_KEY), modes.ECB()).encryptor()
        _tls.enc = enc
    return enc.update(data)


def _mmo(xlo: np.ndarray, xhi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """E_K(x) XOR x on a batch of 128-bit blocks held as uint64 pairs."""
    buf = np.empty((xlo.shape[0], 2), dtype="<u8")
    buf[:, 0] = xlo
    buf[:, 1] = xhi
    out = np.frombuffer(_aes_ecb(buf.data), dtype="<u8").reshape(-1, 2)
    return out[:, 0] ^ xlo, out[:, 1] ^ xhi


def _expand(lo, hi, tweaks, counter: PrgCounter | None):
    """One child expansion per input seed; returns (child_lo, child_hi, t)."""
    clo, chi = _mmo(lo ^ tweaks, hi)
    t = clo & _U1
    clo = clo & _CLEAR_LOW
    _count(counter, lo.shape[0])
    return clo, chi, t


def _convert(lo: np.ndarray, hi: np.ndarray, group: Group) -> np.ndarray:
    """Map leaf seeds to one pseudorandom u64 word per group component.

    Uses dedicated conversion tweaks so the words are independent of the
    control bit stripped from the leaf seed. Not tallied by PrgCounter.
    """
    ncomp = group.num_components
    words = np.empty((lo.shape[0], ncomp), dtype=np.uint64)
    for pair in range((ncomp + 1) // 2):
        wlo, whi = _mmo(lo ^ np.uint64(_CONVERT_TWEAK_BASE + pair), hi)
        words[:, 2 * pair] = wlo
        if 2 * pair + 1 < ncomp:
            words[:, 2 * pair + 1] = whi
    return words


def _seeds_to_arrays(seeds: Sequence[bytes]) -> tuple[np.ndarray, np.ndarray]:
    flat = np.frombuffer(b"".join(seeds), dtype="<u8").reshape(-1, 2)
    return flat[:, 0].copy(), flat[:, 1].copy()


def _arrays_to_seed(lo: int, hi: int) -> bytes:
    return struct.pack("<QQ", int(lo), int(hi))


def _derive_root_seeds(seed: bytes, count: int) -> list[bytes]:
    """Deterministic per-key root seed pairs from caller randomness."""
    key = seed if len(seed) <= 64 else hashlib.sha256(seed).digest()
    out = []
    for i in range(count):
        h = hashlib.blake2b(b"dpf-root" + struct.pack("<I", i), key=key, digest_size=32)
        d = h.digest()
        out.append((d[:16], d[16:32]))
    return out


# ---------------------------------------------------------------------------
# Key generation


def gen_batch(
    alphas: Sequence[DomainPoint],
    betas: Sequence[GroupElement],
    seed: bytes,
    counter: PrgCounter | None = None,
) -> tuple[list[DpfKey], list[DpfKey]]:
    """Generate key pairs for many point functions, level-synchronously."""
    n = len(alphas)
    if n == 0:
        return [], []
    if len(betas) != n:
        raise InvalidInputError("alphas and betas differ in length")
    bits = alphas[0].bits
    group = betas[0].group
    for a in alphas:
        if a.bits != bits:
            raise InvalidInputError("mixed domain bit-lengths in one batch")
    for b in betas:
        if b.group != group:
            raise InvalidInputError("mixed payload groups in one batch")

    roots = _derive_root_seeds(seed, n)
    s0lo, s0hi = _seeds_to_arrays([r[0] for r in roots])
    s1lo, s1hi = _seeds_to_arrays([r[1] for r in roots])
    t0 = np.zeros(n, dtype=np.uint64)
    t1 = np.ones(n, dtype=np.uint64)

    abits = np.empty((n, bits), dtype=np.uint64)
    for i, a in enumerate(alphas):
        for lvl in range(bits):
            abits[i, lvl] = a.bit(lvl)

    ones = np.full(n, _TWEAK_L, dtype=np.uint64)
    twos = np.full(n, _TWEAK_R, dtype=np.uint64)
    cw_lo = np.empty((n, bits), dtype=np.uint64)
    cw_hi = np.empty((n, bits), dtype=np.uint64)
    tcw_l_all = np.empty((n, bits), dtype=np.uint64)
    tcw_r_all = np.empty((n, bits), dtype=np.uint64)

    for lvl in range(bits):
        batch_lo = np.concatenate([s0lo, s0lo, s1lo, s1lo])
        batch_hi = np.concatenate([s0hi, s0hi, s1hi, s1hi])
        tweaks = np.concatenate([ones, twos, ones, twos])
        clo, chi, ct = _expand(batch_lo, batch_hi, tweaks, counter)
        p0Llo, p0Rlo, p1Llo, p1Rlo = clo[:n], clo[n : 2 * n], clo[2 * n : 3 * n], clo[3 * n :]
        p0Lhi, p0Rhi, p1Lhi, p1Rhi = chi[:n], chi[n : 2 * n], chi[2 * n : 3 * n], chi[3 * n :]
        t0L, t0R, t1L, t1R = ct[:n], ct[n : 2 * n], ct[2 * n : 3 * n], ct[3 * n :]

        a = abits[:, lvl]
        keep_right = a == 1
        # Lose side is the off-path child: R when the path bit is 0.
        cw_lo[:, lvl] = np.where(keep_right, p0Llo ^ p1Llo, p0Rlo ^ p1Rlo)
        cw_hi[:, lvl] = np.where(keep_right, p0Lhi ^ p1Lhi, p0Rhi ^ p1Rhi)
        tcw_l = t0L ^ t1L ^ a ^ _U1
        tcw_r = t0R ^ t1R ^ a
        tcw_l_all[:, lvl] = tcw_l
        tcw_r_all[:, lvl] = tcw_r

        s0lo_k = np.where(keep_right, p0Rlo, p0Llo)
        s0hi_k = np.where(keep_right, p0Rhi, p0Lhi)
        s1lo_k = np.where(keep_right, p1Rlo, p1Llo)
        s1hi_k = np.where(keep_right, p1Rhi, p1Lhi)
        t0_k = np.where(keep_right, t0R, t0L)
        t1_k = np.where(keep_right, t1R, t1L)
        tcw_keep = np.where(keep_right, tcw_r, tcw_l)

        s0lo = s0lo_k ^ (cw_lo[:, lvl] * t0)
        s0hi = s0hi_k ^ (cw_hi[:, lvl] * t0)
        s1lo = s1lo_k ^ (cw_lo[:, lvl] * t1)
        s1hi = s1hi_k ^ (cw_hi[:, lvl] * t1)
        t0 = t0_k ^ (tcw_keep * t0)
        t1 = t1_k ^ (tcw_keep * t1)

    conv0 = _convert(s0lo, s0hi, group)
    conv1 = _convert(s1lo, s1hi, group)

    keys0, keys1 = [], []
    for i in range(n):
        outvals = []
        for c, m in enumerate(group.moduli):
            v = (betas[i].values[c] - int(conv0[i, c]) + int(conv1[i, c])) % m
            if int(t1[i]) == 1:
                v = (-v) % m
            outvals.append(v)
        outcw = GroupElement(group, tuple(outvals))
        cws = tuple(
            CorrectionWord(
                _arrays_to_seed(cw_lo[i, l], cw_hi[i, l]),
                int(tcw_l_all[i, l]),
                int(tcw_r_all[i, l]),
            )
            for l in range(bits)
        )
        keys0.append(DpfKey(0, bits, group, roots[i][0], cws, outcw))
        keys1.append(DpfKey(1, bits, group, roots[i][1], cws, outcw))
    return keys0, keys1


def dpf_gen(
    alpha: DomainPoint,
    beta: GroupElement,
    seed: bytes,
    security_param: int = LAMBDA_BITS,
    counter: PrgCounter | None = None,
) -> tuple[DpfKey, DpfKey]:
    """Generate one key pair; deterministic given `seed`."""
    if security_param != LAMBDA_BITS:
        raise ConfigurationError(f"only lambda={LAMBDA_BITS} is supported")
    k0, k1 = gen_batch([alpha], [beta], seed, counter)
    return k0[0], k1[0]


# ---------------------------------------------------------------------------
# Evaluation


def _key_level_arrays(keys: Sequence[DpfKey]):
    """Stack per-level correction material for a batch of keys."""
    n = len(keys)
    bits = keys[0].domain_bits
    cw_lo = np.empty((n, bits), dtype=np.uint64)
    cw_hi = np.empty((n, bits), dtype=np.uint64)
    tl = np.empty((n, bits), dtype=np.uint64)
    tr = np.empty((n, bits), dtype=np.uint64)
    for i, k in enumerate(keys):
        for l, cw in enumerate(k.level_corrections):
            lo, hi = struct.unpack("<QQ", cw.seed_word)
            cw_lo[i, l] = lo
            cw_hi[i, l] = hi
            tl[i, l] = cw.t_left
            tr[i, l] = cw.t_right
    return cw_lo, cw_hi, tl, tr


def _points_to_words(points: Sequence[DomainPoint]) -> tuple[np.ndarray, np.ndarray]:
    lo = np.fromiter(((p.value & 0xFFFFFFFFFFFFFFFF) for p in points), dtype=np.uint64, count=len(points))
    hi = np.fromiter(((p.value >> 64) for p in points), dtype=np.uint64, count=len(points))
    return lo, hi


def _point_bits_at(lo: np.ndarray, hi: np.ndarray, bits: int, level: int) -> np.ndarray:
    pos = bits - 1 - level
    if pos < 64:
        return (lo >> np.uint64(pos)) & _U1
    return (hi >> np.uint64(pos - 64)) & _U1


def _sum_mod(values: np.ndarray, modulus: int) -> int:
    """Sum residues (< modulus) without overflowing uint64."""
    chunk = max(1, int((1 << 64) - 1) // max(1, (modulus - 1) or 1))
    total = 0
    for start in range(0, values.shape[0], chunk):
        total += int(np.sum(values[start : start + chunk], dtype=np.uint64))
    return total % modulus


def eval_pair_shares(
    keys: Sequence[DpfKey],
    points: Sequence[DomainPoint],
    counter: PrgCounter | None = None,
    max_pairs: int = 1 << 19,
) -> np.ndarray:
    """Evaluate every (key, point) pair; returns residues (nkeys, npoints, ncomp).

    Keys must share (domain, group) but may belong to either party; each
    key's share carries its own party sign. The work is level-synchronous
    over the whole pair grid, chunked so intermediate arrays stay below
    `max_pairs` entries.
    """
    n = len(keys)
    npts = len(points)
    if n == 0 or npts == 0:
        return np.zeros((n, npts, keys[0].group.num_components if n else 1), dtype=np.uint64)
    bits = keys[0].domain_bits
    group = keys[0].group
    for k in keys:
        if k.domain_bits != bits or k.group != group:
            raise InvalidInputError("keys in a batch must share domain and group")
    for i, p in enumerate(points):
        if p.bits != bits:
            raise InvalidInputError(f"point {i} has bit-length {p.bits}, key expects {bits}")

    cw_lo, cw_hi, tcl, tcr = _key_level_arrays(keys)
    root_lo, root_hi = _seeds_to_arrays([k.root_seed for k in keys])
    parties = np.fromiter((k.party for k in keys), dtype=np.uint64, count=n)
    out_cw = np.array(
        [[k.output_correction.values[c] for c in range(group.num_components)] for k in keys],
        dtype=np.uint64,
    )
    pt_lo, pt_hi = _points_to_words(points)

    result = np.empty((n, npts, group.num_components), dtype=np.uint64)
    pts_per_chunk = max(1, max_pairs // n)
    moduli = np.array(group.moduli, dtype=np.uint64)

    for start in range(0, npts, pts_per_chunk):
        stop = min(npts, start + pts_per_chunk)
        width = stop - start
        B = n * width
        lo = np.repeat(root_lo, width)
        hi = np.repeat(root_hi, width)
        t = np.repeat(parties, width)
        bits_mat = np.empty((width, bits), dtype=np.uint64)
        for lvl in range(bits):
            bits_mat[:, lvl] = _point_bits_at(pt_lo[start:stop], pt_hi[start:stop], bits, lvl)
        buf = np.empty((B, 2), dtype="<u8")
        for lvl in range(bits):
            _kernels.fill_tweaked(buf, lo, hi, bits_mat, lvl, width)
            out = np.frombuffer(_aes_ecb(buf.data), dtype="<u8").reshape(-1, 2)
            _kernels.level_update(out, buf, lo, hi, t, cw_lo, cw_hi, tcl, tcr, bits_mat, lvl, width)
        _count(counter, B * bits)
        words = _convert(lo, hi, group)
        for c in range(group.num_components):
            m = moduli[c]
            share = (words[:, c] % m + np.repeat(out_cw[:, c], width) * t) % m
            neg = np.repeat(parties, width) * np.where(share == 0, _U0, _U1)
            share = np.where(neg == 1, m - share, share)
            result[:, start:stop, c] = share.reshape(n, width)
    return result


def eval_batch_sum(
    keys: Sequence[DpfKey],
    points: Sequence[DomainPoint],
    counter: PrgCounter | None = None,
) -> GroupElement:
    """Sum of this party's output shares over all (key, point) pairs."""
    if not keys:
        raise InvalidInputError("empty key list")
    group = keys[0].group
    if not points:
        return group.zero()
    shares = eval_pair_shares(keys, points, counter)
    flat = shares.reshape(-1, group.num_components)
    return GroupElement(group, tuple(_sum_mod(flat[:, c], m) for c, m in enumerate(group.moduli)))


def dpf_eval_many(key: DpfKey, points: Sequence[DomainPoint], counter: PrgCounter | None = None) -> list[GroupElement]:
    """Evaluate one key at many points."""
    shares = eval_pair_shares([key], points, counter)
    g = key.group
    return [GroupElement(g, tuple(int(shares[0, j, c]) for c in range(g.num_components))) for j in range(len(points))]


def dpf_eval(key: DpfKey, x: DomainPoint, counter: PrgCounter | None = None) -> GroupElement:
    """Pure single-point evaluation; records one expansion per domain bit."""
    if x.bits != key.domain_bits:
        raise InvalidInputError(f"point has {x.bits} bits, key expects {key.domain_bits}")
    return dpf_eval_many(key, [x], counter)[0]


def dpf_eval_all(key: DpfKey, counter: PrgCounter | None = None) -> list[GroupElement]:
    """Full-domain evaluation by tree traversal (not per-point descent)."""
    bits = key.domain_bits
    if bits > EVAL_ALL_MAX_BITS:
        raise InvalidInputError(f"refusing eval_all for domain bits > {EVAL_ALL_MAX_BITS}")
    group = key.group
    cw_lo, cw_hi, tcl, tcr = _key_level_arrays([key])
    lo, hi = _seeds_to_arrays([key.root_seed])
    t = np.full(1, key.party, dtype=np.uint64)

    for lvl in range(bits):
        width = lo.shape[0]
        batch_lo = np.concatenate([lo, lo])
        batch_hi = np.concatenate([hi, hi])
        tweaks = np.concatenate([
            np.full(width, _TWEAK_L, dtype=np.uint64),
            np.full(width, _TWEAK_R, dtype=np.uint64),
        ])
        clo, chi, ct = _expand(batch_lo, batch_hi, tweaks, counter)
        # Interleave children so index order stays MSB-first lexicographic.
        nlo = np.empty(2 * width, dtype=np.uint64)
        nhi = np.empty(2 * width, dtype=np.uint64)
        nt = np.empty(2 * width, dtype=np.uint64)
        nlo[0::2], nlo[1::2] = clo[:width], clo[width:]
        nhi[0::2], nhi[1::2] = chi[:width], chi[width:]
        nt[0::2], nt[1::2] = ct[:width], ct[width:]
        parent_t = np.repeat(t, 2)
        nlo ^= np.uint64(cw_lo[0, lvl]) * parent_t
        nhi ^= np.uint64(cw_hi[0, lvl]) * parent_t
        tcw = np.empty(2 * width, dtype=np.uint64)
        tcw[0::2] = tcl[0, lvl]
        tcw[1::2] = tcr[0, lvl]
        lo, hi, t = nlo, nhi, (nt ^ (tcw * parent_t)) & _U1

    words = _convert(lo, hi, group)
    out = []
    moduli = group.moduli
    outcw = key.output_correction.values
    shares = np.empty((lo.shape[0], group.num_components), dtype=np.uint64)
    for c, m in enumerate(moduli):
        share = (words[:, c] % np.uint64(m) + np.uint64(outcw[c]) * t) % np.uint64(m)
        if key.party == 1:
            share = np.where(share == 0, share, np.uint64(m) - share)
        shares[:, c] = share
    for i in range(lo.shape[0]):
        out.append(GroupElement(group, tuple(int(shares[i, c]) for c in range(group.num_components))))
    return out
