"""Abelian payload groups: products of integer residue rings Z_M1 x ... x Z_Mj.

The default group is Z_{2^16}, a single factor. Elements are immutable
residue vectors; all arithmetic is componentwise modular.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConfigurationError, InvalidInputError

# Moduli must fit the 64-bit little-endian slot of the binary descriptor.
MAX_MODULUS = 1 << 63


@dataclass(frozen=True)
class Group:
    """A product group described by its per-component moduli."""

    moduli: tuple[int, ...] = (1 << 16,)

    def __post_init__(self):
        if not self.moduli:
            raise ConfigurationError("group needs at least one factor")
        for m in self.moduli:
            if not (2 <= m <= MAX_MODULUS):
                raise ConfigurationError(f"modulus {m} outside [2, 2^63]")
        object.__setattr__(self, "moduli", tuple(int(m) for m in self.moduli))

    @property
    def num_components(self) -> int:
        return len(self.moduli)

    def zero(self) -> "GroupElement":
        return GroupElement(self, (0,) * len(self.moduli))

    def element(self, values) -> "GroupElement":
        """Build an element, reducing each component mod its modulus.

        Accepts a single int for one-component groups.
        """
        if isinstance(values, int):
            values = (values,)
        vals = tuple(int(v) for v in values)
        if len(vals) != len(self.moduli):
            raise InvalidInputError(
                f"expected {len(self.moduli)} components, got {len(vals)}"
            )
        return GroupElement(self, tuple(v % m for v, m in zip(vals, self.moduli)))

    def from_words(self, words: Sequence[int]) -> "GroupElement":
        """Reduce one u64 word per component into an element."""
        return self.element(tuple(words))

    def random(self, rng) -> "GroupElement":
        """Uniform element from a random.Random or numpy Generator."""
        draw = rng.randrange if hasattr(rng, "randrange") else (
            lambda m: int(rng.integers(0, m))
        )
        return GroupElement(self, tuple(draw(m) for m in self.moduli))

    def descriptor_bytes(self) -> bytes:
        out = bytes([len(self.moduli)])
        for m in self.moduli:
            out += struct.pack("<Q", m)
        return out

    @classmethod
    def from_descriptor(cls, buf: bytes, offset: int = 0) -> tuple["Group", int]:
        """Parse a descriptor, returning (group, bytes consumed)."""
        if len(buf) < offset + 1:
            raise InvalidInputError("truncated group descriptor")
        count = buf[offset]
        need = 1 + 8 * count
        if count < 1 or len(buf) < offset + need:
            raise InvalidInputError("bad group descriptor")
        moduli = struct.unpack_from(f"<{count}Q", buf, offset + 1)
        return cls(tuple(moduli)), need

    def element_byte_length(self) -> int:
        return 8 * len(self.moduli)

    def element_to_bytes(self, e: "GroupElement") -> bytes:
        if e.group != self:
            raise InvalidInputError("element from a different group")
        return struct.pack(f"<{len(self.moduli)}Q", *e.values)

    def element_from_bytes(self, buf: bytes, offset: int = 0) -> "GroupElement":
        vals = struct.unpack_from(f"<{len(self.moduli)}Q", buf, offset)
        return self.element(vals)


@dataclass(frozen=True)
class GroupElement:
    group: Group
    values: tuple[int, ...]

    def __post_init__(self):
        for v, m in zip(self.values, self.group.moduli):
            if not (0 <= v < m):
                raise InvalidInputError(f"component {v} outside [0, {m})")

    def __add__(self, other: "GroupElement") -> "GroupElement":
        self._check(other)
        return GroupElement(
            self.group,
            tuple((a + b) % m for a, b, m in zip(self.values, other.values, self.group.moduli)),
        )

    def __neg__(self) -> "GroupElement":
        return GroupElement(
            self.group, tuple((-a) % m for a, m in zip(self.values, self.group.moduli))
        )

    def __sub__(self, other: "GroupElement") -> "GroupElement":
        return self + (-other)

    def is_zero(self) -> bool:
        return all(v == 0 for v in self.values)

    def _check(self, other: "GroupElement") -> None:
        if not isinstance(other, GroupElement) or other.group != self.group:
            raise InvalidInputError("group mismatch")


def group_sum(group: Group, elements: Iterable[GroupElement]) -> GroupElement:
    acc = group.zero()
    for e in elements:
        acc = acc + e
    return acc


DEFAULT_GROUP = Group()
