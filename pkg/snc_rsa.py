#!/usr/bin/env python3
"""
RSA-based secure network coding authenticator (DSCS I tags).

A block v_i is augmented with a unit coefficient vector e_i and tagged with
(s_i, x_i) such that

    x_i^e = g^{s_i} * prod_j g_j^{v_ij} * h_i   (mod N)

Tags combine homomorphically: for coefficients nu_i the server can build a
tag for sum(nu_i * u_i) reduced mod e without the trapdoor, carrying the
integer overflow of the reduction into the group element.
"""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from auth_skiplist import Metadata
from crypto_core import (
    RsaTrapdoor,
    byte_width,
    decode_int,
    decode_int_vec,
    default_rng,
    encode_int,
    encode_int_vec,
    eth_root,
    mod_inverse,
    multi_exp,
    read_be_uint,
)
from errors import (
    IndexOutOfRange,
    LengthMismatch,
    MalformedMessage,
    NonInvertibleDenominator,
    SegmentOutOfField,
)

# Configure module logger
logger = logging.getLogger(__name__)

PUBLIC_KEY_VERSION = 1


@dataclass
class SncRsaPublicKey:
    """(N, e, g, g_1..g_n, h_1..h_m) plus the skip-list metadata once outsourced."""

    N: int
    e: int
    g: int
    g_list: Tuple[int, ...]
    h_list: List[int]
    metadata: Optional[Metadata] = None

    @property
    def n(self) -> int:
        return len(self.g_list)

    @property
    def m(self) -> int:
        return len(self.h_list)

    @property
    def residue_width(self) -> int:
        return byte_width(self.N)

    @property
    def field_width(self) -> int:
        return byte_width(self.e)

    def copy(self) -> "SncRsaPublicKey":
        return replace(self, h_list=list(self.h_list))

    def h(self, i: int) -> int:
        if not 1 <= i <= len(self.h_list):
            raise IndexOutOfRange(f"No h value for index {i} (m={len(self.h_list)})")
        return self.h_list[i - 1]

    def to_bytes(self) -> bytes:
        width = self.residue_width
        parts = [
            struct.pack(">I", PUBLIC_KEY_VERSION),
            encode_int(self.N),
            encode_int(self.e),
            encode_int(self.g, width),
            encode_int_vec(self.g_list, width),
            encode_int_vec(self.h_list, width),
        ]
        if self.metadata is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + self.metadata.to_bytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["SncRsaPublicKey", int]:
        version = read_be_uint(data, offset, 4)
        if version != PUBLIC_KEY_VERSION:
            raise MalformedMessage(f"Unsupported public key version {version}")
        offset += 4
        N, offset = decode_int(data, offset)
        e, offset = decode_int(data, offset)
        g, offset = decode_int(data, offset)
        g_list, offset = decode_int_vec(data, offset)
        h_list, offset = decode_int_vec(data, offset)
        has_metadata = read_be_uint(data, offset, 1)
        offset += 1
        metadata = None
        if has_metadata:
            metadata, offset = Metadata.from_bytes(data, offset)
        return cls(N=N, e=e, g=g, g_list=tuple(g_list), h_list=h_list, metadata=metadata), offset


@dataclass(frozen=True)
class SncRsaTag:
    s: int
    x: int

    def to_bytes(self, pk: SncRsaPublicKey) -> bytes:
        """INT(s) || INT(x) with widths fixed by the key."""
        return encode_int(self.s, pk.field_width) + encode_int(self.x, pk.residue_width)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["SncRsaTag", int]:
        s, offset = decode_int(data, offset)
        x, offset = decode_int(data, offset)
        return cls(s=s, x=x), offset

    @classmethod
    def parse(cls, data: bytes) -> "SncRsaTag":
        tag, end = cls.from_bytes(data)
        if end != len(data):
            raise MalformedMessage("Trailing bytes after tag")
        return tag


@dataclass(frozen=True)
class AugmentedVector:
    """Block segments plus a sparse coefficient part (1-based index -> value)."""

    data: Tuple[int, ...]
    coeffs: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def unit(cls, block: Sequence[int], i: int) -> "AugmentedVector":
        return cls(data=tuple(block), coeffs={i: 1})

    def dense(self, m: int) -> List[int]:
        """data followed by the m coefficient entries."""
        tail = [0] * m
        for index, value in self.coeffs.items():
            tail[index - 1] = value
        return list(self.data) + tail


def _check_block(block: Sequence[int], pk: SncRsaPublicKey) -> None:
    if len(block) != pk.n:
        raise LengthMismatch(f"Block has {len(block)} segments, key expects {pk.n}")
    for j, segment in enumerate(block, start=1):
        if not 0 <= segment < pk.e:
            raise SegmentOutOfField(f"Segment {j} value {segment} outside F_e")


def tag_value(block: Sequence[int], s: int, h: int, pk: SncRsaPublicKey) -> int:
    """g^s * prod g_j^{v_j} * h mod N."""
    return multi_exp([pk.g, *pk.g_list, h], [s, *block, 1], pk.N)


def tag_gen(
    block: Sequence[int],
    i: int,
    sk: RsaTrapdoor,
    pk: SncRsaPublicKey,
    rng: Optional[random.Random] = None,
    s: Optional[int] = None,
    h: Optional[int] = None,
) -> SncRsaTag:
    """
    Tag block ``i``. ``h`` overrides h_i for blocks whose h value is not yet
    part of the key (an insert in flight).
    """
    _check_block(block, pk)
    if s is None:
        s = (rng or default_rng()).randrange(pk.e)
    h_value = pk.h(i) if h is None else h
    x = eth_root(tag_value(block, s, h_value, pk), pk.e, sk)
    return SncRsaTag(s=s, x=x)


def check_tag(block: Sequence[int], tag: SncRsaTag, h: int, pk: SncRsaPublicKey) -> bool:
    if len(block) != pk.n or any(not 0 <= v < pk.e for v in block):
        return False
    if not 0 <= tag.s < pk.e or not 1 <= tag.x < pk.N:
        return False
    return pow(tag.x, pk.e, pk.N) == tag_value(block, tag.s, h, pk)


def verify_single(block: Sequence[int], i: int, tag: SncRsaTag, pk: SncRsaPublicKey) -> bool:
    if not 1 <= i <= pk.m:
        return False
    return check_tag(block, tag, pk.h(i), pk)


@dataclass(frozen=True)
class LinearSums:
    """Exact integer sums behind a combination, before reduction mod e."""

    data: Tuple[int, ...]
    coeffs: Dict[int, int]
    s: int


def linear_sums(items: Sequence[Tuple[AugmentedVector, SncRsaTag, int]]) -> LinearSums:
    if not items:
        raise LengthMismatch("combine needs at least one item")
    width = len(items[0][0].data)
    data = [0] * width
    coeffs: Dict[int, int] = {}
    s_total = 0
    for vector, tag, nu in items:
        if len(vector.data) != width:
            raise LengthMismatch("Augmented vectors differ in length")
        for j, value in enumerate(vector.data):
            data[j] += nu * value
        for index, value in vector.coeffs.items():
            coeffs[index] = coeffs.get(index, 0) + nu * value
        s_total += nu * tag.s
    return LinearSums(data=tuple(data), coeffs=coeffs, s=s_total)


def combine(
    items: Sequence[Tuple[AugmentedVector, SncRsaTag, int]],
    pk: SncRsaPublicKey,
) -> Tuple[AugmentedVector, SncRsaTag]:
    """Homomorphic combination sum(nu_i * u_i) with its tag."""
    e, N = pk.e, pk.N
    sums = linear_sums(items)

    w_data = tuple(value % e for value in sums.data)
    data_carry = [value // e for value in sums.data]
    w_coeffs = {index: value % e for index, value in sums.coeffs.items() if value % e}
    coeff_carry = {index: value // e for index, value in sums.coeffs.items() if value // e}
    s = sums.s % e
    s_carry = sums.s // e

    numerator = multi_exp([tag.x for _, tag, _ in items], [nu for _, _, nu in items], N)
    carry_bases = [pk.g, *pk.g_list] + [pk.h(index) for index in coeff_carry]
    carry_exps = [s_carry, *data_carry] + list(coeff_carry.values())
    denominator = multi_exp(carry_bases, carry_exps, N)
    inverse = mod_inverse(denominator, N)
    if inverse is None:
        logger.critical("Carry term shares a factor with N; modulus is compromised")
        raise NonInvertibleDenominator("Carry term is not invertible modulo N")
    return AugmentedVector(data=w_data, coeffs=w_coeffs), SncRsaTag(s=s, x=numerator * inverse % N)


def verify_combined(w: AugmentedVector, t: SncRsaTag, pk: SncRsaPublicKey) -> bool:
    """x^e == g^s * prod g_j^{w_j} * prod h_j^{w_(n+j)} mod N."""
    if len(w.data) != pk.n:
        return False
    if any(not 0 <= value < pk.e for value in w.data):
        return False
    if any(not 1 <= index <= pk.m or not 0 <= value < pk.e for index, value in w.coeffs.items()):
        return False
    if not 0 <= t.s < pk.e or not 1 <= t.x < pk.N:
        return False
    # Zero coefficient slots contribute nothing; only the sparse part is exponentiated.
    bases = [pk.g, *pk.g_list] + [pk.h(index) for index in w.coeffs]
    exps = [t.s, *w.data] + list(w.coeffs.values())
    return pow(t.x, pk.e, pk.N) == multi_exp(bases, exps, pk.N)
