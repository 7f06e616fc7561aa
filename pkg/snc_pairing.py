#!/usr/bin/env python3
"""
Pairing-based network coding signatures (DSCS II tags).

Tags are t_i = (H(fid || i) * prod_j g_j^{v_ij})^alpha in G1 and combine
as prod t_i^{nu_i}. Anyone holding the public key checks a combination
(w, t) with

    e(t, h) == e(prod_j H(fid || j)^{w_(n+j)} * prod_j g_j^{w_j}, z)

where z = h^alpha.
"""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from crypto_core import (
    BilinearSuite,
    G1Point,
    G2Point,
    decode_blob,
    decode_int,
    default_rng,
    encode_blob,
    encode_int,
    hash_to_g1,
    read_be_uint,
    suite_from_descriptor,
)
from errors import LengthMismatch, MalformedMessage
from snc_rsa import AugmentedVector

# Configure module logger
logger = logging.getLogger(__name__)

PUBLIC_KEY_VERSION = 1


@dataclass(frozen=True)
class SncPairSecret:
    alpha: int


@dataclass(frozen=True)
class SncPairPublicKey:
    """(suite, g_1..g_n, h, z = h^alpha)."""

    suite: BilinearSuite
    g_list: Tuple[G1Point, ...]
    h: G2Point
    z: G2Point

    @property
    def n(self) -> int:
        return len(self.g_list)

    def to_bytes(self) -> bytes:
        suite = self.suite
        parts = [struct.pack(">I", PUBLIC_KEY_VERSION), suite.descriptor(), struct.pack(">I", self.n)]
        parts.extend(suite.encode_g1(point) for point in self.g_list)
        parts.append(suite.encode_g2(self.h))
        parts.append(suite.encode_g2(self.z))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["SncPairPublicKey", int]:
        version = read_be_uint(data, offset, 4)
        if version != PUBLIC_KEY_VERSION:
            raise MalformedMessage(f"Unsupported public key version {version}")
        suite, offset = suite_from_descriptor(data, offset + 4)
        n = read_be_uint(data, offset, 4)
        offset += 4
        g_list: List[G1Point] = []
        for _ in range(n):
            g_list.append(suite.decode_g1(bytes(data[offset:offset + suite.g1_bytes])))
            offset += suite.g1_bytes
        h = suite.decode_g2(bytes(data[offset:offset + suite.g2_bytes]))
        offset += suite.g2_bytes
        z = suite.decode_g2(bytes(data[offset:offset + suite.g2_bytes]))
        offset += suite.g2_bytes
        return cls(suite=suite, g_list=tuple(g_list), h=h, z=z), offset


@dataclass(frozen=True)
class SncPairTag:
    t: G1Point

    def to_bytes(self, suite: BilinearSuite) -> bytes:
        """INT(compressed point)."""
        return encode_int(int.from_bytes(suite.encode_g1(self.t), "big"), suite.g1_bytes)

    @classmethod
    def from_bytes(cls, data: bytes, suite: BilinearSuite, offset: int = 0) -> Tuple["SncPairTag", int]:
        value, end = decode_int(data, offset)
        try:
            raw = value.to_bytes(suite.g1_bytes, "big")
        except OverflowError as exc:
            raise MalformedMessage("Tag integer too large for a G1 point") from exc
        return cls(t=suite.decode_g1(raw)), end

    @classmethod
    def parse(cls, data: bytes, suite: BilinearSuite) -> "SncPairTag":
        tag, end = cls.from_bytes(data, suite)
        if end != len(data):
            raise MalformedMessage("Trailing bytes after tag")
        return tag


def pair_keygen(
    n: int,
    suite: BilinearSuite,
    rng: Optional[random.Random] = None,
) -> Tuple[SncPairSecret, SncPairPublicKey]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng or default_rng()
    g1 = suite.g1_generator()
    g_list = tuple(suite.g1_mul(g1, suite.random_scalar(rng)) for _ in range(n))
    h = suite.g2_mul(suite.g2_generator(), suite.random_scalar(rng))
    alpha = suite.random_scalar(rng)
    pk = SncPairPublicKey(suite=suite, g_list=g_list, h=h, z=suite.g2_mul(h, alpha))
    return SncPairSecret(alpha=alpha), pk


def _base_point(block: Sequence[int], i: int, fid: bytes, pk: SncPairPublicKey) -> G1Point:
    if len(block) != pk.n:
        raise LengthMismatch(f"Block has {len(block)} segments, key expects {pk.n}")
    suite = pk.suite
    return suite.g1_add(hash_to_g1(fid, i, suite), suite.g1_msm(pk.g_list, block))


def pair_tag_gen(
    block: Sequence[int],
    i: int,
    fid: bytes,
    sk: SncPairSecret,
    pk: SncPairPublicKey,
) -> SncPairTag:
    return SncPairTag(t=pk.suite.g1_mul(_base_point(block, i, fid, pk), sk.alpha))


def pair_combine(
    items: Sequence[Tuple[AugmentedVector, SncPairTag, int]],
    pk: SncPairPublicKey,
) -> Tuple[AugmentedVector, SncPairTag]:
    if not items:
        raise LengthMismatch("combine needs at least one item")
    suite = pk.suite
    order = suite.order
    width = len(items[0][0].data)
    data = [0] * width
    coeffs = {}
    for vector, _, nu in items:
        if len(vector.data) != width:
            raise LengthMismatch("Augmented vectors differ in length")
        for j, value in enumerate(vector.data):
            data[j] = (data[j] + nu * value) % order
        for index, value in vector.coeffs.items():
            coeffs[index] = (coeffs.get(index, 0) + nu * value) % order
    t = suite.g1_msm([tag.t for _, tag, _ in items], [nu for _, _, nu in items])
    w = AugmentedVector(data=tuple(data), coeffs={k: v for k, v in coeffs.items() if v})
    return w, SncPairTag(t=t)


def pair_verify(
    w: AugmentedVector,
    t: SncPairTag,
    fid: bytes,
    pk: SncPairPublicKey,
    m: int,
) -> bool:
    """Pairing check of a combined vector against the public key only."""
    suite = pk.suite
    if len(w.data) != pk.n:
        return False
    if any(not 1 <= index <= m for index in w.coeffs):
        return False
    if not suite.g1_in_group(t.t):
        return False
    indices = sorted(w.coeffs)
    hashed = [hash_to_g1(fid, index, suite) for index in indices]
    combined = suite.g1_add(
        suite.g1_msm(hashed, [w.coeffs[index] for index in indices]),
        suite.g1_msm(pk.g_list, w.data),
    )
    return suite.pairings_equal(t.t, pk.h, combined, pk.z)


def pair_verify_secret(
    block: Sequence[int],
    i: int,
    fid: bytes,
    t: SncPairTag,
    sk: SncPairSecret,
    pk: SncPairPublicKey,
) -> bool:
    """Owner-side check t == (H(fid || i) * prod g_j^{v_j})^alpha."""
    if len(block) != pk.n:
        return False
    expected = pk.suite.g1_mul(_base_point(block, i, fid, pk), sk.alpha)
    return pk.suite.g1_eq(expected, t.t)


def encode_secret(sk: SncPairSecret) -> bytes:
    return encode_blob(sk.alpha.to_bytes(32, "big"))


def decode_secret(data: bytes, offset: int = 0) -> Tuple[SncPairSecret, int]:
    raw, offset = decode_blob(data, offset)
    return SncPairSecret(alpha=int.from_bytes(raw, "big")), offset
