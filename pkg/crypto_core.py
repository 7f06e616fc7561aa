#!/usr/bin/env python3
"""
Number-theoretic and group primitives shared by both storage protocols.

Covers safe-prime RSA setup, multi-exponentiation and e-th roots over
Z_N* (gmpy2), the SHA-256 digest, the canonical INT/VEC byte encoding,
security profiles, challenge sampling, and the bilinear group contract
with a BLS12-381 implementation backed by py_ecc.
"""

from __future__ import annotations

import abc
import hashlib
import logging
import math
import random
import secrets
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import gmpy2
from py_ecc.bls.point_compression import (
    compress_G1,
    compress_G2,
    decompress_G1,
    decompress_G2,
)
from py_ecc.optimized_bls12_381 import (
    FQ,
    FQ12,
    G1,
    G2,
    Z1,
    add,
    b,
    b2,
    curve_order,
    eq,
    field_modulus,
    final_exponentiate,
    is_inf,
    is_on_curve,
    multiply,
    neg,
    pairing,
)

from errors import (
    BadCardinality,
    ConfigError,
    GenerationTimeout,
    LengthMismatch,
    MalformedMessage,
    NotInvertible,
)

# Configure module logger
logger = logging.getLogger(__name__)

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

# Odd primes used to discard candidates before the expensive test.
_SIEVE_PRIMES = (3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67,
                 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137)

_UINT_FORMATS = {1: ">B", 2: ">H", 4: ">I", 8: ">Q"}


@dataclass(frozen=True)
class SecurityProfile:
    """Parameter set for key generation and file layout."""

    name: str
    lam: int
    prime_bits: int
    e_bits: int

    @property
    def modulus_bits(self) -> int:
        return 2 * self.prime_bits

    @property
    def segment_bytes(self) -> int:
        return self.lam // 8


# Security profiles; "full" matches the published desk-top experiments.
SECURITY_PROFILES: Dict[str, SecurityProfile] = {
    "test": SecurityProfile(name="test", lam=16, prime_bits=64, e_bits=17),
    "full": SecurityProfile(name="full", lam=112, prime_bits=1024, e_bits=113),
}


def get_profile(name: str) -> SecurityProfile:
    try:
        return SECURITY_PROFILES[name]
    except KeyError as exc:
        choices = ", ".join(sorted(SECURITY_PROFILES))
        raise ConfigError(f"Unknown profile '{name}' (choose from {choices})") from exc


def default_rng() -> random.Random:
    """OS-entropy generator used whenever no seeded generator is injected."""
    return secrets.SystemRandom()


# ---------------------------------------------------------------------------
# Canonical byte encoding
# ---------------------------------------------------------------------------


def read_be_uint(data: bytes, offset: int, size: int) -> int:
    if offset < 0 or offset + size > len(data):
        raise MalformedMessage(f"Truncated field at offset {offset} (need {size} bytes)")
    return struct.unpack_from(_UINT_FORMATS[size], data, offset)[0]


def pack_be_uint(value: int, size: int) -> bytes:
    return struct.pack(_UINT_FORMATS[size], value)


def byte_width(modulus: int) -> int:
    """Bytes needed to hold any residue below ``modulus``."""
    return max(1, ((int(modulus) - 1).bit_length() + 7) // 8)


def encode_int(value: int, width: Optional[int] = None) -> bytes:
    """INT = len(4B BE) || magnitude(BE); ``width`` pins the magnitude size."""
    value = int(value)
    if value < 0:
        raise ValueError("INT encoding is defined for non-negative integers only")
    size = width if width is not None else (value.bit_length() + 7) // 8
    try:
        magnitude = value.to_bytes(size, "big")
    except OverflowError as exc:
        raise ValueError(f"{value.bit_length()}-bit value does not fit {size} bytes") from exc
    return struct.pack(">I", size) + magnitude


def decode_int(data: bytes, offset: int = 0) -> Tuple[int, int]:
    size = read_be_uint(data, offset, 4)
    start = offset + 4
    end = start + size
    if end > len(data):
        raise MalformedMessage(f"INT at offset {offset} claims {size} bytes, only {len(data) - start} left")
    return int.from_bytes(data[start:end], "big"), end


def encode_blob(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + bytes(payload)


def decode_blob(data: bytes, offset: int = 0) -> Tuple[bytes, int]:
    size = read_be_uint(data, offset, 4)
    start = offset + 4
    end = start + size
    if end > len(data):
        raise MalformedMessage(f"Blob at offset {offset} runs past the end of the buffer")
    return bytes(data[start:end]), end


def encode_int_vec(values: Sequence[int], width: Optional[int] = None) -> bytes:
    """VEC = count(4B BE) || elements."""
    parts = [struct.pack(">I", len(values))]
    parts.extend(encode_int(v, width) for v in values)
    return b"".join(parts)


def decode_int_vec(data: bytes, offset: int = 0) -> Tuple[List[int], int]:
    count = read_be_uint(data, offset, 4)
    offset += 4
    values: List[int] = []
    for _ in range(count):
        value, offset = decode_int(data, offset)
        values.append(value)
    return values, offset


def encode_blob_vec(items: Sequence[bytes]) -> bytes:
    return struct.pack(">I", len(items)) + b"".join(encode_blob(item) for item in items)


def decode_blob_vec(data: bytes, offset: int = 0) -> Tuple[List[bytes], int]:
    count = read_be_uint(data, offset, 4)
    offset += 4
    items: List[bytes] = []
    for _ in range(count):
        item, offset = decode_blob(data, offset)
        items.append(item)
    return items, offset


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# RSA setup
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RsaModulus:
    N: int

    @property
    def bit_length(self) -> int:
        return int(self.N).bit_length()


@dataclass
class RsaTrapdoor:
    """Factorization of N with a cache of inverted public exponents."""

    p: int
    q: int
    d_cache: Dict[int, int] = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def N(self) -> int:
        return self.p * self.q

    @property
    def phi(self) -> int:
        return (self.p - 1) * (self.q - 1)

    def inverse(self, e: int) -> int:
        """Return e^-1 mod phi(N), caching the result."""
        with self._lock:
            cached = self.d_cache.get(e)
            if cached is not None:
                return cached
            if math.gcd(e, self.phi) != 1:
                raise NotInvertible(f"e={e} is not coprime to phi(N)")
            d = int(gmpy2.invert(e, self.phi))
            self.d_cache[e] = d
            return d


def _passes_sieve(candidate: int) -> bool:
    for small in _SIEVE_PRIMES:
        if candidate == small:
            return True
        if candidate % small == 0:
            return False
    return True


def gen_prime(bits: int, rng: Optional[random.Random] = None) -> int:
    """Random prime with exactly ``bits`` bits."""
    if bits < 2:
        raise ValueError("bits must be >= 2")
    rng = rng or default_rng()
    low = 1 << (bits - 1)
    while True:
        candidate = rng.randrange(low, low << 1) | 1
        if candidate.bit_length() != bits:
            continue
        if _passes_sieve(candidate) and gmpy2.is_prime(candidate, 40):
            return candidate


def gen_safe_prime(
    bits: int,
    rng: Optional[random.Random] = None,
    max_attempts: Optional[int] = None,
) -> int:
    """
    Random safe prime r = 2r' + 1 with exactly ``bits`` bits.

    Candidates r' are odd (bits-1)-bit integers, so the even prime 2 is never
    used as r'. ``max_attempts`` caps the number of candidates tried.
    """
    if bits < 3:
        raise ValueError("bits must be >= 3")
    rng = rng or default_rng()
    low = 1 << (bits - 2)
    attempts = 0
    while max_attempts is None or attempts < max_attempts:
        attempts += 1
        half = rng.randrange(low, low << 1) | 1
        candidate = 2 * half + 1
        if candidate.bit_length() != bits:
            continue
        if not (_passes_sieve(half) and _passes_sieve(candidate)):
            continue
        if gmpy2.is_prime(half, 40) and gmpy2.is_prime(candidate, 40):
            logger.debug(f"Safe prime of {bits} bits found after {attempts} candidates")
            return candidate
    raise GenerationTimeout(f"No {bits}-bit safe prime within {max_attempts} attempts")


def generate_rsa(
    profile: SecurityProfile,
    rng: Optional[random.Random] = None,
    max_attempts: Optional[int] = None,
) -> Tuple[RsaModulus, RsaTrapdoor]:
    """Two distinct safe primes whose product has the profile's modulus size."""
    rng = rng or default_rng()
    p = gen_safe_prime(profile.prime_bits, rng, max_attempts)
    while True:
        q = gen_safe_prime(profile.prime_bits, rng, max_attempts)
        if q != p and (p * q).bit_length() >= profile.modulus_bits:
            break
    trapdoor = RsaTrapdoor(p=p, q=q)
    logger.info(f"Generated {trapdoor.N.bit_length()}-bit RSA modulus ({profile.name} profile)")
    return RsaModulus(N=p * q), trapdoor


def sample_public_prime(
    trapdoor: RsaTrapdoor,
    bits: int,
    rng: Optional[random.Random] = None,
) -> int:
    """Random ``bits``-bit prime e with gcd(e, phi(N)) = 1."""
    rng = rng or default_rng()
    while True:
        e = gen_prime(bits, rng)
        if math.gcd(e, trapdoor.phi) == 1:
            return e
        logger.debug("Resampling e: shares a factor with phi(N)")


def random_unit(N: int, rng: Optional[random.Random] = None) -> int:
    """Uniform element of Z_N*."""
    rng = rng or default_rng()
    while True:
        candidate = rng.randrange(2, N - 1)
        if math.gcd(candidate, N) == 1:
            return candidate


def multi_exp(bases: Sequence[int], exps: Sequence[int], N: int) -> int:
    """Product of bases[i] ** exps[i] modulo N."""
    if len(bases) != len(exps):
        raise LengthMismatch(f"{len(bases)} bases but {len(exps)} exponents")
    modulus = gmpy2.mpz(N)
    acc = gmpy2.mpz(1)
    for base, exponent in zip(bases, exps):
        if exponent == 0:
            continue
        acc = acc * gmpy2.powmod(base, exponent, modulus) % modulus
    return int(acc % modulus)


def eth_root(a: int, e: int, trapdoor: RsaTrapdoor) -> int:
    """x with x^e = a (mod N), via the cached inverse exponent."""
    d = trapdoor.inverse(e)
    return int(gmpy2.powmod(a, d, trapdoor.N))


def mod_inverse(value: int, modulus: int) -> Optional[int]:
    """Inverse of ``value`` mod ``modulus`` or None when not coprime."""
    try:
        return int(gmpy2.invert(value, modulus))
    except ZeroDivisionError:
        return None


# ---------------------------------------------------------------------------
# Challenges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Challenge:
    """Verifier's (index, coefficient) pairs, indices 1-based and distinct."""

    pairs: Tuple[Tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.pairs)

    @property
    def indices(self) -> List[int]:
        return [index for index, _ in self.pairs]

    def coefficient_map(self) -> Dict[int, int]:
        return dict(self.pairs)

    def to_bytes(self) -> bytes:
        parts = [struct.pack(">I", len(self.pairs))]
        for index, coeff in self.pairs:
            parts.append(encode_int(index))
            parts.append(encode_int(coeff))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["Challenge", int]:
        count = read_be_uint(data, offset, 4)
        offset += 4
        pairs = []
        for _ in range(count):
            index, offset = decode_int(data, offset)
            coeff, offset = decode_int(data, offset)
            pairs.append((index, coeff))
        if len({index for index, _ in pairs}) != len(pairs):
            raise MalformedMessage("Challenge repeats an index")
        return cls(pairs=tuple(pairs)), offset


def draw_challenge(
    m: int,
    l: int,
    modulus: int,
    rng: Optional[random.Random] = None,
) -> Challenge:
    """Random l-subset of [1, m] with coefficients drawn from [1, modulus)."""
    if not 1 <= l <= m:
        raise BadCardinality(f"Challenge size {l} outside [1, {m}]")
    rng = rng or default_rng()
    indices = sorted(rng.sample(range(1, m + 1), l))
    return Challenge(pairs=tuple((i, rng.randrange(1, modulus)) for i in indices))


# ---------------------------------------------------------------------------
# Bilinear groups
# ---------------------------------------------------------------------------

G1Point = Tuple[Any, Any, Any]
G2Point = Tuple[Any, Any, Any]


class BilinearSuite(abc.ABC):
    """Prime-order groups G1, G2, GT with a pairing and a hash into G1."""

    curve_id: str
    hash_method: str
    g1_bytes: int
    g2_bytes: int

    @property
    @abc.abstractmethod
    def order(self) -> int:
        """Prime order shared by G1, G2 and GT."""

    @abc.abstractmethod
    def g1_generator(self) -> G1Point: ...

    @abc.abstractmethod
    def g2_generator(self) -> G2Point: ...

    @abc.abstractmethod
    def g1_identity(self) -> G1Point: ...

    @abc.abstractmethod
    def g1_add(self, left: G1Point, right: G1Point) -> G1Point: ...

    @abc.abstractmethod
    def g1_mul(self, point: G1Point, scalar: int) -> G1Point: ...

    @abc.abstractmethod
    def g1_eq(self, left: G1Point, right: G1Point) -> bool: ...

    @abc.abstractmethod
    def g1_in_group(self, point: G1Point) -> bool: ...

    @abc.abstractmethod
    def g2_mul(self, point: G2Point, scalar: int) -> G2Point: ...

    @abc.abstractmethod
    def g2_eq(self, left: G2Point, right: G2Point) -> bool: ...

    @abc.abstractmethod
    def pair(self, p: G1Point, q: G2Point) -> Any: ...

    @abc.abstractmethod
    def pairings_equal(self, p1: G1Point, q1: G2Point, p2: G1Point, q2: G2Point) -> bool:
        """e(p1, q1) == e(p2, q2)."""

    @abc.abstractmethod
    def hash_to_g1(self, fid: bytes, index: int) -> G1Point: ...

    @abc.abstractmethod
    def encode_g1(self, point: G1Point) -> bytes: ...

    @abc.abstractmethod
    def decode_g1(self, data: bytes) -> G1Point: ...

    @abc.abstractmethod
    def encode_g2(self, point: G2Point) -> bytes: ...

    @abc.abstractmethod
    def decode_g2(self, data: bytes) -> G2Point: ...

    def g1_msm(self, points: Sequence[G1Point], scalars: Sequence[int]) -> G1Point:
        """Product of points[i] ** scalars[i] (additive notation: sum)."""
        if len(points) != len(scalars):
            raise LengthMismatch(f"{len(points)} points but {len(scalars)} scalars")
        acc = self.g1_identity()
        for point, scalar in zip(points, scalars):
            scalar %= self.order
            if scalar:
                acc = self.g1_add(acc, self.g1_mul(point, scalar))
        return acc

    def random_scalar(self, rng: Optional[random.Random] = None, nonzero: bool = True) -> int:
        rng = rng or default_rng()
        return rng.randrange(1 if nonzero else 0, self.order)

    def descriptor(self) -> bytes:
        """Curve id and hash-to-group method id, as stored in key files."""
        return encode_blob(self.curve_id.encode("ascii")) + encode_blob(self.hash_method.encode("ascii"))


class Bls12381Suite(BilinearSuite):
    """Type-3 pairing on BLS12-381 using py_ecc's optimized arithmetic."""

    curve_id = "BLS12-381"
    hash_method = "sha256-try-and-increment-bls12381g1"
    g1_bytes = 48
    g2_bytes = 96

    # Effective cofactor that maps E(Fp) points into the prime-order subgroup.
    H_EFF = 0xD201000000010001
    _DOMAIN = b"DSCS-H2G1-V1"

    @property
    def order(self) -> int:
        return curve_order

    def g1_generator(self) -> G1Point:
        return G1

    def g2_generator(self) -> G2Point:
        return G2

    def g1_identity(self) -> G1Point:
        return Z1

    def g1_add(self, left: G1Point, right: G1Point) -> G1Point:
        return add(left, right)

    def g1_mul(self, point: G1Point, scalar: int) -> G1Point:
        return multiply(point, scalar % curve_order)

    def g1_eq(self, left: G1Point, right: G1Point) -> bool:
        return eq(left, right)

    def g1_in_group(self, point: G1Point) -> bool:
        if is_inf(point):
            return True
        return is_on_curve(point, b) and is_inf(multiply(point, curve_order))

    def g2_mul(self, point: G2Point, scalar: int) -> G2Point:
        return multiply(point, scalar % curve_order)

    def g2_eq(self, left: G2Point, right: G2Point) -> bool:
        return eq(left, right)

    def pair(self, p: G1Point, q: G2Point) -> FQ12:
        return pairing(q, p)

    def pairings_equal(self, p1: G1Point, q1: G2Point, p2: G1Point, q2: G2Point) -> bool:
        # One final exponentiation over the product of two Miller loops.
        product = pairing(q1, p1, final_exponentiate=False) * pairing(q2, neg(p2), final_exponentiate=False)
        return final_exponentiate(product) == FQ12.one()

    def hash_to_g1(self, fid: bytes, index: int) -> G1Point:
        if index < 1:
            raise ValueError("hash_to_g1 index must be >= 1")
        prefix = self._DOMAIN + encode_blob(fid) + struct.pack(">Q", index)
        counter = 0
        while True:
            seed = digest(prefix + struct.pack(">I", counter))
            x = int.from_bytes(seed + digest(seed), "big") % field_modulus
            rhs = (x * x * x + 4) % field_modulus
            y = pow(rhs, (field_modulus + 1) // 4, field_modulus)
            if y * y % field_modulus == rhs:
                if (y & 1) != (seed[0] & 1):
                    y = field_modulus - y
                point = multiply((FQ(x), FQ(y), FQ.one()), self.H_EFF)
                if not is_inf(point):
                    return point
            counter += 1

    def encode_g1(self, point: G1Point) -> bytes:
        return int(compress_G1(point)).to_bytes(self.g1_bytes, "big")

    def decode_g1(self, data: bytes) -> G1Point:
        if len(data) != self.g1_bytes:
            raise MalformedMessage(f"G1 encoding must be {self.g1_bytes} bytes, got {len(data)}")
        try:
            return decompress_G1(int.from_bytes(data, "big"))
        except (ValueError, AssertionError) as exc:
            raise MalformedMessage(f"Invalid G1 point: {exc}") from exc

    def encode_g2(self, point: G2Point) -> bytes:
        z1, z2 = compress_G2(point)
        return int(z1).to_bytes(48, "big") + int(z2).to_bytes(48, "big")

    def decode_g2(self, data: bytes) -> G2Point:
        if len(data) != self.g2_bytes:
            raise MalformedMessage(f"G2 encoding must be {self.g2_bytes} bytes, got {len(data)}")
        try:
            return decompress_G2((int.from_bytes(data[:48], "big"), int.from_bytes(data[48:], "big")))
        except (ValueError, AssertionError) as exc:
            raise MalformedMessage(f"Invalid G2 point: {exc}") from exc

    def g2_on_curve(self, point: G2Point) -> bool:
        return is_on_curve(point, b2)


SUITES: Dict[str, BilinearSuite] = {Bls12381Suite.curve_id: Bls12381Suite()}


def suite_from_descriptor(data: bytes, offset: int = 0) -> Tuple[BilinearSuite, int]:
    curve, offset = decode_blob(data, offset)
    method, offset = decode_blob(data, offset)
    suite = SUITES.get(curve.decode("ascii", errors="replace"))
    if suite is None or suite.hash_method != method.decode("ascii", errors="replace"):
        raise MalformedMessage(f"Unsupported bilinear suite {curve!r}/{method!r}")
    return suite, offset


def hash_to_g1(fid: bytes, index: int, suite: BilinearSuite) -> G1Point:
    """H(fid || index) as a G1 element of ``suite``."""
    return suite.hash_to_g1(fid, index)


# ---------------------------------------------------------------------------
# File layout
# ---------------------------------------------------------------------------

Block = Tuple[int, ...]


@dataclass(frozen=True)
class FileLayout:
    """
    Splits a file into blocks of ``n`` segments of ``segment_bytes`` each.

    The file is prefixed with its 8-byte length so that zero padding of the
    last block can be stripped on the way back.
    """

    segment_bytes: int
    n: int

    @property
    def block_bytes(self) -> int:
        return self.segment_bytes * self.n

    def block_count(self, length: int) -> int:
        return max(1, -(-(length + 8) // self.block_bytes))

    def block_from_bytes(self, raw: bytes) -> Block:
        if len(raw) > self.block_bytes:
            raise ValueError(f"{len(raw)} bytes exceed the {self.block_bytes}-byte block size")
        raw = bytes(raw).ljust(self.block_bytes, b"\x00")
        size = self.segment_bytes
        return tuple(int.from_bytes(raw[k:k + size], "big") for k in range(0, len(raw), size))

    def block_to_bytes(self, block: Sequence[int]) -> bytes:
        if len(block) != self.n:
            raise LengthMismatch(f"Block has {len(block)} segments, layout expects {self.n}")
        return b"".join(int(v).to_bytes(self.segment_bytes, "big") for v in block)

    def split(self, data: bytes) -> List[Block]:
        framed = struct.pack(">Q", len(data)) + bytes(data)
        step = self.block_bytes
        return [self.block_from_bytes(framed[k:k + step]) for k in range(0, self.block_count(len(data)) * step, step)]

    def join(self, blocks: Iterable[Sequence[int]]) -> bytes:
        framed = b"".join(self.block_to_bytes(block) for block in blocks)
        if len(framed) < 8:
            raise MalformedMessage("Blocks too short to hold the length header")
        length = read_be_uint(framed, 0, 8)
        if length > len(framed) - 8:
            raise MalformedMessage(f"Length header {length} exceeds the stored data")
        return framed[8:8 + length]
