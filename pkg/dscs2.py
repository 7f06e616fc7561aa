#!/usr/bin/env python3
"""
DSCS II: append-only secure cloud storage with pairing-based tags.

Keys and audit proofs have constant size. There is no freshness structure:
tags embed the block index through H(fid || i), so the only write the
protocol allows is an append at position m + 1, and the client simply
tracks m.
"""

from __future__ import annotations

import logging
import random
import struct
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from auth_skiplist import UpdateType
from crypto_core import (
    SUITES,
    BilinearSuite,
    Block,
    Challenge,
    FileLayout,
    SecurityProfile,
    decode_blob,
    decode_int_vec,
    default_rng,
    draw_challenge,
    encode_blob,
    encode_int_vec,
    get_profile,
    read_be_uint,
)
from errors import AppendOnly, IndexOutOfRange, MalformedMessage
from snc_pairing import (
    SncPairPublicKey,
    SncPairSecret,
    SncPairTag,
    decode_secret,
    encode_secret,
    pair_combine,
    pair_keygen,
    pair_tag_gen,
    pair_verify,
    pair_verify_secret,
)
from snc_rsa import AugmentedVector

# Configure module logger
logger = logging.getLogger(__name__)

STATE_VERSION = 1
SCALAR_BYTES = 32


@dataclass
class ClientStateII:
    profile: SecurityProfile
    sk: SncPairSecret
    pk: SncPairPublicKey
    fid: bytes
    m: int = 0

    @property
    def layout(self) -> FileLayout:
        return FileLayout(segment_bytes=self.profile.segment_bytes, n=self.pk.n)

    def to_bytes(self) -> bytes:
        return b"".join([
            struct.pack(">I", STATE_VERSION),
            encode_blob(self.profile.name.encode("ascii")),
            encode_secret(self.sk),
            encode_blob(self.pk.to_bytes()),
            encode_blob(self.fid),
            struct.pack(">Q", self.m),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClientStateII":
        version = read_be_uint(data, 0, 4)
        if version != STATE_VERSION:
            raise MalformedMessage(f"Unsupported DSCS II key file version {version}")
        name, offset = decode_blob(data, 4)
        sk, offset = decode_secret(data, offset)
        pk_bytes, offset = decode_blob(data, offset)
        fid, offset = decode_blob(data, offset)
        m = read_be_uint(data, offset, 8)
        pk, _ = SncPairPublicKey.from_bytes(pk_bytes)
        return cls(profile=get_profile(name.decode("ascii")), sk=sk, pk=pk, fid=fid, m=m)


@dataclass
class UploadBundleII:
    fid: bytes
    pk: SncPairPublicKey
    blocks: List[Block]
    tags: List[bytes]


@dataclass
class AppendMessage:
    block: Block
    tag: bytes


@dataclass
class StorageProofII:
    """T = (y, t)."""

    y: Tuple[int, ...]
    t: SncPairTag

    def to_bytes(self, suite: BilinearSuite) -> bytes:
        return encode_int_vec(self.y, SCALAR_BYTES) + self.t.to_bytes(suite)

    @classmethod
    def from_bytes(cls, data: bytes, suite: BilinearSuite, offset: int = 0) -> Tuple["StorageProofII", int]:
        y, offset = decode_int_vec(data, offset)
        t, offset = SncPairTag.from_bytes(data, suite, offset)
        return cls(y=tuple(y), t=t), offset


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


def keygen2(
    profile: SecurityProfile,
    m: int,
    n: int,
    rng: Optional[random.Random] = None,
    suite: Optional[BilinearSuite] = None,
) -> ClientStateII:
    if n < 1 or m < 0:
        raise ValueError(f"keygen2 needs n >= 1 and m >= 0 (got m={m}, n={n})")
    rng = rng or default_rng()
    suite = suite or SUITES["BLS12-381"]
    sk, pk = pair_keygen(n, suite, rng)
    fid = rng.getrandbits(profile.lam).to_bytes(profile.lam // 8, "big")
    logger.info(f"DSCS II keys ready on {suite.curve_id}, n={n}")
    return ClientStateII(profile=profile, sk=sk, pk=pk, fid=fid, m=m)


def outsource2(
    file_bytes: bytes,
    state: ClientStateII,
    executor: Optional[Executor] = None,
) -> UploadBundleII:
    blocks = state.layout.split(file_bytes)
    suite = state.pk.suite

    def make_tag(index: int) -> bytes:
        return pair_tag_gen(blocks[index - 1], index, state.fid, state.sk, state.pk).to_bytes(suite)

    indices = range(1, len(blocks) + 1)
    tags = list(executor.map(make_tag, indices)) if executor else [make_tag(i) for i in indices]
    state.m = len(blocks)
    logger.info(f"Outsourced {len(file_bytes)} bytes as {len(blocks)} blocks")
    return UploadBundleII(fid=state.fid, pk=state.pk, blocks=blocks, tags=tags)


def append(block: Sequence[int], state: ClientStateII) -> AppendMessage:
    """Tag ``block`` for position m + 1. ``state`` is left untouched until :func:`commit_append`."""
    block = tuple(block)
    index = state.m + 1
    tag = pair_tag_gen(block, index, state.fid, state.sk, state.pk)
    return AppendMessage(block=block, tag=tag.to_bytes(state.pk.suite))


def commit_append(state: ClientStateII, acknowledged_m: int) -> bool:
    """Adopt the server's new block count if it is exactly one past ours."""
    if acknowledged_m != state.m + 1:
        logger.warning(f"Server reports m={acknowledged_m} after append, expected {state.m + 1}")
        return False
    state.m = acknowledged_m
    return True


def init_update2(
    state: ClientStateII,
    i: int,
    updtype: UpdateType,
    block: Optional[Sequence[int]] = None,
) -> AppendMessage:
    """Only an insert after the last block is allowed; it becomes an append."""
    if UpdateType(updtype) is UpdateType.INSERT and i == state.m and block is not None:
        return append(block, state)
    raise AppendOnly(f"{UpdateType(updtype).name.lower()} at {i} rejected: file is append-only")


def verify_read2(i: int, block: Sequence[int], tag: bytes, pk: SncPairPublicKey, fid: bytes, m: int) -> bool:
    """Public form: e(t_i, h) == e(H(fid || i) * prod g_j^{v_j}, z)."""
    if not 1 <= i <= m:
        return False
    try:
        parsed = SncPairTag.parse(tag, pk.suite)
    except MalformedMessage:
        return False
    return pair_verify(AugmentedVector.unit(block, i), parsed, fid, pk, m)


def verify_read2_secret(i: int, block: Sequence[int], tag: bytes, state: ClientStateII) -> bool:
    """Owner form, recomputing the tag with alpha."""
    if not 1 <= i <= state.m:
        return False
    try:
        parsed = SncPairTag.parse(tag, state.pk.suite)
    except MalformedMessage:
        return False
    return pair_verify_secret(block, i, state.fid, parsed, state.sk, state.pk)


def decode_file(blocks: Sequence[Block], state: ClientStateII) -> bytes:
    """Original file bytes from its blocks (length header stripped)."""
    return state.layout.join(blocks)


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

BlockReaderII = Callable[[int], Tuple[Block, bytes]]


@dataclass
class ServerFileII:
    pk: SncPairPublicKey
    fid: bytes
    blocks: List[Block]
    tags: List[bytes]

    @classmethod
    def from_bundle(cls, bundle: UploadBundleII) -> "ServerFileII":
        return cls(pk=bundle.pk, fid=bundle.fid, blocks=list(bundle.blocks), tags=list(bundle.tags))

    @property
    def m(self) -> int:
        return len(self.blocks)

    def _check_index(self, i: int) -> None:
        if not 1 <= i <= self.m:
            raise IndexOutOfRange(f"Index {i} outside [1, {self.m}]")

    def auth_read2(self, i: int) -> Tuple[Block, bytes]:
        self._check_index(i)
        return self.blocks[i - 1], self.tags[i - 1]

    def check_append(self, message: AppendMessage) -> None:
        if len(message.block) != self.pk.n:
            raise MalformedMessage(f"Block has {len(message.block)} segments, file uses {self.pk.n}")

    def perform_append(self, message: AppendMessage) -> int:
        self.check_append(message)
        self.blocks.append(tuple(message.block))
        self.tags.append(message.tag)
        return self.m

    def prove2(self, chal: Challenge, reader: Optional[BlockReaderII] = None) -> StorageProofII:
        suite = self.pk.suite
        reader = reader or self.auth_read2
        items = []
        for i, nu in chal.pairs:
            self._check_index(i)
            block, tag = reader(i)
            items.append((AugmentedVector.unit(block, i), SncPairTag.parse(tag, suite), nu))
        w, t = pair_combine(items, self.pk)
        return StorageProofII(y=w.data, t=t)

    def clone(self) -> "ServerFileII":
        return ServerFileII(pk=self.pk, fid=self.fid, blocks=list(self.blocks), tags=list(self.tags))

    def storage_overhead(self, segment_bytes: int) -> Dict[str, int]:
        return {
            "file_bytes": self.m * self.pk.n * segment_bytes,
            "skiplist_bytes": 0,
            "tag_bytes": sum(len(tag) for tag in self.tags),
            "h_list_bytes": 0,
        }


def storage_overhead(server_file: ServerFileII, segment_bytes: int) -> float:
    """Tag bytes as a percentage of the raw file bytes."""
    sizes = server_file.storage_overhead(segment_bytes)
    return 100.0 * sizes["tag_bytes"] / sizes["file_bytes"] if sizes["file_bytes"] else 0.0


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------


def challenge2(m: int, l: int, pk: SncPairPublicKey, rng: Optional[random.Random] = None) -> Challenge:
    return draw_challenge(m, l, pk.suite.order, rng)


def verify_audit2(chal: Challenge, proof: StorageProofII, pk: SncPairPublicKey, fid: bytes, m: int) -> bool:
    """Rebuild w with nu_i at the challenged slots and run the pairing check."""
    order = pk.suite.order
    if any(not 1 <= i <= m for i in chal.indices):
        return False
    if any(not 0 <= v < order for v in proof.y):
        return False
    w = AugmentedVector(data=tuple(proof.y), coeffs={i: nu % order for i, nu in chal.pairs if nu % order})
    return pair_verify(w, proof.t, fid, pk, m)
