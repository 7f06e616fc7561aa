#!/usr/bin/env python3
"""
DSCS I: dynamic secure cloud storage with RSA network-coding tags.

Three roles live here:

* the client (:class:`ClientStateI`, :func:`keygen`, :func:`outsource`,
  :func:`init_update`, :func:`verify_update`, :func:`verify_read`),
* the server (:class:`ServerFileI` with ``auth_read``, ``perform_update``
  and ``prove``),
* the public verifier (:func:`challenge`, :func:`verify_audit`), which only
  needs the public key.

Freshness comes from the authenticated skip list built over the serialized
tags; the tags themselves bind each block to its position through h_i.
:func:`extract_blocks` recovers blocks from accepted audit responses.
"""

from __future__ import annotations

import logging
import random
import struct
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from sympy import Matrix

from auth_skiplist import (
    Metadata,
    SkipList,
    SkipListProof,
    UpdateType,
    list_init,
    list_init_update,
    list_verify_read,
    list_verify_update,
)
from crypto_core import (
    Block,
    Challenge,
    FileLayout,
    RsaTrapdoor,
    SecurityProfile,
    decode_blob,
    decode_int,
    decode_int_vec,
    default_rng,
    draw_challenge,
    encode_blob,
    encode_int,
    encode_int_vec,
    generate_rsa,
    get_profile,
    random_unit,
    read_be_uint,
    sample_public_prime,
)
from errors import (
    ExtractionStalled,
    IndexOutOfRange,
    MalformedMessage,
    UpdatesDisabled,
)
from snc_rsa import (
    AugmentedVector,
    SncRsaPublicKey,
    SncRsaTag,
    check_tag,
    combine,
    tag_gen,
    verify_combined,
)

# Configure module logger
logger = logging.getLogger(__name__)

STATE_VERSION = 1

ChallengeI = Challenge


@dataclass
class UpdateMessageI:
    """Client -> server update: index, type, and the new (h', v', t') as needed."""

    index: int
    updtype: UpdateType
    h: Optional[int] = None
    block: Optional[Block] = None
    tag: Optional[bytes] = None


@dataclass
class PendingUpdateI:
    message: UpdateMessageI
    expected: Metadata
    anchor_tag: bytes


@dataclass
class ClientStateI:
    profile: SecurityProfile
    trapdoor: RsaTrapdoor
    pk: SncRsaPublicKey
    static: bool = False
    pending: Optional[PendingUpdateI] = None

    @property
    def fid(self) -> bytes:
        return fid_for(self.pk)

    @property
    def layout(self) -> FileLayout:
        return FileLayout(segment_bytes=self.profile.segment_bytes, n=self.pk.n)

    @property
    def pending_metadata(self) -> Optional[Metadata]:
        return self.pending.expected if self.pending else None

    def to_bytes(self) -> bytes:
        """Key file body: version, profile, p, q, public key, static flag."""
        return b"".join([
            struct.pack(">I", STATE_VERSION),
            encode_blob(self.profile.name.encode("ascii")),
            encode_int(self.trapdoor.p),
            encode_int(self.trapdoor.q),
            encode_blob(self.pk.to_bytes()),
            b"\x01" if self.static else b"\x00",
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClientStateI":
        version = read_be_uint(data, 0, 4)
        if version != STATE_VERSION:
            raise MalformedMessage(f"Unsupported DSCS I key file version {version}")
        name, offset = decode_blob(data, 4)
        p, offset = decode_int(data, offset)
        q, offset = decode_int(data, offset)
        pk_bytes, offset = decode_blob(data, offset)
        static = bool(read_be_uint(data, offset, 1))
        pk, _ = SncRsaPublicKey.from_bytes(pk_bytes)
        return cls(
            profile=get_profile(name.decode("ascii")),
            trapdoor=RsaTrapdoor(p=p, q=q),
            pk=pk,
            static=static,
        )


@dataclass
class UploadBundleI:
    fid: bytes
    pk: SncRsaPublicKey
    blocks: List[Block]
    tags: List[bytes]
    skiplist: SkipList


@dataclass
class StorageProofI:
    """T1 = (y, t) and T2 = per-index (tag, skip-list proof)."""

    y: Tuple[int, ...]
    t: SncRsaTag
    entries: Tuple[Tuple[bytes, SkipListProof], ...]

    def to_bytes(self, pk: SncRsaPublicKey) -> bytes:
        parts = [
            encode_int_vec(self.y, pk.field_width),
            encode_int(self.t.s, pk.field_width),
            encode_int(self.t.x, pk.residue_width),
            struct.pack(">I", len(self.entries)),
        ]
        for tag, proof in self.entries:
            parts.append(encode_blob(tag))
            parts.append(proof.to_bytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["StorageProofI", int]:
        y, offset = decode_int_vec(data, offset)
        s, offset = decode_int(data, offset)
        x, offset = decode_int(data, offset)
        count = read_be_uint(data, offset, 4)
        offset += 4
        entries = []
        for _ in range(count):
            tag, offset = decode_blob(data, offset)
            proof, offset = SkipListProof.from_bytes(data, offset)
            entries.append((tag, proof))
        return cls(y=tuple(y), t=SncRsaTag(s=s, x=x), entries=tuple(entries)), offset


def fid_for(pk: SncRsaPublicKey) -> bytes:
    """The file identifier is the public prime e."""
    return pk.e.to_bytes((pk.e.bit_length() + 7) // 8, "big")


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


def keygen(
    profile: SecurityProfile,
    m: int,
    n: int,
    rng: Optional[random.Random] = None,
    max_attempts: Optional[int] = None,
) -> ClientStateI:
    if m < 1 or n < 1:
        raise ValueError(f"keygen needs m >= 1 and n >= 1 (got m={m}, n={n})")
    rng = rng or default_rng()
    modulus, trapdoor = generate_rsa(profile, rng, max_attempts)
    N = modulus.N
    e = sample_public_prime(trapdoor, profile.e_bits, rng)
    pk = SncRsaPublicKey(
        N=N,
        e=e,
        g=random_unit(N, rng),
        g_list=tuple(random_unit(N, rng) for _ in range(n)),
        h_list=[random_unit(N, rng) for _ in range(m)],
    )
    logger.info(f"DSCS I keys ready: {N.bit_length()}-bit N, {e.bit_length()}-bit e, m={m}, n={n}")
    return ClientStateI(profile=profile, trapdoor=trapdoor, pk=pk)


def outsource(
    file_bytes: bytes,
    state: ClientStateI,
    rng: Optional[random.Random] = None,
    executor: Optional[Executor] = None,
) -> UploadBundleI:
    """Tag every block, build the skip list and set d_M in the public key."""
    rng = rng or default_rng()
    pk = state.pk
    blocks = state.layout.split(file_bytes)
    m = len(blocks)
    if m > pk.m:
        pk.h_list.extend(random_unit(pk.N, rng) for _ in range(m - pk.m))
    elif m < pk.m:
        del pk.h_list[m:]

    seeds = [rng.randrange(pk.e) for _ in range(m)]

    def make_tag(index: int) -> bytes:
        tag = tag_gen(blocks[index - 1], index, state.trapdoor, pk, s=seeds[index - 1])
        return tag.to_bytes(pk)

    indices = range(1, m + 1)
    tags = list(executor.map(make_tag, indices)) if executor else [make_tag(i) for i in indices]
    skiplist, metadata = list_init(tags)
    pk.metadata = metadata
    logger.info(f"Outsourced {len(file_bytes)} bytes as {m} blocks")
    return UploadBundleI(fid=state.fid, pk=pk.copy(), blocks=blocks, tags=tags, skiplist=skiplist)


def verify_read(i: int, block: Sequence[int], tag: bytes, proof: SkipListProof, pk: SncRsaPublicKey) -> bool:
    """Skip-list proof against d_M, then the tag equation for block i."""
    if pk.metadata is None or not 1 <= i <= pk.m:
        return False
    if not list_verify_read(i, pk.metadata, tag, proof):
        return False
    try:
        parsed = SncRsaTag.parse(tag)
    except MalformedMessage:
        return False
    return check_tag(block, parsed, pk.h(i), pk)


FetchTag = Callable[[int], Tuple[bytes, SkipListProof]]
BlockReader = Callable[[int], Tuple[Block, bytes, SkipListProof]]


def decode_file(blocks: Sequence[Block], state: ClientStateI) -> bytes:
    """Original file bytes from its blocks (length header stripped)."""
    return state.layout.join(blocks)


def init_update(
    state: ClientStateI,
    i: int,
    updtype: UpdateType,
    fetch: FetchTag,
    new_block: Optional[Sequence[int]] = None,
    rng: Optional[random.Random] = None,
) -> UpdateMessageI:
    """
    Build the update message and remember the predicted metadata.

    ``fetch(j)`` asks the server for the (tag, proof) of position j;
    position 0 is the sentinel head.
    """
    if state.static:
        raise UpdatesDisabled("This file was outsourced in static mode")
    if state.pending is not None:
        raise RuntimeError("Another update is still awaiting verification")
    pk = state.pk
    if pk.metadata is None:
        raise RuntimeError("File has not been outsourced yet")
    updtype = UpdateType(updtype)
    rng = rng or default_rng()
    m = pk.m
    if updtype is UpdateType.INSERT:
        if not 0 <= i <= m:
            raise IndexOutOfRange(f"Insert position {i} outside [0, {m}]")
    elif not 1 <= i <= m:
        raise IndexOutOfRange(f"Index {i} outside [1, {m}]")

    message = UpdateMessageI(index=i, updtype=updtype)
    if updtype is not UpdateType.DELETE:
        if new_block is None:
            raise ValueError(f"{updtype.name.lower()} needs a new block")
        block = tuple(new_block)
        if updtype is UpdateType.INSERT:
            h = random_unit(pk.N, rng)
            message.h = h
        else:
            h = pk.h(i)
        tag = tag_gen(block, i + 1 if updtype is UpdateType.INSERT else i, state.trapdoor, pk, rng=rng, h=h)
        message.block = block
        message.tag = tag.to_bytes(pk)

    expected, request = list_init_update(i, updtype, pk.metadata, message.tag, fetch)
    state.pending = PendingUpdateI(message=message, expected=expected, anchor_tag=request.anchor_tag)
    logger.debug(f"Prepared {updtype.name.lower()} at {i}; expecting m={expected.m}")
    return message


def verify_update(state: ClientStateI, proof: SkipListProof) -> bool:
    """Commit (m, d_M, h-list) if the server reached the predicted root; roll back otherwise."""
    pending = state.pending
    if pending is None:
        raise RuntimeError("No update in flight")
    state.pending = None
    message = pending.message
    ok = list_verify_update(
        message.index, message.updtype, message.tag, pending.expected, proof, pending.anchor_tag
    )
    if not ok:
        logger.warning(f"Server proof for {message.updtype.name.lower()} at {message.index} rejected")
        return False
    pk = state.pk
    if message.updtype is UpdateType.INSERT:
        pk.h_list.insert(message.index, message.h)
    elif message.updtype is UpdateType.DELETE:
        del pk.h_list[message.index - 1]
    pk.metadata = pending.expected
    return True


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


@dataclass
class ServerFileI:
    """Server copy of one file: blocks, tags, h-list (inside pk) and skip list."""

    pk: SncRsaPublicKey
    blocks: List[Block]
    tags: List[bytes]
    skiplist: SkipList

    @classmethod
    def from_bundle(cls, bundle: UploadBundleI) -> "ServerFileI":
        return cls(pk=bundle.pk.copy(), blocks=list(bundle.blocks), tags=list(bundle.tags), skiplist=bundle.skiplist)

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def segment_bytes(self) -> int:
        # e has one bit more than a segment
        return (self.pk.e.bit_length() - 1) // 8

    def _check_index(self, i: int) -> None:
        if not 1 <= i <= self.m:
            raise IndexOutOfRange(f"Index {i} outside [1, {self.m}]")

    def auth_read(self, i: int) -> Tuple[Block, bytes, SkipListProof]:
        """Block, tag and skip-list proof; i = 0 reads the sentinel head."""
        if i == 0:
            return (), b"", self.skiplist.head_proof()
        self._check_index(i)
        tag, proof = self.skiplist.auth_read(i)
        return self.blocks[i - 1], tag, proof

    def check_update(self, message: UpdateMessageI) -> None:
        """Raise unless ``message`` can be applied to the current file."""
        updtype = UpdateType(message.updtype)
        i = message.index
        if updtype is UpdateType.INSERT:
            if not 0 <= i <= self.m:
                raise IndexOutOfRange(f"Insert position {i} outside [0, {self.m}]")
            if message.h is None or message.block is None or message.tag is None:
                raise MalformedMessage("Insert needs h', block and tag")
        else:
            self._check_index(i)
            if updtype is UpdateType.MODIFY and (message.block is None or message.tag is None):
                raise MalformedMessage("Modify needs block and tag")
        if message.block is not None and len(message.block) != self.pk.n:
            raise MalformedMessage(f"Block has {len(message.block)} segments, file uses {self.pk.n}")

    def perform_update(self, message: UpdateMessageI) -> SkipListProof:
        self.check_update(message)
        updtype = UpdateType(message.updtype)
        i = message.index
        proof = self.skiplist.perform_update(i, updtype, message.tag)
        if updtype is UpdateType.INSERT:
            self.blocks.insert(i, tuple(message.block))
            self.tags.insert(i, message.tag)
            self.pk.h_list.insert(i, message.h)
        elif updtype is UpdateType.MODIFY:
            self.blocks[i - 1] = tuple(message.block)
            self.tags[i - 1] = message.tag
        else:
            del self.blocks[i - 1]
            del self.tags[i - 1]
            del self.pk.h_list[i - 1]
        return proof

    def prove(self, chal: Challenge, reader: Optional[BlockReader] = None) -> StorageProofI:
        """
        Combine the challenged blocks and tags. ``reader`` replaces
        :meth:`auth_read` as the source of (block, tag, proof) per index.
        """
        reader = reader or self.auth_read
        items = []
        entries = []
        for i, nu in chal.pairs:
            self._check_index(i)
            block, tag_bytes, list_proof = reader(i)
            try:
                tag = SncRsaTag.parse(tag_bytes)
            except MalformedMessage as exc:
                raise MalformedMessage(f"Stored tag {i} is unreadable") from exc
            items.append((AugmentedVector.unit(block, i), tag, nu))
            entries.append((tag_bytes, list_proof))
        w, t = combine(items, self.pk)
        return StorageProofI(y=w.data, t=t, entries=tuple(entries))

    def clone(self) -> "ServerFileI":
        return ServerFileI(
            pk=self.pk.copy(),
            blocks=list(self.blocks),
            tags=list(self.tags),
            skiplist=SkipList.from_bytes(self.skiplist.to_bytes()),
        )

    def storage_overhead(self) -> Dict[str, int]:
        """Bytes the server keeps beyond the raw blocks."""
        return {
            "file_bytes": self.m * self.pk.n * self.segment_bytes,
            "skiplist_bytes": len(self.skiplist.to_bytes()),
            "tag_bytes": sum(len(tag) for tag in self.tags),
            "h_list_bytes": len(self.pk.h_list) * self.pk.residue_width,
        }


def storage_overhead(server_file: ServerFileI) -> float:
    """Skip list, tags and h-list as a percentage of the raw file bytes."""
    sizes = server_file.storage_overhead()
    extra = sizes["skiplist_bytes"] + sizes["tag_bytes"] + sizes["h_list_bytes"]
    return 100.0 * extra / sizes["file_bytes"] if sizes["file_bytes"] else 0.0


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------


def challenge(pk: SncRsaPublicKey, l: int, rng: Optional[random.Random] = None) -> ChallengeI:
    """Random l-subset of [1, m] with coefficients in F_e."""
    return draw_challenge(pk.m, l, pk.e, rng)


def verify_audit(chal: ChallengeI, proof: StorageProofI, pk: SncRsaPublicKey) -> bool:
    """Freshness of every challenged tag, the s cross-check, then the combined tag equation."""
    metadata = pk.metadata
    if metadata is None or len(proof.entries) != chal.size:
        return False
    s_bar = 0
    for (i, nu), (tag_bytes, list_proof) in zip(chal.pairs, proof.entries):
        if not list_verify_read(i, metadata, tag_bytes, list_proof):
            return False
        try:
            tag = SncRsaTag.parse(tag_bytes)
        except MalformedMessage:
            return False
        s_bar += nu * tag.s
    if s_bar % pk.e != proof.t.s:
        return False
    w = AugmentedVector(data=tuple(proof.y), coeffs={i: nu % pk.e for i, nu in chal.pairs if nu % pk.e})
    return verify_combined(w, proof.t, pk)


Responder = Callable[[ChallengeI], Optional[StorageProofI]]


def extract_blocks(
    responder: Responder,
    indices: Sequence[int],
    pk: SncRsaPublicKey,
    rng: Optional[random.Random] = None,
    max_stalls: int = 32,
) -> List[Block]:
    """
    Recover the blocks at ``indices`` from accepted audit responses.

    Collects |indices| responses whose coefficient rows form an invertible
    matrix over F_e and solves for the blocks by Gaussian elimination.
    """
    if not indices:
        raise ValueError("Nothing to extract")
    rng = rng or default_rng()
    e = pk.e
    targets = sorted(indices)
    rows: List[List[int]] = []
    values: List[List[int]] = []
    stalls = 0

    def stall(reason: str) -> None:
        nonlocal stalls
        stalls += 1
        logger.debug(f"Extractor stall {stalls}: {reason}")
        if stalls > max_stalls:
            raise ExtractionStalled(f"Gave up after {stalls} unusable responses")

    while True:
        while len(rows) < len(targets):
            chal = Challenge(pairs=tuple((i, rng.randrange(1, e)) for i in targets))
            proof = responder(chal)
            if proof is None or not verify_audit(chal, proof, pk):
                stall("response rejected")
                continue
            rows.append([nu for _, nu in chal.pairs])
            values.append(list(proof.y))
        try:
            inverse = Matrix(rows).inv_mod(e)
        except ValueError:
            rows.pop()
            values.pop()
            stall("coefficient rows are dependent")
            continue
        solved = inverse * Matrix(values)
        return [tuple(int(solved[r, c]) % e for c in range(solved.cols)) for r in range(solved.rows)]
