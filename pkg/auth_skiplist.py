#!/usr/bin/env python3
"""
Rank-based authenticated skip list over an ordered list of tags.

The server keeps a :class:`SkipList`; the client keeps only a
:class:`Metadata` (root label and element count). Reads come with a
:class:`SkipListProof` that the client folds bottom-up into a candidate
root label. Before an update the client fetches read proofs and predicts
the root label the server must reach, so the server's update proof can be
checked against that prediction.

Structure
---------
Every element sits in a tower whose height is derived from its tag
(trailing zero bits of SHA-256, capped), so client and server agree on
the shape without exchanging randomness. A sentinel head tower sits at
position 0 and reaches the top level. ``right`` points to the next node on
the same level only when that node is the top of its tower; otherwise it
is None and the node is reached through ``down``. This makes every node
reachable along exactly one path from the root.

Labels follow::

    bottom:   H(level || rank || H(tag) || label(right))
    internal: H(level || rank || label(down) || label(right))

with the 32-byte zero label for absent children and for the sentinel's
element.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

from crypto_core import ZERO_DIGEST, decode_blob, digest, encode_blob, read_be_uint
from errors import IndexOutOfRange, MalformedMessage, StaleProof

# Configure module logger
logger = logging.getLogger(__name__)

MAX_LEVEL = 32
MAX_PROOF_ENTRIES = 4096
_MAX_RANK = (1 << 64) - 1

_ENTRY = struct.Struct(">BQB32s")
_NODE = struct.Struct(">BQBB")

_FLAG_DOWN = 0x01
_FLAG_RIGHT = 0x02
_FLAG_SENTINEL = 0x04


class UpdateType(IntEnum):
    INSERT = 1
    MODIFY = 2
    DELETE = 3


def tower_height(tag: bytes) -> int:
    """Number of trailing zero bits of SHA-256(tag), capped at MAX_LEVEL."""
    value = int.from_bytes(digest(tag), "big")
    if value == 0:
        return MAX_LEVEL
    return min(MAX_LEVEL, (value & -value).bit_length() - 1)


def _node_label(level: int, rank: int, left: bytes, right: bytes) -> bytes:
    return digest(struct.pack(">BQ", level, rank) + left + right)


@dataclass(frozen=True)
class Metadata:
    """What the client keeps: root label and element count."""

    root_label: bytes
    m: int

    def to_bytes(self) -> bytes:
        return self.root_label + struct.pack(">Q", self.m)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["Metadata", int]:
        if offset + 40 > len(data):
            raise MalformedMessage("Truncated skip-list metadata")
        label = bytes(data[offset:offset + 32])
        m = read_be_uint(data, offset + 32, 8)
        return cls(root_label=label, m=m), offset + 40


class ProofEntry(NamedTuple):
    """(level, sibling rank, direction bit, sibling label) for one path node."""

    level: int
    rank: int
    direction: int
    label: bytes


@dataclass(frozen=True)
class SkipListProof:
    entries: Tuple[ProofEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def to_bytes(self) -> bytes:
        parts = [struct.pack(">I", len(self.entries))]
        for entry in self.entries:
            parts.append(_ENTRY.pack(entry.level, entry.rank, entry.direction, entry.label))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["SkipListProof", int]:
        count = read_be_uint(data, offset, 4)
        offset += 4
        if count > MAX_PROOF_ENTRIES:
            raise MalformedMessage(f"Proof claims {count} entries")
        end = offset + count * _ENTRY.size
        if end > len(data):
            raise MalformedMessage("Truncated skip-list proof")
        entries = tuple(
            ProofEntry(*_ENTRY.unpack_from(data, offset + k * _ENTRY.size)) for k in range(count)
        )
        return cls(entries=entries), end


@dataclass(eq=False)
class SkipNode:
    level: int
    height: int = 0
    sentinel: bool = False
    rank: int = 0
    element: Optional[bytes] = None
    elem_digest: bytes = ZERO_DIGEST
    label: bytes = ZERO_DIGEST
    right: Optional["SkipNode"] = field(default=None, repr=False)
    down: Optional["SkipNode"] = field(default=None, repr=False)

    @property
    def own(self) -> int:
        return 0 if self.sentinel else 1

    def set_element(self, tag: bytes) -> None:
        self.element = bytes(tag)
        self.elem_digest = digest(self.element)

    def relabel(self) -> None:
        right_rank = self.right.rank if self.right is not None else 0
        right_label = self.right.label if self.right is not None else ZERO_DIGEST
        if self.level == 0:
            self.rank = self.own + right_rank
            self.label = _node_label(0, self.rank, self.elem_digest, right_label)
        else:
            self.rank = self.down.rank + right_rank
            self.label = _node_label(self.level, self.rank, self.down.label, right_label)


@dataclass
class ListUpdateRequest:
    """Update as the client sends it, plus the anchor tag it verified."""

    index: int
    updtype: UpdateType
    new_tag: Optional[bytes]
    anchor_tag: bytes = b""


class SkipList:
    """Server-side structure. Not thread-safe; the owner serializes writers."""

    def __init__(self, root: SkipNode, count: int):
        self.root = root
        self.count = count

    def __len__(self) -> int:
        return self.count

    @property
    def metadata(self) -> Metadata:
        return Metadata(root_label=self.root.label, m=self.count)

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, tags: Sequence[bytes]) -> "SkipList":
        heights = [tower_height(tag) for tag in tags]
        top = max(heights, default=0)

        head: List[SkipNode] = []
        for level in range(top + 1):
            head.append(SkipNode(level=level, sentinel=True, down=head[-1] if head else None))

        last = list(head)
        towers: List[List[SkipNode]] = []
        for tag, height in zip(tags, heights):
            nodes: List[SkipNode] = []
            for level in range(height + 1):
                node = SkipNode(level=level, height=height, down=nodes[-1] if nodes else None)
                if level == 0:
                    node.set_element(tag)
                if level == height:
                    last[level].right = node
                last[level] = node
                nodes.append(node)
            towers.append(nodes)

        for nodes in reversed(towers):
            for node in nodes:
                node.relabel()
        for node in head:
            node.relabel()
        return cls(root=head[-1], count=len(tags))

    # -- navigation --------------------------------------------------------

    def _search(self, position: int) -> List[Tuple[SkipNode, int]]:
        """Nodes from the root to the bottom of the tower at ``position``."""
        node, pos = self.root, 0
        path = [(node, pos)]
        while pos != position or node.level > 0:
            right = node.right
            if pos != position and right is not None:
                right_pos = pos + (1 - node.own) + node.rank - right.rank
                if right_pos <= position:
                    node, pos = right, right_pos
                    path.append((node, pos))
                    continue
            if node.level == 0:
                raise IndexOutOfRange(f"Position {position} not reachable")
            node = node.down
            path.append((node, pos))
        return path

    @staticmethod
    def _proof_from_path(path: List[Tuple[SkipNode, int]]) -> SkipListProof:
        entries: List[ProofEntry] = []
        child: Optional[SkipNode] = None
        for node, _ in reversed(path):
            if child is None or child is node.down:
                right = node.right
                entries.append(ProofEntry(
                    node.level,
                    right.rank if right is not None else 0,
                    0,
                    right.label if right is not None else ZERO_DIGEST,
                ))
            elif node.level == 0:
                entries.append(ProofEntry(0, node.own, 1, node.elem_digest))
            else:
                entries.append(ProofEntry(node.level, node.down.rank, 1, node.down.label))
            child = node
        return SkipListProof(entries=tuple(entries))

    def _check_index(self, i: int) -> None:
        if not 1 <= i <= self.count:
            raise IndexOutOfRange(f"Index {i} outside [1, {self.count}]")

    def auth_read(self, i: int) -> Tuple[bytes, SkipListProof]:
        self._check_index(i)
        path = self._search(i)
        return path[-1][0].element, self._proof_from_path(path)

    def head_proof(self) -> SkipListProof:
        """Read proof of the sentinel at position 0."""
        return self._proof_from_path(self._search(0))

    def proof_at(self, position: int) -> Tuple[bytes, SkipListProof]:
        if position == 0:
            return b"", self.head_proof()
        return self.auth_read(position)

    def tags(self) -> List[bytes]:
        """Elements in list order."""
        out: List[bytes] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.level == 0 and not node.sentinel:
                out.append(node.element)
            if node.right is not None:
                stack.append(node.right)
            if node.down is not None:
                stack.append(node.down)
        return out

    # -- updates -----------------------------------------------------------

    def perform_update(self, i: int, updtype: UpdateType, new_tag: Optional[bytes] = None) -> SkipListProof:
        """Apply the update and return the read proof of the affected position.

        A modify keeps the element's tower: height is fixed when the element is inserted,
        so the live list can differ from ``SkipList.build(self.tags())``.
        """
        updtype = UpdateType(updtype)
        if updtype is not UpdateType.DELETE and new_tag is None:
            raise ValueError(f"{updtype.name.lower()} needs a new tag")
        if updtype is UpdateType.INSERT:
            if not 0 <= i <= self.count:
                raise IndexOutOfRange(f"Insert position {i} outside [0, {self.count}]")
            self._insert_after(i, new_tag)
            return self.proof_at(i + 1)[1]
        self._check_index(i)
        if updtype is UpdateType.MODIFY:
            path = self._search(i)
            path[-1][0].set_element(new_tag)
            for node, _ in reversed(path):
                node.relabel()
            return self.proof_at(i)[1]
        self._delete(i)
        return self.proof_at(i - 1)[1]

    def _insert_after(self, j: int, tag: bytes) -> None:
        height = tower_height(tag)
        path = self._search(j)
        last: Dict[int, SkipNode] = {}
        for node, _ in path:
            last[node.level] = node

        grown: List[SkipNode] = []
        while self.root.level < height:
            head = SkipNode(level=self.root.level + 1, sentinel=True, down=self.root)
            self.root = head
            last[head.level] = head
            grown.append(head)

        tower: List[SkipNode] = []
        for level in range(height + 1):
            node = SkipNode(level=level, height=height, down=tower[-1] if tower else None)
            if level == 0:
                node.set_element(tag)
            before = last[level]
            node.right = before.right
            before.right = node if level == height else None
            tower.append(node)

        for node in tower:
            node.relabel()
        for node, _ in reversed(path):
            node.relabel()
        for node in grown:
            node.relabel()
        self.count += 1

    def _delete(self, i: int) -> None:
        left_path = self._search(i - 1)
        last: Dict[int, SkipNode] = {}
        for node, _ in left_path:
            last[node.level] = node
        for node, pos in self._search(i):
            if pos == i:
                last[node.level].right = node.right

        for node, _ in reversed(left_path):
            node.relabel()
        while self.root.level > 0 and self.root.right is None:
            self.root = self.root.down
        self.count -= 1

    # -- diagnostics -------------------------------------------------------

    def iter_nodes(self) -> Iterator[Tuple[SkipNode, int, int]]:
        """Yield (node, low, high): bounds of the bottom positions it reaches."""
        stack = [(self.root, 0)]
        while stack:
            node, pos = stack.pop()
            low = pos + 1 - node.own
            yield node, low, low + node.rank - 1
            if node.right is not None:
                stack.append((node.right, low + node.rank - node.right.rank))
            if node.down is not None:
                stack.append((node.down, pos))

    def check_invariants(self) -> List[str]:
        """Full re-scan of ranks, labels and pointer rules; returns problems."""
        problems: List[str] = []
        by_level: Dict[int, List[Tuple[int, SkipNode]]] = {}
        heights: Dict[int, int] = {}
        for node, low, _ in self.iter_nodes():
            pos = low - 1 + node.own
            by_level.setdefault(node.level, []).append((pos, node))
            heights[pos] = max(heights.get(pos, 0), node.level)

            right_rank = node.right.rank if node.right is not None else 0
            right_label = node.right.label if node.right is not None else ZERO_DIGEST
            if node.level == 0:
                if node.down is not None:
                    problems.append(f"bottom node at {pos} has a down pointer")
                expected_rank = node.own + right_rank
                expected_label = _node_label(0, expected_rank, node.elem_digest, right_label)
                if not node.sentinel and node.elem_digest != digest(node.element or b""):
                    problems.append(f"stale element digest at {pos}")
            else:
                if node.down is None:
                    problems.append(f"internal node at {pos}/{node.level} lacks down pointer")
                    continue
                expected_rank = node.down.rank + right_rank
                expected_label = _node_label(node.level, expected_rank, node.down.label, right_label)
            if node.rank != expected_rank:
                problems.append(f"rank mismatch at {pos}/{node.level}: {node.rank} != {expected_rank}")
            if node.label != expected_label:
                problems.append(f"label mismatch at {pos}/{node.level}")

        top = max((h for pos, h in heights.items() if pos != 0), default=0)
        if self.root.level != top:
            problems.append(f"root level {self.root.level} but tallest tower {top}")
        elements = sum(1 for pos in heights if pos != 0)
        if elements != self.count or self.root.rank != self.count:
            problems.append(f"count {self.count}, root rank {self.root.rank}, elements {elements}")

        for level, row in by_level.items():
            row.sort(key=lambda item: item[0])
            for (pos, node), nxt in zip(row, row[1:] + [None]):
                if nxt is None:
                    expected = None
                else:
                    next_pos, next_node = nxt
                    expected = next_node if heights[next_pos] == level else None
                if node.right is not expected:
                    problems.append(f"right pointer rule broken at {pos}/{level}")
        return problems

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Preorder dump: (level, rank, flags, height, element?, label) per node."""
        parts = [struct.pack(">Q", self.count)]
        stack = [self.root]
        while stack:
            node = stack.pop()
            flags = (_FLAG_DOWN if node.down is not None else 0) \
                | (_FLAG_RIGHT if node.right is not None else 0) \
                | (_FLAG_SENTINEL if node.sentinel else 0)
            parts.append(_NODE.pack(node.level, node.rank, flags, node.height))
            if node.level == 0 and not node.sentinel:
                parts.append(encode_blob(node.element))
            parts.append(node.label)
            if node.right is not None:
                stack.append(node.right)
            if node.down is not None:
                stack.append(node.down)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SkipList":
        count = read_be_uint(data, 0, 8)
        offset = 8

        def read_node() -> Tuple[SkipNode, int]:
            nonlocal offset
            if offset + _NODE.size > len(data):
                raise MalformedMessage("Truncated skip-list dump")
            level, rank, flags, height = _NODE.unpack_from(data, offset)
            offset += _NODE.size
            node = SkipNode(level=level, height=height, sentinel=bool(flags & _FLAG_SENTINEL), rank=rank)
            if level == 0 and not node.sentinel:
                element, offset = decode_blob(data, offset)
                node.set_element(element)
            if offset + 32 > len(data):
                raise MalformedMessage("Truncated skip-list dump")
            node.label = bytes(data[offset:offset + 32])
            offset += 32
            return node, flags

        root, flags = read_node()
        slots: List[Tuple[SkipNode, str]] = []

        def push(node: SkipNode, node_flags: int) -> None:
            if node_flags & _FLAG_RIGHT:
                slots.append((node, "right"))
            if node_flags & _FLAG_DOWN:
                slots.append((node, "down"))

        push(root, flags)
        while slots:
            parent, attr = slots.pop()
            child, child_flags = read_node()
            setattr(parent, attr, child)
            push(child, child_flags)
        if offset != len(data):
            raise MalformedMessage(f"{len(data) - offset} trailing bytes after skip-list dump")
        return cls(root=root, count=count)


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


def _fold(entries: Sequence[ProofEntry], own: int, elem_digest: bytes) -> Optional[Tuple[int, bytes, int]]:
    """Recompute (root rank, root label, elements left of target) or None."""
    if not entries or len(entries) > MAX_PROOF_ENTRIES:
        return None
    first = entries[0]
    if first.level != 0 or first.direction != 0:
        return None
    rank = own + first.rank
    if rank > _MAX_RANK:
        return None
    label = _node_label(0, rank, elem_digest, first.label)
    level = 0
    left = 0
    for entry in entries[1:]:
        if entry.direction == 0:
            if entry.level != level + 1:
                return None
            level = entry.level
            rank += entry.rank
            if rank > _MAX_RANK:
                return None
            label = _node_label(level, rank, label, entry.label)
        elif entry.direction == 1:
            if entry.level != level or (level == 0 and entry.rank > 1):
                return None
            rank += entry.rank
            left += entry.rank
            if rank > _MAX_RANK:
                return None
            label = _node_label(level, rank, entry.label, label)
        else:
            return None
    return rank, label, left


def list_init(tags: Sequence[bytes]) -> Tuple[SkipList, Metadata]:
    skiplist = SkipList.build(list(tags))
    logger.debug(f"Built skip list over {len(tags)} tags (top level {skiplist.root.level})")
    return skiplist, skiplist.metadata


def list_auth_read(skiplist: SkipList, i: int) -> Tuple[bytes, SkipListProof]:
    return skiplist.auth_read(i)


def list_verify_read(i: int, metadata: Metadata, tag: bytes, proof: SkipListProof) -> bool:
    """True iff (tag, proof) reproduces the root label and locates position i."""
    if not 0 <= i <= metadata.m:
        return False
    if i == 0:
        own, elem_digest = 0, ZERO_DIGEST
    else:
        own, elem_digest = 1, digest(tag)
    folded = _fold(proof.entries, own, elem_digest)
    if folded is None:
        return False
    rank, label, left = folded
    return label == metadata.root_label and rank == metadata.m and left + own == i


def _anchors(entries: Sequence[ProofEntry]) -> Dict[int, int]:
    """Level -> index of the entry reached from below (the last node visited on that level)."""
    return {entry.level: idx for idx, entry in enumerate(entries) if entry.direction == 0}


def _predict_insert(entries: Sequence[ProofEntry], tag: bytes) -> List[ProofEntry]:
    height = tower_height(tag)
    anchors = _anchors(entries)
    top = entries[-1].level

    rank, label = 0, ZERO_DIGEST
    for level in range(height + 1):
        if level <= top:
            sibling = entries[anchors[level]]
            q, g = sibling.rank, sibling.label
        else:
            q, g = 0, ZERO_DIGEST
        if level == 0:
            rank = 1 + q
            label = _node_label(0, rank, digest(tag), g)
        else:
            rank += q
            label = _node_label(level, rank, label, g)

    predicted = list(entries)
    for level in range(min(height, top) + 1):
        if level == height:
            predicted[anchors[level]] = ProofEntry(level, rank, 0, label)
        else:
            predicted[anchors[level]] = ProofEntry(level, 0, 0, ZERO_DIGEST)
    for level in range(top + 1, height + 1):
        if level == height:
            predicted.append(ProofEntry(level, rank, 0, label))
        else:
            predicted.append(ProofEntry(level, 0, 0, ZERO_DIGEST))
    return predicted


def _predict_delete(entries: Sequence[ProofEntry], removed: Sequence[ProofEntry]) -> List[ProofEntry]:
    height = 0
    while height + 1 < len(removed) and removed[height + 1].direction == 0:
        height += 1
    anchors = _anchors(entries)
    predicted = list(entries)
    for level in range(height + 1):
        sibling = removed[level]
        predicted[anchors[level]] = ProofEntry(level, sibling.rank, 0, sibling.label)
    while len(predicted) > 1:
        top = predicted[-1]
        if top.level > 0 and top.direction == 0 and top.rank == 0 and top.label == ZERO_DIGEST:
            predicted.pop()
        else:
            break
    return predicted


FetchFn = Callable[[int], Tuple[bytes, SkipListProof]]


def list_init_update(
    i: int,
    updtype: UpdateType,
    metadata: Metadata,
    new_tag: Optional[bytes],
    fetch: FetchFn,
) -> Tuple[Metadata, ListUpdateRequest]:
    """
    Predict the metadata the server must reach after the update.

    ``fetch(j)`` returns the server's (tag, proof) for position j, with
    j = 0 meaning the sentinel head. Insert and modify fetch j = i; delete
    fetches j = i - 1 and the removed position i.
    """
    updtype = UpdateType(updtype)
    m = metadata.m
    if updtype is UpdateType.INSERT:
        if not 0 <= i <= m:
            raise IndexOutOfRange(f"Insert position {i} outside [0, {m}]")
        anchor = i
    else:
        if not 1 <= i <= m:
            raise IndexOutOfRange(f"Index {i} outside [1, {m}]")
        anchor = i if updtype is UpdateType.MODIFY else i - 1
    if updtype is not UpdateType.DELETE and new_tag is None:
        raise ValueError(f"{updtype.name.lower()} needs a new tag")

    anchor_tag, proof = fetch(anchor)
    if not list_verify_read(anchor, metadata, anchor_tag, proof):
        raise StaleProof(f"Read proof for position {anchor} does not match the current root")

    if updtype is UpdateType.MODIFY:
        folded = _fold(proof.entries, 1, digest(new_tag))
        new_m = m
    elif updtype is UpdateType.INSERT:
        entries = _predict_insert(proof.entries, new_tag)
        folded = _fold(entries, 0 if anchor == 0 else 1, ZERO_DIGEST if anchor == 0 else digest(anchor_tag))
        new_m = m + 1
    else:
        removed_tag, removed_proof = fetch(i)
        if not list_verify_read(i, metadata, removed_tag, removed_proof):
            raise StaleProof(f"Read proof for position {i} does not match the current root")
        entries = _predict_delete(proof.entries, removed_proof.entries)
        folded = _fold(entries, 0 if anchor == 0 else 1, ZERO_DIGEST if anchor == 0 else digest(anchor_tag))
        new_m = m - 1

    if folded is None or folded[0] != new_m:
        raise StaleProof("Could not predict the post-update root from the server's proofs")
    expected = Metadata(root_label=folded[1], m=new_m)
    request = ListUpdateRequest(index=i, updtype=updtype, new_tag=new_tag, anchor_tag=anchor_tag)
    return expected, request


def list_perform_update(
    i: int,
    updtype: UpdateType,
    new_tag: Optional[bytes],
    skiplist: SkipList,
) -> SkipListProof:
    return skiplist.perform_update(i, updtype, new_tag)


def list_verify_update(
    i: int,
    updtype: UpdateType,
    new_tag: Optional[bytes],
    expected: Metadata,
    proof: SkipListProof,
    anchor_tag: bytes = b"",
) -> bool:
    """Check the server's post-update proof against the predicted metadata."""
    updtype = UpdateType(updtype)
    if updtype is UpdateType.INSERT:
        return list_verify_read(i + 1, expected, new_tag, proof)
    if updtype is UpdateType.MODIFY:
        return list_verify_read(i, expected, new_tag, proof)
    return list_verify_read(i - 1, expected, anchor_tag, proof)
