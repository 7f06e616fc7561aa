#!/usr/bin/env python3
"""
Storage server for audited cloud files.

The server keeps, per file, the blocks, the serialized tags and, for
DSCS I, the h-list and the authenticated skip list. It answers reads,
applies updates and computes audit proofs on behalf of remote clients
speaking the framed protocol from :mod:`wire`.

Persistence is one directory per file::

    <data_dir>/<fid hex>/manifest.json      generation, journal position, layout
    <data_dir>/<fid hex>/<part>.<gen>.dat   blocks, tags, hlist, skiplist, pubkey
    <data_dir>/<fid hex>/journal.wal        updates since the snapshot

An update is acknowledged only after its journal record is fsynced. Every
``checkpoint_every`` records (and on clean shutdown) the current state is
written as a new generation and the manifest is swapped in atomically.

Reads and audits take a file's lock shared, updates take it exclusive, and
contention is reported to the caller as ``Busy`` rather than waited out.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import shutil
import socket
import struct
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

from auth_skiplist import SkipList, SkipListProof, UpdateType
from crypto_core import (
    DIGEST_SIZE,
    Block,
    Challenge,
    FileLayout,
    digest,
)
from dscs1 import ServerFileI, StorageProofI, UpdateMessageI, fid_for
from dscs2 import AppendMessage, ServerFileII, StorageProofII
from errors import (
    AppendOnly,
    Busy,
    ConfigError,
    CountMismatch,
    DscsError,
    DuplicateFid,
    MalformedMessage,
    ServiceError,
    TransportError,
    UnknownFid,
    UnknownMessageType,
    error_from_code,
)
from snc_pairing import SncPairPublicKey
from snc_rsa import SncRsaPublicKey
from wire import (
    ErrorReply,
    MessageType,
    Protocol,
    ReadReply,
    UpdateKind,
    UpdateReply,
    UpdateRequest,
    UploadRequest,
    WireMessage,
    decode_count,
    decode_read,
    encode_count,
    encode_read,
    read_message,
    send_message,
)

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 7300
DEFAULT_DATA_DIR = "dscs-data"
DEFAULT_LOG_FILE = "dscs-server.log"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

MANIFEST_NAME = "manifest.json"
JOURNAL_NAME = "journal.wal"

ServerState = Union[ServerFileI, ServerFileII]
UpdateMessage = Union[UpdateMessageI, AppendMessage]
FaultHook = Callable[[str], None]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def parse_listen(value: str) -> Tuple[str, int]:
    """Split ``host:port``."""
    host, sep, port = str(value).rpartition(":")
    if not sep or not host:
        raise ConfigError(f"Listen address '{value}' is not host:port")
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"Port '{port}' is not a number") from exc


def _as_int(name: str, value: Any) -> int:
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer (got {value!r})") from exc


@dataclass
class ServiceConfig:
    """Server settings. ``data_dir=None`` keeps everything in memory."""

    host: str = DEFAULT_HOST
    port: int = DEFAULT_PORT
    data_dir: Optional[str] = DEFAULT_DATA_DIR
    workers: int = 8
    checkpoint_every: int = 64
    log_file: str = DEFAULT_LOG_FILE
    log_level: str = "INFO"

    ENV_KEYS = {
        "DSCS_LISTEN": "listen",
        "DSCS_DATA_DIR": "data_dir",
        "DSCS_WORKERS": "workers",
        "DSCS_CHECKPOINT_EVERY": "checkpoint_every",
        "DSCS_LOG_FILE": "log_file",
        "DSCS_LOG_LEVEL": "log_level",
    }

    @property
    def listen(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "ServiceConfig":
        """Defaults, then the JSON config file, then ``DSCS_*`` variables."""
        environ = os.environ if environ is None else environ
        config = cls()
        path = path or environ.get("DSCS_CONFIG")
        if path:
            config = config.merged(cls.read_file(path))
        env_values = {key: environ[var] for var, key in cls.ENV_KEYS.items() if environ.get(var)}
        config = config.merged(env_values)
        config.validate()
        return config

    @staticmethod
    def read_file(path: Union[str, Path]) -> Dict[str, Any]:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"Config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        return values

    def merged(self, values: Mapping[str, Any]) -> "ServiceConfig":
        """Copy with every non-None entry of ``values`` applied."""
        changes: Dict[str, Any] = {}
        for key, value in values.items():
            if value is None:
                continue
            if key == "listen":
                changes["host"], changes["port"] = parse_listen(value)
            elif key in ("port", "workers", "checkpoint_every"):
                changes[key] = _as_int(key, value)
            elif key in ("host", "data_dir", "log_file", "log_level"):
                changes[key] = str(value)
            else:
                raise ConfigError(f"Unknown configuration key '{key}'")
        return replace(self, **changes)

    def validate(self) -> None:
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"Port {self.port} out of range")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not isinstance(logging.getLevelName(self.log_level.upper()), int):
            raise ConfigError(f"Unknown log level '{self.log_level}'")


# ---------------------------------------------------------------------------
# Locking
# ---------------------------------------------------------------------------


class LockTrace:
    """Ordered log of lock begin/end events, checkable for overlapping writes."""

    def __init__(self) -> None:
        self.events: List[Tuple[str, str, str, str]] = []
        self._lock = threading.Lock()

    def record(self, key: str, op: str, mode: str, phase: str) -> None:
        with self._lock:
            self.events.append((key, op, mode, phase))

    def violations(self) -> List[str]:
        active: Dict[Tuple[str, str], int] = {}
        problems = []
        for position, (key, op, mode, phase) in enumerate(self.events):
            if phase == "begin":
                writing = active.get((key, "exclusive"), 0)
                reading = active.get((key, "shared"), 0)
                if writing or (mode == "exclusive" and reading):
                    problems.append(f"event {position}: {op} on {key} overlaps a running write")
                active[(key, mode)] = active.get((key, mode), 0) + 1
            else:
                active[(key, mode)] = active.get((key, mode), 0) - 1
        return problems


class FileLock:
    """Non-blocking reader/writer lock; contention raises Busy."""

    def __init__(self, name: str, trace: Optional[LockTrace] = None):
        self.name = name
        self._trace = trace
        self._mutex = threading.Lock()
        self._readers = 0
        self._writer = False

    def _note(self, op: str, mode: str, phase: str) -> None:
        if self._trace is not None:
            self._trace.record(self.name, op, mode, phase)

    @contextmanager
    def shared(self, op: str = "audit") -> Iterator[None]:
        with self._mutex:
            if self._writer:
                raise Busy(f"File {self.name} is being updated")
            self._readers += 1
            self._note(op, "shared", "begin")
        try:
            yield
        finally:
            with self._mutex:
                self._note(op, "shared", "end")
                self._readers -= 1

    @contextmanager
    def exclusive(self, op: str = "update") -> Iterator[None]:
        with self._mutex:
            if self._writer or self._readers:
                raise Busy(f"File {self.name} is busy ({self._readers} audits in flight)")
            self._writer = True
            self._note(op, "exclusive", "begin")
        try:
            yield
        finally:
            with self._mutex:
                self._note(op, "exclusive", "end")
                self._writer = False


# ---------------------------------------------------------------------------
# Journal and snapshots
# ---------------------------------------------------------------------------

_RECORD_HEAD = struct.Struct(">IQ")


@dataclass(frozen=True)
class JournalRecord:
    """length (4B) | seq (8B) | payload | SHA-256 over everything before it."""

    seq: int
    payload: bytes

    def serialize(self) -> bytes:
        body = _RECORD_HEAD.pack(len(self.payload), self.seq) + self.payload
        return body + digest(body)

    @classmethod
    def deserialize(cls, data: bytes, offset: int = 0) -> Optional[Tuple["JournalRecord", int]]:
        """Record at ``offset`` and its end, or None for a torn or corrupt tail."""
        head_end = offset + _RECORD_HEAD.size
        if head_end > len(data):
            return None
        length, seq = _RECORD_HEAD.unpack_from(data, offset)
        body_end = head_end + length
        end = body_end + DIGEST_SIZE
        if end > len(data):
            return None
        if digest(data[offset:body_end]) != data[body_end:end]:
            return None
        return cls(seq=seq, payload=bytes(data[head_end:body_end])), end


class Journal:
    """Append-only update log. A record counts once :meth:`append` returns."""

    def __init__(self, path: Path, fault_hook: Optional[FaultHook] = None):
        self.path = path
        self._fault_hook = fault_hook
        self._file = open(path, "ab", buffering=0)

    def _fault(self, stage: str) -> None:
        if self._fault_hook:
            self._fault_hook(stage)

    def append(self, record: JournalRecord) -> None:
        self._file.write(record.serialize())
        self._fault("journal-appended")
        os.fsync(self._file.fileno())
        self._fault("journal-synced")

    def reset(self) -> None:
        self._file.truncate(0)
        os.fsync(self._file.fileno())

    def close(self) -> None:
        if not self._file.closed:
            os.fsync(self._file.fileno())
            self._file.close()

    @staticmethod
    def read(path: Path) -> List[Tuple[JournalRecord, int]]:
        """Intact records with their end offsets, stopping at the first bad one."""
        if not path.exists():
            return []
        data = path.read_bytes()
        records = []
        offset = 0
        while offset < len(data):
            parsed = JournalRecord.deserialize(data, offset)
            if parsed is None:
                logger.warning(f"Ignoring {len(data) - offset} torn bytes at the end of {path}")
                break
            record, offset = parsed
            records.append((record, offset))
        return records


def _fsync_dir(directory: Path) -> None:
    fd = os.open(directory, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _write_synced(path: Path, data: bytes) -> None:
    with open(path, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())


class FileStore:
    """Directory holding one file's snapshot generations, manifest and journal."""

    def __init__(self, directory: Path, fault_hook: Optional[FaultHook] = None):
        self.directory = Path(directory)
        self.generation = 0
        self.seq = 0
        self.last_seq = 0
        self._fault_hook = fault_hook
        self._journal: Optional[Journal] = None

    @property
    def manifest_path(self) -> Path:
        return self.directory / MANIFEST_NAME

    @property
    def journal_path(self) -> Path:
        return self.directory / JOURNAL_NAME

    @property
    def pending(self) -> int:
        """Journal records not yet folded into a snapshot."""
        return self.last_seq - self.seq

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def _fault(self, stage: str) -> None:
        if self._fault_hook:
            self._fault_hook(stage)

    def _part_path(self, name: str, generation: int) -> Path:
        return self.directory / f"{name}.{generation}.dat"

    def create(self, meta: Dict[str, Any], parts: Dict[str, bytes]) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_generation(1, 0, meta, parts)
        self._fault("upload-written")
        self._journal = Journal(self.journal_path, self._fault_hook)
        self._journal.reset()
        self._remove_strays()

    def load(self) -> Tuple[Dict[str, Any], Dict[str, bytes], List[JournalRecord]]:
        """Snapshot parts plus the journal records that still need replaying."""
        manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        self.generation = manifest["generation"]
        self.seq = manifest["seq"]
        parts = {name: self._part_path(name, self.generation).read_bytes() for name in manifest["parts"]}

        pending: List[JournalRecord] = []
        valid_end = 0
        expected = self.seq + 1
        for record, end in Journal.read(self.journal_path):
            if record.seq < expected:
                valid_end = end
                continue
            if record.seq != expected:
                logger.warning(f"Journal gap in {self.directory.name}: wanted {expected}, found {record.seq}")
                break
            pending.append(record)
            valid_end = end
            expected += 1
        self.last_seq = expected - 1
        if self.journal_path.exists() and self.journal_path.stat().st_size != valid_end:
            with open(self.journal_path, "r+b") as handle:
                handle.truncate(valid_end)
                os.fsync(handle.fileno())
        self._journal = Journal(self.journal_path, self._fault_hook)
        self._remove_strays()
        return manifest, parts, pending

    def log(self, payload: bytes) -> int:
        if self._journal is None:
            raise RuntimeError(f"Store {self.directory} is not open")
        seq = self.last_seq + 1
        self._journal.append(JournalRecord(seq=seq, payload=payload))
        self.last_seq = seq
        return seq

    def checkpoint(self, meta: Dict[str, Any], parts: Dict[str, bytes]) -> None:
        self._write_generation(self.generation + 1, self.last_seq, meta, parts)
        if self._journal is not None:
            self._journal.reset()
            self._fault("journal-truncated")
        self._remove_strays()
        logger.info(f"Checkpointed {self.directory.name} at generation {self.generation} (seq {self.seq})")

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    def _write_generation(self, generation: int, seq: int, meta: Dict[str, Any], parts: Dict[str, bytes]) -> None:
        for name, data in parts.items():
            _write_synced(self._part_path(name, generation), data)
        _fsync_dir(self.directory)
        self._fault("snapshot-written")

        manifest = dict(meta, generation=generation, seq=seq, parts=sorted(parts))
        staging = self.directory / (MANIFEST_NAME + ".tmp")
        _write_synced(staging, json.dumps(manifest, sort_keys=True).encode("utf-8"))
        os.replace(staging, self.manifest_path)
        _fsync_dir(self.directory)
        self.generation = generation
        self.seq = seq
        self._fault("manifest-replaced")

    def _remove_strays(self) -> None:
        suffix = f".{self.generation}.dat"
        for path in self.directory.iterdir():
            if path.name in (MANIFEST_NAME, JOURNAL_NAME):
                continue
            if path.name.endswith(".tmp") or (path.name.endswith(".dat") and not path.name.endswith(suffix)):
                path.unlink()


# ---------------------------------------------------------------------------
# File records
# ---------------------------------------------------------------------------


def _chunks(data: bytes, width: int, count: int, what: str) -> List[bytes]:
    if count and width * count != len(data):
        raise MalformedMessage(f"{what} holds {len(data)} bytes, expected {count} x {width}")
    return [data[k * width:(k + 1) * width] for k in range(count)]


@dataclass(eq=False)
class FileRecord:
    """One stored file: its protocol state, lock and on-disk store."""

    fid: bytes
    protocol: Protocol
    segment_bytes: int
    state: ServerState
    lock: FileLock
    tag_width: int = 0
    store: Optional[FileStore] = None

    @property
    def m(self) -> int:
        return self.state.m

    @property
    def layout(self) -> FileLayout:
        return FileLayout(segment_bytes=self.segment_bytes, n=self.state.pk.n)

    @property
    def is_dscs1(self) -> bool:
        return self.protocol is Protocol.DSCS1

    # -- construction ------------------------------------------------------

    @classmethod
    def from_upload(cls, fid: bytes, request: UploadRequest, lock: FileLock) -> "FileRecord":
        if request.protocol is Protocol.DSCS1:
            pk, end = SncRsaPublicKey.from_bytes(request.public_key)
            if end != len(request.public_key):
                raise MalformedMessage("Trailing bytes after public key")
            if fid != fid_for(pk):
                raise MalformedMessage("DSCS I fid must be the public prime e")
        else:
            pk, end = SncPairPublicKey.from_bytes(request.public_key)
            if end != len(request.public_key):
                raise MalformedMessage("Trailing bytes after public key")

        layout = FileLayout(segment_bytes=request.segment_bytes, n=pk.n)
        if len(request.tags) != len(request.blocks):
            raise CountMismatch(f"{len(request.tags)} tags for {len(request.blocks)} blocks")
        blocks = [cls._block(layout, raw) for raw in request.blocks]
        widths = {len(tag) for tag in request.tags}
        if len(widths) > 1:
            raise MalformedMessage("Tags differ in length")
        tag_width = widths.pop() if widths else 0

        if request.protocol is Protocol.DSCS1:
            if request.segment_bytes != (pk.e.bit_length() - 1) // 8:
                raise MalformedMessage(f"Segment width {request.segment_bytes} does not match e")
            if pk.m != len(blocks):
                raise CountMismatch(f"h-list has {pk.m} entries for {len(blocks)} blocks")
            skiplist = SkipList.from_bytes(request.skiplist)
            if len(skiplist) != len(blocks):
                raise CountMismatch(f"Skip list ranks {len(skiplist)} elements for {len(blocks)} blocks")
            if skiplist.tags() != list(request.tags):
                raise MalformedMessage("Skip list elements differ from the uploaded tags")
            if pk.metadata is not None and skiplist.metadata != pk.metadata:
                raise MalformedMessage("Skip list root does not match the key's metadata")
            state: ServerState = ServerFileI(pk=pk, blocks=blocks, tags=list(request.tags), skiplist=skiplist)
        else:
            state = ServerFileII(pk=pk, fid=fid, blocks=blocks, tags=list(request.tags))
        return cls(fid, request.protocol, request.segment_bytes, state, lock, tag_width)

    @classmethod
    def from_parts(
        cls,
        fid: bytes,
        manifest: Dict[str, Any],
        parts: Dict[str, bytes],
        lock: FileLock,
    ) -> "FileRecord":
        protocol = Protocol.from_name(manifest["protocol"])
        m = manifest["m"]
        segment_bytes = manifest["segment_bytes"]
        tag_width = manifest["tag_width"]
        tags = _chunks(parts["tags"], tag_width, m, "tag file")
        if protocol is Protocol.DSCS1:
            pk, _ = SncRsaPublicKey.from_bytes(parts["pubkey"])
            width = pk.residue_width
            pk.h_list = [int.from_bytes(raw, "big") for raw in _chunks(parts["hlist"], width, m, "h-list file")]
        else:
            pk, _ = SncPairPublicKey.from_bytes(parts["pubkey"])
        layout = FileLayout(segment_bytes=segment_bytes, n=pk.n)
        blocks = [layout.block_from_bytes(raw) for raw in _chunks(parts["blocks"], layout.block_bytes, m, "block file")]
        if protocol is Protocol.DSCS1:
            skiplist = SkipList.from_bytes(parts["skiplist"])
            if len(skiplist) != m:
                raise CountMismatch(f"Persisted skip list ranks {len(skiplist)} elements, manifest says {m}")
            state: ServerState = ServerFileI(pk=pk, blocks=blocks, tags=tags, skiplist=skiplist)
        else:
            state = ServerFileII(pk=pk, fid=fid, blocks=blocks, tags=tags)
        return cls(fid, protocol, segment_bytes, state, lock, tag_width)

    @staticmethod
    def _block(layout: FileLayout, raw: bytes) -> Block:
        if len(raw) != layout.block_bytes:
            raise MalformedMessage(f"Block of {len(raw)} bytes, file uses {layout.block_bytes}")
        return layout.block_from_bytes(raw)

    def meta(self) -> Dict[str, Any]:
        return {
            "fid": self.fid.hex(),
            "protocol": self.protocol.label,
            "m": self.m,
            "n": self.state.pk.n,
            "segment_bytes": self.segment_bytes,
            "tag_width": self.tag_width,
        }

    def parts(self) -> Dict[str, bytes]:
        layout = self.layout
        parts = {
            "blocks": b"".join(layout.block_to_bytes(block) for block in self.state.blocks),
            "tags": b"".join(self.state.tags),
        }
        if isinstance(self.state, ServerFileI):
            pk = self.state.pk
            bare = replace(pk, h_list=[], metadata=None)
            parts["pubkey"] = bare.to_bytes()
            parts["hlist"] = b"".join(h.to_bytes(pk.residue_width, "big") for h in pk.h_list)
            parts["skiplist"] = self.state.skiplist.to_bytes()
        else:
            parts["pubkey"] = self.state.pk.to_bytes()
        return parts

    # -- protocol operations -----------------------------------------------

    def read(self, i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
        if isinstance(self.state, ServerFileI):
            return self.state.auth_read(i)
        block, tag = self.state.auth_read2(i)
        return block, tag, None

    def prove(
        self,
        chal: Challenge,
        reader: Optional[Callable[[int], Tuple[Block, bytes, Optional[SkipListProof]]]] = None,
    ) -> Union[StorageProofI, StorageProofII]:
        reader = reader or self.read
        if isinstance(self.state, ServerFileI):
            return self.state.prove(chal, reader)
        return self.state.prove2(chal, lambda i: reader(i)[:2])

    def encode_proof(self, proof: Union[StorageProofI, StorageProofII]) -> bytes:
        if isinstance(proof, StorageProofI):
            return proof.to_bytes(self.state.pk)
        return proof.to_bytes(self.state.pk.suite)

    def current_proof(self, index: int) -> Optional[SkipListProof]:
        if isinstance(self.state, ServerFileI):
            return self.state.skiplist.proof_at(max(0, min(index, self.m)))[1]
        return None

    def to_message(self, request: UpdateRequest) -> UpdateMessage:
        block = None if request.block is None else self._block(self.layout, request.block)
        if request.tag is not None and self.tag_width and len(request.tag) != self.tag_width:
            raise MalformedMessage(f"Tag of {len(request.tag)} bytes, file uses {self.tag_width}")
        if self.is_dscs1:
            kind = request.kind
            index = request.index
            if kind is UpdateKind.APPEND:
                kind, index = UpdateKind.INSERT, self.m
            return UpdateMessageI(index=index, updtype=UpdateType(kind), h=request.h, block=block, tag=request.tag)
        appending = request.kind is UpdateKind.APPEND or (
            request.kind is UpdateKind.INSERT and request.index == self.m
        )
        if not appending:
            raise AppendOnly(f"{request.kind.name.lower()} at {request.index} rejected: file is append-only")
        if block is None or request.tag is None:
            raise MalformedMessage("Append needs a block and a tag")
        return AppendMessage(block=block, tag=request.tag)

    def to_request(self, message: UpdateMessage) -> UpdateRequest:
        """Canonical journal form of an accepted update."""
        layout = self.layout
        if isinstance(message, AppendMessage):
            return UpdateRequest(UpdateKind.APPEND, self.m, block=layout.block_to_bytes(message.block), tag=message.tag)
        block = None if message.block is None else layout.block_to_bytes(message.block)
        return UpdateRequest(UpdateKind(message.updtype), message.index, h=message.h, block=block, tag=message.tag)

    def check(self, message: UpdateMessage) -> None:
        if isinstance(self.state, ServerFileI):
            self.state.check_update(message)
        else:
            self.state.check_append(message)

    def apply(self, message: UpdateMessage) -> UpdateReply:
        if isinstance(self.state, ServerFileI):
            proof = self.state.perform_update(message)
            if not self.tag_width and message.tag is not None:
                self.tag_width = len(message.tag)
            return UpdateReply(m=self.m, proof=proof)
        m = self.state.perform_append(message)
        if not self.tag_width:
            self.tag_width = len(message.tag)
        return UpdateReply(m=m)

    def clone_state(self) -> ServerState:
        return self.state.clone()

    def overhead(self) -> Dict[str, int]:
        if isinstance(self.state, ServerFileI):
            return self.state.storage_overhead()
        return self.state.storage_overhead(self.segment_bytes)


# ---------------------------------------------------------------------------
# Server behaviors
# ---------------------------------------------------------------------------

Reader = Callable[[int], Tuple[Block, bytes, Optional[SkipListProof]]]
Commit = Callable[[UpdateMessage], UpdateReply]


class ServerBehavior:
    """Honest server. Subclasses deviate to exercise the verifiers."""

    name = "honest"

    def after_upload(self, record: FileRecord) -> None:
        pass

    def update(self, record: FileRecord, message: UpdateMessage, commit: Commit) -> UpdateReply:
        return commit(message)

    def read(self, record: FileRecord, i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
        return record.read(i)

    def challenge(self, record: FileRecord, chal: Challenge) -> Union[StorageProofI, StorageProofII]:
        return record.prove(chal)


def _flip(block: Block, segment_bytes: int) -> Block:
    values = list(block)
    values[0] = (values[0] + 1) % (1 << (8 * segment_bytes))
    return tuple(values)


def _unapplied_reply(record: FileRecord, message: UpdateMessage) -> UpdateReply:
    """What a server that skipped ``message`` claims: the expected m and a current proof."""
    if isinstance(message, AppendMessage):
        return UpdateReply(m=record.m + 1)
    delta = {UpdateType.INSERT: 1, UpdateType.DELETE: -1}.get(UpdateType(message.updtype), 0)
    return UpdateReply(m=record.m + delta, proof=record.current_proof(message.index))


class DropUpdateBehavior(ServerBehavior):
    """Acknowledges updates without applying them."""

    name = "drop-update"

    def update(self, record: FileRecord, message: UpdateMessage, commit: Commit) -> UpdateReply:
        return _unapplied_reply(record, message)


class MisplaceUpdateBehavior(ServerBehavior):
    """Applies DSCS I updates one position off; drops them when there is no neighbour."""

    name = "misplace-update"

    def update(self, record: FileRecord, message: UpdateMessage, commit: Commit) -> UpdateReply:
        if isinstance(message, UpdateMessageI):
            low = 0 if UpdateType(message.updtype) is UpdateType.INSERT else 1
            for index in (message.index + 1, message.index - 1):
                if low <= index <= record.m:
                    return commit(replace(message, index=index))
        return _unapplied_reply(record, message)


class PartialUpdateBehavior(ServerBehavior):
    """Updates tags and the skip list but keeps the old block data."""

    name = "partial-update"

    def update(self, record: FileRecord, message: UpdateMessage, commit: Commit) -> UpdateReply:
        if message.block is None:
            return commit(message)
        if isinstance(message, UpdateMessageI) and UpdateType(message.updtype) is UpdateType.MODIFY:
            kept = record.state.blocks[message.index - 1]
        else:
            kept = (0,) * record.state.pk.n
        return commit(replace(message, block=kept))


class StaleReplayBehavior(ServerBehavior):
    """Applies updates but answers for the touched position from the pre-update copy."""

    name = "stale-replay"

    def __init__(self) -> None:
        self._stale: Dict[bytes, ServerState] = {}
        self._touched: Dict[bytes, int] = {}

    def update(self, record: FileRecord, message: UpdateMessage, commit: Commit) -> UpdateReply:
        before = record.clone_state()
        reply = commit(message)
        if isinstance(message, UpdateMessageI):
            offset = 1 if UpdateType(message.updtype) is UpdateType.INSERT else 0
            self._touched[record.fid] = message.index + offset
        else:
            self._touched[record.fid] = record.m
        self._stale[record.fid] = before
        return reply

    def _reader(self, record: FileRecord) -> Reader:
        stale = self._stale.get(record.fid)
        touched = self._touched.get(record.fid)

        def reader(i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
            if stale is not None and i == touched and 1 <= i <= stale.m:
                if isinstance(stale, ServerFileI):
                    return stale.auth_read(i)
                return (*stale.auth_read2(i), None)
            return record.read(i)

        return reader

    def read(self, record: FileRecord, i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
        return self._reader(record)(i)

    def challenge(self, record: FileRecord, chal: Challenge) -> Union[StorageProofI, StorageProofII]:
        return record.prove(chal, self._reader(record))


class CorruptFractionBehavior(ServerBehavior):
    """Loses a beta fraction of blocks right after upload and serves damaged copies."""

    name = "corrupt"

    def __init__(self, beta: float, rng: Optional[random.Random] = None):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1] (got {beta})")
        self.beta = beta
        self.rng = rng or random.Random()
        self.corrupted: Dict[bytes, Set[int]] = {}

    def after_upload(self, record: FileRecord) -> None:
        count = round(self.beta * record.m)
        self.corrupted[record.fid] = set(self.rng.sample(range(1, record.m + 1), count))
        logger.debug(f"Corrupting {count} of {record.m} blocks of {record.fid.hex()}")

    def _reader(self, record: FileRecord) -> Reader:
        damaged = self.corrupted.get(record.fid, set())

        def reader(i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
            block, tag, proof = record.read(i)
            if i in damaged:
                block = _flip(block, record.segment_bytes)
            return block, tag, proof

        return reader

    def read(self, record: FileRecord, i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
        return self._reader(record)(i)

    def challenge(self, record: FileRecord, chal: Challenge) -> Union[StorageProofI, StorageProofII]:
        return record.prove(chal, self._reader(record))


class TamperChallengedBehavior(ServerBehavior):
    """Damages exactly one challenged block in every audit response."""

    name = "tamper-challenged"

    def __init__(self, rng: Optional[random.Random] = None):
        self.rng = rng or random.Random()

    def challenge(self, record: FileRecord, chal: Challenge) -> Union[StorageProofI, StorageProofII]:
        victim = self.rng.choice(chal.indices)

        def reader(i: int) -> Tuple[Block, bytes, Optional[SkipListProof]]:
            block, tag, proof = record.read(i)
            return (_flip(block, record.segment_bytes) if i == victim else block), tag, proof

        return record.prove(chal, reader)


BEHAVIORS = (
    "honest",
    "drop-update",
    "misplace-update",
    "partial-update",
    "stale-replay",
    "corrupt",
    "tamper-challenged",
)


def make_behavior(name: str = "honest", beta: float = 0.0, seed: Optional[int] = None) -> ServerBehavior:
    rng = random.Random(seed)
    factories: Dict[str, Callable[[], ServerBehavior]] = {
        "honest": ServerBehavior,
        "drop-update": DropUpdateBehavior,
        "misplace-update": MisplaceUpdateBehavior,
        "partial-update": PartialUpdateBehavior,
        "stale-replay": StaleReplayBehavior,
        "corrupt": lambda: CorruptFractionBehavior(beta, rng),
        "tamper-challenged": lambda: TamperChallengedBehavior(rng),
    }
    try:
        return factories[name]()
    except KeyError as exc:
        raise ConfigError(f"Unknown server behavior '{name}'") from exc


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------


class StorageService:
    """Protocol handlers over the set of stored files."""

    def __init__(
        self,
        config: Optional[ServiceConfig] = None,
        behavior: Optional[ServerBehavior] = None,
        trace: Optional[LockTrace] = None,
        fault_hook: Optional[FaultHook] = None,
    ):
        self.config = config or ServiceConfig(data_dir=None)
        self.behavior = behavior or ServerBehavior()
        self.trace = trace
        self._fault_hook = fault_hook
        self._files: Dict[bytes, FileRecord] = {}
        self._reserved: Set[bytes] = set()
        self._registry_lock = threading.Lock()
        self._handlers: Dict[int, Callable[[bytes, bytes], bytes]] = {
            MessageType.UPLOAD: self._on_upload,
            MessageType.READ: self._on_read,
            MessageType.UPDATE: self._on_update,
            MessageType.CHALLENGE: self._on_challenge,
        }
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._recover()

    @property
    def data_dir(self) -> Optional[Path]:
        return Path(self.config.data_dir) if self.config.data_dir else None

    def fids(self) -> List[bytes]:
        with self._registry_lock:
            return list(self._files)

    def record(self, fid: bytes) -> FileRecord:
        with self._registry_lock:
            record = self._files.get(fid)
        if record is None:
            raise UnknownFid(f"No file with fid {fid.hex()}")
        return record

    def _recover(self) -> None:
        for directory in sorted(path for path in self.data_dir.iterdir() if path.is_dir()):
            store = FileStore(directory, self._fault_hook)
            if not store.exists():
                logger.warning(f"Removing incomplete upload {directory.name}")
                shutil.rmtree(directory)
                continue
            try:
                fid = bytes.fromhex(directory.name)
                manifest, parts, pending = store.load()
                record = FileRecord.from_parts(fid, manifest, parts, FileLock(directory.name, self.trace))
                for journal_record in pending:
                    request = UpdateRequest.parse(journal_record.payload)
                    record.apply(record.to_message(request))
            except (DscsError, ValueError, KeyError, OSError) as exc:
                logger.error(f"Could not recover {directory.name}: {exc}", exc_info=True)
                store.close()
                continue
            record.store = store
            self._files[fid] = record
            if pending:
                logger.info(f"Recovered {directory.name}: replayed {len(pending)} journal records, m={record.m}")
            else:
                logger.info(f"Recovered {directory.name}: m={record.m}")

    def close(self) -> None:
        """Fold outstanding journal records into snapshots and close the stores."""
        for record in list(self._files.values()):
            if record.store is None:
                continue
            try:
                with record.lock.exclusive("checkpoint"):
                    if record.store.pending:
                        record.store.checkpoint(record.meta(), record.parts())
            except Busy:
                logger.warning(f"{record.fid.hex()} busy at shutdown; its journal will be replayed")
            record.store.close()

    # -- operations --------------------------------------------------------

    def handle_upload(self, fid: bytes, request: UploadRequest) -> int:
        if not fid:
            raise MalformedMessage("Upload needs a fid")
        record = FileRecord.from_upload(fid, request, FileLock(fid.hex(), self.trace))
        with self._registry_lock:
            if fid in self._files or fid in self._reserved:
                raise DuplicateFid(f"fid {fid.hex()} is already stored")
            self._reserved.add(fid)
        try:
            if self.data_dir is not None:
                store = FileStore(self.data_dir / fid.hex(), self._fault_hook)
                store.create(record.meta(), record.parts())
                record.store = store
            self.behavior.after_upload(record)
            with self._registry_lock:
                self._files[fid] = record
        finally:
            with self._registry_lock:
                self._reserved.discard(fid)
        logger.info(f"Stored {request.protocol.label} file {fid.hex()} with {record.m} blocks")
        return record.m

    def handle_read(self, fid: bytes, i: int) -> ReadReply:
        record = self.record(fid)
        with record.lock.shared("read"):
            block, tag, proof = self.behavior.read(record, i)
            raw = record.layout.block_to_bytes(block) if block else b""
        logger.debug(f"Read {i} of {fid.hex()}")
        return ReadReply(block=raw, tag=tag, proof=proof)

    def handle_update(self, fid: bytes, request: UpdateRequest) -> UpdateReply:
        record = self.record(fid)
        with record.lock.exclusive("update"):
            message = record.to_message(request)
            record.check(message)
            reply = self.behavior.update(record, message, lambda msg: self._commit(record, msg))
        logger.info(f"Applied {request.kind.name.lower()} at {request.index} to {fid.hex()}; m={reply.m}")
        return reply

    def _commit(self, record: FileRecord, message: UpdateMessage) -> UpdateReply:
        record.check(message)
        store = record.store
        if store is not None:
            try:
                store.log(record.to_request(message).to_bytes())
            except OSError as exc:
                logger.error(f"Journal write failed for {record.fid.hex()}: {exc}", exc_info=True)
                raise ServiceError("Update could not be made durable") from exc
        reply = record.apply(message)
        every = self.config.checkpoint_every
        if store is not None and every and store.pending >= every:
            store.checkpoint(record.meta(), record.parts())
        return reply

    def handle_challenge(self, fid: bytes, chal: Challenge) -> Union[StorageProofI, StorageProofII]:
        record = self.record(fid)
        with record.lock.shared("audit"):
            proof = self.behavior.challenge(record, chal)
        logger.debug(f"Answered a {chal.size}-index challenge on {fid.hex()}")
        return proof

    def storage_overhead(self, fid: bytes) -> Dict[str, int]:
        record = self.record(fid)
        with record.lock.shared("read"):
            return record.overhead()

    # -- wire dispatch -----------------------------------------------------

    def dispatch(self, message: WireMessage) -> WireMessage:
        """Handle one request frame; every failure becomes an error frame."""
        try:
            handler = self._handlers.get(message.msg_type)
            if handler is None:
                raise UnknownMessageType(f"Unknown message type 0x{message.msg_type:02x}")
            payload = handler(message.fid, message.payload)
            return WireMessage(msg_type=message.msg_type, fid=message.fid, payload=payload)
        except Busy as exc:
            logger.warning(f"Busy: {exc}")
            return error_frame(message.fid, exc.code, str(exc))
        except ServiceError as exc:
            logger.info(f"Rejected 0x{message.msg_type:02x} request: {exc}")
            return error_frame(message.fid, exc.code, str(exc))
        except (DscsError, ValueError) as exc:
            logger.info(f"Malformed 0x{message.msg_type:02x} request: {exc}")
            return error_frame(message.fid, MalformedMessage.code, str(exc))
        except Exception as exc:
            logger.error(f"Handler failure: {exc}", exc_info=True)
            return error_frame(message.fid, ServiceError.code, "Internal server error")

    def _on_upload(self, fid: bytes, payload: bytes) -> bytes:
        return encode_count(self.handle_upload(fid, UploadRequest.parse(payload)))

    def _on_read(self, fid: bytes, payload: bytes) -> bytes:
        return self.handle_read(fid, decode_read(payload)).to_bytes()

    def _on_update(self, fid: bytes, payload: bytes) -> bytes:
        return self.handle_update(fid, UpdateRequest.parse(payload)).to_bytes()

    def _on_challenge(self, fid: bytes, payload: bytes) -> bytes:
        chal, end = Challenge.from_bytes(payload)
        if end != len(payload):
            raise MalformedMessage("Trailing bytes after challenge")
        proof = self.handle_challenge(fid, chal)
        return self.record(fid).encode_proof(proof)


def error_frame(fid: bytes, code: int, text: str) -> WireMessage:
    return WireMessage(msg_type=MessageType.ERROR, fid=fid, payload=ErrorReply(code, text).to_bytes())


# ---------------------------------------------------------------------------
# TCP server
# ---------------------------------------------------------------------------


class StorageServer:
    """Accept loop feeding connections to a bounded worker pool."""

    def __init__(self, service: StorageService, host: str = DEFAULT_HOST, port: int = DEFAULT_PORT, workers: int = 8):
        self.service = service
        self.host = host
        self.port = port
        self.workers = workers
        self._sock: Optional[socket.socket] = None
        self._pool: Optional[ThreadPoolExecutor] = None
        self._thread: Optional[threading.Thread] = None
        self._stop_event = threading.Event()

    @property
    def address(self) -> Tuple[str, int]:
        if self._sock is None:
            return self.host, self.port
        return self._sock.getsockname()[:2]

    def bind(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(64)
        sock.settimeout(0.2)
        self._sock = sock
        self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="dscs-conn")
        logger.info(f"Listening on {self.address[0]}:{self.address[1]} with {self.workers} workers")

    def start(self) -> None:
        """Serve from a background thread."""
        self.bind()
        self._thread = threading.Thread(target=self._accept_loop, name="dscs-accept", daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.bind()
        self._accept_loop()

    def stop(self) -> None:
        self._stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        logger.info("Server stopped")

    def _accept_loop(self) -> None:
        while not self._stop_event.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                if self._stop_event.is_set():
                    break
                raise
            self._pool.submit(self._serve_connection, conn, peer)

    def _serve_connection(self, conn: socket.socket, peer: Tuple[str, int]) -> None:
        logger.debug(f"Connection from {peer[0]}:{peer[1]}")
        conn.settimeout(1.0)
        with conn:
            while not self._stop_event.is_set():
                try:
                    message = read_message(conn)
                except socket.timeout:
                    continue
                except MalformedMessage as exc:
                    # Framing is lost; report and hang up.
                    try:
                        send_message(conn, error_frame(b"", exc.code, str(exc)))
                    except TransportError:
                        pass
                    break
                except TransportError as exc:
                    logger.debug(f"Connection from {peer[0]} dropped: {exc}")
                    break
                if message is None:
                    break
                try:
                    send_message(conn, self.service.dispatch(message))
                except TransportError as exc:
                    logger.debug(f"Reply to {peer[0]} failed: {exc}")
                    break


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------

Transport = Callable[[WireMessage], WireMessage]


class RemoteStorage:
    """Blocking TCP transport: one request frame in flight at a time."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    @classmethod
    def from_address(cls, address: str, timeout: float = 30.0) -> "RemoteStorage":
        host, port = parse_listen(address)
        return cls(host, port, timeout)

    def connect(self) -> None:
        if self._sock is not None:
            return
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"Cannot reach {self.host}:{self.port}: {exc}") from exc

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self) -> "RemoteStorage":
        self.connect()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()

    def request(self, message: WireMessage) -> WireMessage:
        with self._lock:
            self.connect()
            try:
                send_message(self._sock, message)
                reply = read_message(self._sock)
            except (TransportError, socket.timeout) as exc:
                self.close()
                raise TransportError(f"Request to {self.host}:{self.port} failed: {exc}") from exc
            if reply is None:
                self.close()
                raise TransportError("Server closed the connection")
            return reply


class StorageClient:
    """Typed requests over any transport (a socket or ``StorageService.dispatch``)."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self.sent_bytes = 0
        self.received_bytes = 0

    def call(self, msg_type: MessageType, fid: bytes, payload: bytes) -> bytes:
        request = WireMessage(msg_type=msg_type, fid=fid, payload=payload)
        reply = self.transport(request)
        self.sent_bytes += len(request.payload)
        self.received_bytes += len(reply.payload)
        if reply.is_error:
            error = ErrorReply.parse(reply.payload)
            raise error_from_code(error.code, error.message)
        if reply.msg_type != msg_type:
            raise MalformedMessage(f"Reply type 0x{reply.msg_type:02x} for request 0x{msg_type:02x}")
        return reply.payload

    def upload(self, fid: bytes, request: UploadRequest) -> int:
        return decode_count(self.call(MessageType.UPLOAD, fid, request.to_bytes()))

    def read(self, fid: bytes, i: int) -> ReadReply:
        return ReadReply.parse(self.call(MessageType.READ, fid, encode_read(i)))

    def update(self, fid: bytes, request: UpdateRequest) -> UpdateReply:
        return UpdateReply.parse(self.call(MessageType.UPDATE, fid, request.to_bytes()))

    def challenge(self, fid: bytes, chal: Challenge) -> bytes:
        return self.call(MessageType.CHALLENGE, fid, chal.to_bytes())


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Storage server for audited cloud files (DSCS I and DSCS II).",
    )
    parser.add_argument("--config", help="JSON config file (default: $DSCS_CONFIG).")
    parser.add_argument("--listen", help=f"host:port to bind (default: {DEFAULT_HOST}:{DEFAULT_PORT}).")
    parser.add_argument("--data-dir", help=f"Directory for stored files (default: {DEFAULT_DATA_DIR}).")
    parser.add_argument("--workers", type=int, help="Connection worker threads (default: 8).")
    parser.add_argument(
        "--checkpoint-every",
        type=int,
        help="Journal records between snapshots; 0 snapshots only on shutdown (default: 64).",
    )
    parser.add_argument("--log-file", help=f"Log file (default: {DEFAULT_LOG_FILE}).")
    parser.add_argument("--log-level", help="Logging level (default: INFO).")
    parser.add_argument(
        "--behavior",
        choices=BEHAVIORS,
        default="honest",
        help="Misbehave on purpose, for auditing drills (default: honest).",
    )
    parser.add_argument("--beta", type=float, default=0.0, help="Corrupted fraction for --behavior corrupt.")
    parser.add_argument("--seed", type=int, help="Seed for misbehaving servers.")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    try:
        config = ServiceConfig.load(args.config).merged({
            "listen": args.listen,
            "data_dir": args.data_dir,
            "workers": args.workers,
            "checkpoint_every": args.checkpoint_every,
            "log_file": args.log_file,
            "log_level": args.log_level,
        })
        config.validate()
        behavior = make_behavior(args.behavior, args.beta, args.seed)
    except (ConfigError, ValueError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 2

    # Configure logging
    logging.basicConfig(
        level=getattr(logging, config.log_level.upper()),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(config.log_file),
            logging.StreamHandler()
        ]
    )
    logger.info(f"Starting storage server on {config.listen}, data in {config.data_dir}")
    if behavior.name != "honest":
        logger.warning(f"Server behavior is '{behavior.name}'; audits are expected to fail")

    service = None
    server = None
    try:
        service = StorageService(config, behavior=behavior)
        server = StorageServer(service, config.host, config.port, config.workers)
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Interrupted, shutting down")
    except Exception as e:
        logger.critical(f"Fatal error: {e}", exc_info=True)
        return 1
    finally:
        if server is not None:
            server.stop()
        if service is not None:
            service.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
