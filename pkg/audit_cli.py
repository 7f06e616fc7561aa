#!/usr/bin/env python3
"""
Command-line client and auditor for files kept on a storage server.

Subcommands::

    keygen     create a key file for DSCS I (dynamic) or DSCS II (append-only)
    outsource  tag a file and upload it
    read       fetch and verify one block, or the whole file with --all
    insert / modify / delete
               DSCS I updates, checked against the predicted skip-list root
    append     add a block at the end (both protocols)
    audit      challenge the server and verify its proof of storage
    bench      measurement harness (see bench.py)

Exit codes: 0 success, 1 verification failure, 2 usage, configuration or
transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import dscs1
import dscs2
from auth_skiplist import UpdateType
from crypto_core import SECURITY_PROFILES, Block, Challenge, default_rng, get_profile
from errors import AppendOnly, ConfigError, DscsError, MalformedMessage, StaleProof, UpdatesDisabled
from storage_service import RemoteStorage, StorageClient
from wire import Protocol, UpdateKind, UpdateRequest, UploadRequest

# Configure module logger
logger = logging.getLogger(__name__)

KEY_MAGIC = b"DSCSKEY"
DEFAULT_SERVER = "127.0.0.1:7300"
DEFAULT_KEY_FILE = "dscs.key"
DEFAULT_LOG_FILE = "dscs-audit.log"
DEFAULT_BLOCK_SIZE = 4096
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_ERROR = 2

ClientState = Union[dscs1.ClientStateI, dscs2.ClientStateII]


# ---------------------------------------------------------------------------
# Key files
# ---------------------------------------------------------------------------


def save_key(path: Union[str, Path], state: ClientState) -> None:
    """Write the key file atomically: magic, protocol byte, client state."""
    protocol = protocol_of(state)
    path = Path(path)
    staging = path.with_name(path.name + ".tmp")
    staging.write_bytes(KEY_MAGIC + bytes([protocol]) + state.to_bytes())
    os.replace(staging, path)


def load_key(path: Union[str, Path]) -> ClientState:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ConfigError(f"Key file not found: {path}") from exc
    if not data.startswith(KEY_MAGIC) or len(data) <= len(KEY_MAGIC):
        raise MalformedMessage(f"{path} is not a key file")
    protocol = data[len(KEY_MAGIC)]
    body = data[len(KEY_MAGIC) + 1:]
    if protocol == Protocol.DSCS1:
        return dscs1.ClientStateI.from_bytes(body)
    if protocol == Protocol.DSCS2:
        return dscs2.ClientStateII.from_bytes(body)
    raise MalformedMessage(f"Unknown protocol code {protocol} in {path}")


def protocol_of(state: ClientState) -> Protocol:
    return Protocol.DSCS1 if isinstance(state, dscs1.ClientStateI) else Protocol.DSCS2


# ---------------------------------------------------------------------------
# Client sessions
# ---------------------------------------------------------------------------


@dataclass
class AuditResult:
    accepted: bool
    challenge: Challenge
    proof_bytes: int


def outsource_file(
    client: StorageClient,
    state: ClientState,
    data: bytes,
    rng: Optional[random.Random] = None,
    executor=None,
) -> int:
    """Tag ``data``, upload it and return the block count the server stored."""
    layout = state.layout
    if isinstance(state, dscs1.ClientStateI):
        bundle = dscs1.outsource(data, state, rng=rng, executor=executor)
        request = UploadRequest(
            protocol=Protocol.DSCS1,
            segment_bytes=layout.segment_bytes,
            public_key=bundle.pk.to_bytes(),
            blocks=[layout.block_to_bytes(block) for block in bundle.blocks],
            tags=bundle.tags,
            skiplist=bundle.skiplist.to_bytes(),
        )
    else:
        bundle = dscs2.outsource2(data, state, executor=executor)
        request = UploadRequest(
            protocol=Protocol.DSCS2,
            segment_bytes=layout.segment_bytes,
            public_key=bundle.pk.to_bytes(),
            blocks=[layout.block_to_bytes(block) for block in bundle.blocks],
            tags=bundle.tags,
        )
    m = client.upload(bundle.fid, request)
    if m != len(bundle.blocks):
        raise MalformedMessage(f"Server stored {m} blocks, {len(bundle.blocks)} were sent")
    return m


def read_block(client: StorageClient, state: ClientState, i: int) -> Tuple[Block, bool]:
    """Fetch block i and verify it; the block is returned either way."""
    reply = client.read(state.fid, i)
    layout = state.layout
    if len(reply.block) != layout.block_bytes:
        return (), False
    block = layout.block_from_bytes(reply.block)
    if isinstance(state, dscs1.ClientStateI):
        if reply.proof is None:
            return block, False
        return block, dscs1.verify_read(i, block, reply.tag, reply.proof, state.pk)
    return block, dscs2.verify_read2(i, block, reply.tag, state.pk, state.fid, state.m)


def read_file(client: StorageClient, state: ClientState) -> Tuple[bytes, bool]:
    """Download every block, verifying each, and rebuild the original bytes."""
    m = state.pk.m if isinstance(state, dscs1.ClientStateI) else state.m
    blocks = []
    for i in range(1, m + 1):
        block, ok = read_block(client, state, i)
        if not ok:
            logger.warning(f"Block {i} failed verification")
            return b"", False
        blocks.append(block)
    if isinstance(state, dscs1.ClientStateI):
        return dscs1.decode_file(blocks, state), True
    return dscs2.decode_file(blocks, state), True


def audit_file(
    client: StorageClient,
    state: ClientState,
    l: int,
    rng: Optional[random.Random] = None,
    fid: Optional[bytes] = None,
) -> AuditResult:
    rng = rng or default_rng()
    fid = fid or state.fid
    if isinstance(state, dscs1.ClientStateI):
        chal = dscs1.challenge(state.pk, l, rng)
        payload = client.challenge(fid, chal)
        try:
            proof, end = dscs1.StorageProofI.from_bytes(payload)
            accepted = end == len(payload) and dscs1.verify_audit(chal, proof, state.pk)
        except MalformedMessage:
            accepted = False
    else:
        chal = dscs2.challenge2(state.m, l, state.pk, rng)
        payload = client.challenge(fid, chal)
        try:
            proof, end = dscs2.StorageProofII.from_bytes(payload, state.pk.suite)
            accepted = end == len(payload) and dscs2.verify_audit2(chal, proof, state.pk, fid, state.m)
        except MalformedMessage:
            accepted = False
    if not accepted:
        logger.warning(f"Audit of {fid.hex()} rejected ({chal.size} indices)")
    return AuditResult(accepted=accepted, challenge=chal, proof_bytes=len(payload))


def _fetch_for(client: StorageClient, fid: bytes):
    def fetch(j: int):
        reply = client.read(fid, j)
        if reply.proof is None:
            raise MalformedMessage(f"Read reply for position {j} carries no proof")
        return reply.tag, reply.proof

    return fetch


def update_block(
    client: StorageClient,
    state: ClientState,
    updtype: UpdateType,
    i: int,
    block: Optional[Sequence[int]] = None,
    rng: Optional[random.Random] = None,
) -> bool:
    """Run one DSCS I update end to end; True once the new root is committed."""
    if not isinstance(state, dscs1.ClientStateI):
        raise AppendOnly(f"{UpdateType(updtype).name.lower()} rejected: DSCS II files are append-only")
    try:
        message = dscs1.init_update(state, i, updtype, _fetch_for(client, state.fid), new_block=block, rng=rng)
    except StaleProof as exc:
        logger.warning(f"Refusing {UpdateType(updtype).name.lower()} at {i}: {exc}")
        return False
    layout = state.layout
    request = UpdateRequest(
        kind=UpdateKind(message.updtype),
        index=message.index,
        h=message.h,
        block=None if message.block is None else layout.block_to_bytes(message.block),
        tag=message.tag,
    )
    try:
        reply = client.update(state.fid, request)
    except Exception:
        state.pending = None
        raise
    if reply.proof is None or reply.m != state.pending.expected.m:
        logger.warning(f"Server reply to {message.updtype.name.lower()} at {i} is inconsistent")
        state.pending = None
        return False
    return dscs1.verify_update(state, reply.proof)


def append_block(
    client: StorageClient,
    state: ClientState,
    block: Sequence[int],
    rng: Optional[random.Random] = None,
) -> bool:
    if isinstance(state, dscs1.ClientStateI):
        return update_block(client, state, UpdateType.INSERT, state.pk.m, block, rng)
    message = dscs2.append(block, state)
    request = UpdateRequest(
        kind=UpdateKind.APPEND,
        index=state.m,
        block=state.layout.block_to_bytes(message.block),
        tag=message.tag,
    )
    reply = client.update(state.fid, request)
    return dscs2.commit_append(state, reply.m)


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


@dataclass
class CliSettings:
    server: str = DEFAULT_SERVER
    key_file: str = DEFAULT_KEY_FILE
    fid: Optional[str] = None
    protocol: str = "dscs1"
    profile: str = "test"

    ENV_KEYS = {
        "server": "DSCS_SERVER",
        "key_file": "DSCS_KEY_FILE",
        "fid": "DSCS_FID",
        "protocol": "DSCS_PROTOCOL",
        "profile": "DSCS_PROFILE",
    }

    @classmethod
    def resolve(
        cls,
        args: argparse.Namespace,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "CliSettings":
        """Flag, then environment, then config file, then default."""
        environ = os.environ if environ is None else environ
        file_values: Dict[str, Any] = {}
        if getattr(args, "config", None):
            try:
                file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"Cannot read config file {args.config}: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError(f"Config file {args.config} must hold a JSON object")
        settings = cls()
        for name, env_var in cls.ENV_KEYS.items():
            for value in (getattr(args, name, None), environ.get(env_var), file_values.get(name)):
                if value:
                    setattr(settings, name, str(value))
                    break
        settings.validate()
        return settings

    def validate(self) -> None:
        Protocol.from_name(self.protocol)
        get_profile(self.profile)
        if self.fid is not None:
            try:
                bytes.fromhex(self.fid)
            except ValueError as exc:
                raise ConfigError(f"fid '{self.fid}' is not hex") from exc

    @property
    def fid_bytes(self) -> Optional[bytes]:
        return bytes.fromhex(self.fid) if self.fid else None


def _connect(settings: CliSettings) -> Tuple[RemoteStorage, StorageClient]:
    remote = RemoteStorage.from_address(settings.server)
    return remote, StorageClient(remote.request)


def _block_arg(state: ClientState, path: Path) -> Block:
    raw = path.read_bytes()
    layout = state.layout
    if len(raw) > layout.block_bytes:
        raise ConfigError(f"{path} holds {len(raw)} bytes; a block holds at most {layout.block_bytes}")
    return layout.block_from_bytes(raw)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace, settings: CliSettings) -> int:
    profile = get_profile(settings.profile)
    n = max(1, args.block_size // profile.segment_bytes)
    protocol = Protocol.from_name(settings.protocol)
    if protocol is Protocol.DSCS1:
        state: ClientState = dscs1.keygen(profile, args.m, n)
        state.static = args.static
    else:
        if args.static:
            raise ConfigError("--static only applies to dscs1")
        state = dscs2.keygen2(profile, 0, n)
    save_key(settings.key_file, state)
    print(f"Wrote {protocol.label} key to {settings.key_file} (fid {state.fid.hex()}, n={n})")
    return EXIT_OK


def cmd_outsource(args: argparse.Namespace, settings: CliSettings) -> int:
    state = load_key(settings.key_file)
    data = args.file.read_bytes()
    remote, client = _connect(settings)
    with remote:
        m = outsource_file(client, state, data)
    save_key(settings.key_file, state)
    print(f"Outsourced {len(data)} bytes as {m} blocks (fid {state.fid.hex()})")
    return EXIT_OK


def cmd_read(args: argparse.Namespace, settings: CliSettings) -> int:
    state = load_key(settings.key_file)
    remote, client = _connect(settings)
    with remote:
        if args.all:
            data, ok = read_file(client, state)
        else:
            if args.index is None:
                raise ConfigError("read needs an index or --all")
            block, ok = read_block(client, state, args.index)
            data = state.layout.block_to_bytes(block) if ok else b""
    if not ok:
        print("Verification failed: the server's answer does not check out", file=sys.stderr)
        return EXIT_REJECTED
    if args.out:
        args.out.write_bytes(data)
        print(f"Verified {len(data)} bytes written to {args.out}")
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return EXIT_OK


def _run_update(settings: CliSettings, updtype: UpdateType, index: int, block: Optional[Block]) -> int:
    state = load_key(settings.key_file)
    if not isinstance(state, dscs1.ClientStateI):
        raise AppendOnly(f"{updtype.name.lower()} is not available: DSCS II files are append-only")
    if state.static:
        raise UpdatesDisabled("This file was outsourced in static mode")
    remote, client = _connect(settings)
    with remote:
        ok = update_block(client, state, updtype, index, block)
    if not ok:
        print(f"Verification failed: server proof for {updtype.name.lower()} rejected", file=sys.stderr)
        return EXIT_REJECTED
    save_key(settings.key_file, state)
    print(f"{updtype.name.capitalize()} at {index} committed; m={state.pk.m}")
    return EXIT_OK


def cmd_insert(args: argparse.Namespace, settings: CliSettings) -> int:
    state = load_key(settings.key_file)
    return _run_update(settings, UpdateType.INSERT, args.index, _block_arg(state, args.block))


def cmd_modify(args: argparse.Namespace, settings: CliSettings) -> int:
    state = load_key(settings.key_file)
    return _run_update(settings, UpdateType.MODIFY, args.index, _block_arg(state, args.block))


def cmd_delete(args: argparse.Namespace, settings: CliSettings) -> int:
    return _run_update(settings, UpdateType.DELETE, args.index, None)


def cmd_append(args: argparse.Namespace, settings: CliSettings) -> int:
    state = load_key(settings.key_file)
    if isinstance(state, dscs1.ClientStateI) and state.static:
        raise UpdatesDisabled("This file was outsourced in static mode")
    block = _block_arg(state, args.block)
    remote, client = _connect(settings)
    with remote:
        ok = append_block(client, state, block)
    if not ok:
        print("Verification failed: server did not take the append", file=sys.stderr)
        return EXIT_REJECTED
    save_key(settings.key_file, state)
    m = state.pk.m if isinstance(state, dscs1.ClientStateI) else state.m
    print(f"Appended block {m}")
    return EXIT_OK


def cmd_audit(args: argparse.Namespace, settings: CliSettings) -> int:
    state = load_key(settings.key_file)
    rng = random.Random(args.seed) if args.seed is not None else default_rng()
    remote, client = _connect(settings)
    rejected = 0
    with remote:
        for round_no in range(1, args.rounds + 1):
            result = audit_file(client, state, args.l, rng, fid=settings.fid_bytes)
            verdict = "accepted" if result.accepted else "REJECTED"
            print(f"audit {round_no}/{args.rounds}: {verdict} (l={result.challenge.size}, proof {result.proof_bytes} bytes)")
            rejected += not result.accepted
    return EXIT_REJECTED if rejected else EXIT_OK


def cmd_bench(args: argparse.Namespace, settings: CliSettings) -> int:
    import bench

    return bench.main(args.bench_args)


COMMANDS = {
    "keygen": cmd_keygen,
    "outsource": cmd_outsource,
    "read": cmd_read,
    "insert": cmd_insert,
    "modify": cmd_modify,
    "delete": cmd_delete,
    "append": cmd_append,
    "audit": cmd_audit,
    "bench": cmd_bench,
}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Outsource files to a storage server and audit them.",
    )
    parser.add_argument("--server", help=f"Server host:port (env DSCS_SERVER, default {DEFAULT_SERVER}).")
    parser.add_argument("--key-file", help=f"Client key file (env DSCS_KEY_FILE, default {DEFAULT_KEY_FILE}).")
    parser.add_argument("--fid", help="Hex fid to audit instead of the key file's own (env DSCS_FID).")
    parser.add_argument(
        "--protocol",
        choices=[p.label for p in Protocol],
        help="Protocol for keygen (env DSCS_PROTOCOL, default dscs1).",
    )
    parser.add_argument(
        "--profile",
        choices=sorted(SECURITY_PROFILES),
        help="Security profile for keygen (env DSCS_PROFILE, default test).",
    )
    parser.add_argument("--config", type=Path, help="JSON file with server/key_file/fid/protocol/profile.")
    parser.add_argument("--log-file", default=os.environ.get("DSCS_LOG_FILE", DEFAULT_LOG_FILE), help="Log file.")
    parser.add_argument("--log-level", default=os.environ.get("DSCS_LOG_LEVEL", "INFO"), help="Logging level.")

    sub = parser.add_subparsers(dest="command", required=True)

    keygen = sub.add_parser("keygen", help="Create a key file.")
    keygen.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE, help="Block size in bytes (default: 4096).")
    keygen.add_argument("--m", type=int, default=1, help="Initial h-list length for dscs1 (default: 1).")
    keygen.add_argument("--static", action="store_true", help="Disable updates for this dscs1 file.")

    outsource = sub.add_parser("outsource", help="Tag and upload a file.")
    outsource.add_argument("file", type=Path, help="File to outsource.")

    read = sub.add_parser("read", help="Fetch and verify a block or the whole file.")
    read.add_argument("index", type=int, nargs="?", help="1-based block index.")
    read.add_argument("--all", action="store_true", help="Download and verify every block, then rebuild the file.")
    read.add_argument("--out", type=Path, help="Write the verified bytes here instead of stdout.")

    for name, text in (("insert", "Insert a block after INDEX (0 = front)."), ("modify", "Replace block INDEX.")):
        update = sub.add_parser(name, help=text)
        update.add_argument("index", type=int)
        update.add_argument("block", type=Path, help="File holding the new block's bytes.")

    delete = sub.add_parser("delete", help="Delete block INDEX.")
    delete.add_argument("index", type=int)

    append = sub.add_parser("append", help="Append a block at the end.")
    append.add_argument("block", type=Path, help="File holding the block's bytes.")

    audit = sub.add_parser("audit", help="Challenge the server and verify its proof.")
    audit.add_argument("--l", type=int, default=10, help="Challenged blocks per audit (default: 10).")
    audit.add_argument("--rounds", type=int, default=1, help="Number of audits (default: 1).")
    audit.add_argument("--seed", type=int, help="Seed for reproducible challenges.")

    bench = sub.add_parser("bench", help="Run the measurement harness; options as for bench.py.")
    bench.add_argument("bench_args", nargs=argparse.REMAINDER)

    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)

    # Configure logging
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(args.log_file),
            logging.StreamHandler()
        ]
    )

    try:
        settings = CliSettings.resolve(args)
        return COMMANDS[args.command](args, settings)
    except AppendOnly as exc:
        print(f"Error: append-only file: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (DscsError, OSError, ValueError) as exc:
        logger.debug(f"{args.command} failed: {exc}", exc_info=True)
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.critical(f"Fatal error: {e}", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
