"""Tests for storage_service.py: configuration, locking, persistence and the TCP server."""
import json
import random
import shutil
import socket
import threading

import pytest

import dscs1
import dscs2
from audit_cli import audit_file, outsource_file, read_block, update_block
from auth_skiplist import UpdateType
from errors import (
    AppendOnly,
    Busy,
    ConfigError,
    CountMismatch,
    DuplicateFid,
    IndexOutOfRange,
    MalformedMessage,
    ServiceError,
    UnknownFid,
    UnknownMessageType,
)
from storage_service import (
    JOURNAL_NAME,
    MANIFEST_NAME,
    FileLock,
    Journal,
    JournalRecord,
    LockTrace,
    RemoteStorage,
    ServiceConfig,
    StorageClient,
    StorageServer,
    StorageService,
    main,
    make_behavior,
    parse_listen,
)
from wire import (
    ErrorReply,
    MessageType,
    Protocol,
    UpdateKind,
    UpdateRequest,
    UploadRequest,
    WireMessage,
    read_message,
)


class CrashAt(Exception):
    """Raised by the fault hook to stop the server mid-operation."""


class FaultHook:
    """Raises CrashAt the first time ``stage`` is reached after arming."""

    def __init__(self):
        self.stage = None
        self.seen = []

    def arm(self, stage):
        self.stage = stage

    def __call__(self, stage):
        self.seen.append(stage)
        if stage == self.stage:
            self.stage = None
            raise CrashAt(stage)


def upload_request(state, data, rng):
    """DSCS I upload payload without sending it."""
    bundle = dscs1.outsource(data, state, rng)
    layout = state.layout
    return bundle.fid, UploadRequest(
        protocol=Protocol.DSCS1,
        segment_bytes=layout.segment_bytes,
        public_key=bundle.pk.to_bytes(),
        blocks=[layout.block_to_bytes(block) for block in bundle.blocks],
        tags=bundle.tags,
        skiplist=bundle.skiplist.to_bytes(),
    )


def crash(service):
    """Drop the service without checkpointing, as a killed process would."""
    for fid in service.fids():
        store = service.record(fid).store
        if store is not None:
            store.close()


def persistent(directory, **kwargs):
    return StorageService(ServiceConfig(data_dir=str(directory), **kwargs.pop("config", {})), **kwargs)


class TestServiceConfig:
    """Tests for configuration loading."""

    def test_defaults(self):
        config = ServiceConfig.load(environ={})
        assert config.listen == "127.0.0.1:7300"
        assert config.checkpoint_every == 64

    def test_file_then_environment(self, temp_dir):
        path = temp_dir / "server.json"
        path.write_text(json.dumps({"listen": "0.0.0.0:9000", "workers": 3, "data_dir": "files"}))
        config = ServiceConfig.load(path, environ={"DSCS_WORKERS": "5"})
        assert (config.host, config.port) == ("0.0.0.0", 9000)
        assert config.workers == 5
        assert config.data_dir == "files"

    def test_config_from_environment_path(self, temp_dir):
        path = temp_dir / "server.json"
        path.write_text(json.dumps({"checkpoint_every": 0}))
        config = ServiceConfig.load(environ={"DSCS_CONFIG": str(path)})
        assert config.checkpoint_every == 0

    @pytest.mark.parametrize("values", [
        {"workers": 0},
        {"port": 70000},
        {"log_level": "LOUD"},
        {"checkpoint_every": -1},
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            ServiceConfig().merged(values).validate()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="Unknown configuration key"):
            ServiceConfig().merged({"colour": "blue"})

    def test_bad_files(self, temp_dir):
        with pytest.raises(ConfigError, match="not found"):
            ServiceConfig.read_file(temp_dir / "missing.json")
        bad = temp_dir / "bad.json"
        bad.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            ServiceConfig.read_file(bad)

    def test_parse_listen(self):
        assert parse_listen("[::1]:80") == ("[::1]", 80)
        with pytest.raises(ConfigError):
            parse_listen("localhost")
        with pytest.raises(ConfigError):
            parse_listen("localhost:http")

    def test_main_rejects_bad_config(self, temp_dir, capsys):
        assert main(["--workers", "0", "--data-dir", str(temp_dir)]) == 2
        assert "Error:" in capsys.readouterr().err

    def test_unknown_behavior(self):
        with pytest.raises(ConfigError):
            make_behavior("lazy")


class TestLocking:
    """Tests for the non-blocking reader/writer lock."""

    def test_readers_share(self):
        lock = FileLock("f")
        with lock.shared():
            with lock.shared():
                pass

    def test_writer_excludes(self):
        lock = FileLock("f")
        with lock.exclusive():
            with pytest.raises(Busy):
                with lock.shared():
                    pass
            with pytest.raises(Busy):
                with lock.exclusive():
                    pass
        with lock.shared():
            with pytest.raises(Busy):
                with lock.exclusive():
                    pass

    def test_trace_flags_overlap(self):
        trace = LockTrace()
        trace.record("f", "update", "exclusive", "begin")
        trace.record("f", "audit", "shared", "begin")
        trace.record("f", "audit", "shared", "end")
        trace.record("f", "update", "exclusive", "end")
        assert len(trace.violations()) == 1

    def test_trace_clean(self):
        trace = LockTrace()
        lock = FileLock("f", trace)
        with lock.shared("audit"):
            pass
        with lock.exclusive("update"):
            pass
        assert len(trace.events) == 4
        assert trace.violations() == []


class TestDispatch:
    """Tests for request handling and error frames."""

    def test_upload_read_audit(self, client, dscs1_state, rng, make_data):
        m = outsource_file(client, dscs1_state, make_data(rng, 50), rng)
        assert m == dscs1_state.pk.m
        assert read_block(client, dscs1_state, 2)[1]
        assert audit_file(client, dscs1_state, 3, rng).accepted

    def test_unknown_fid(self, client):
        with pytest.raises(UnknownFid):
            client.read(b"\xaa\xbb", 1)

    def test_duplicate_fid(self, client, dscs1_state, rng, make_data):
        fid, request = upload_request(dscs1_state, make_data(rng, 20), rng)
        client.upload(fid, request)
        with pytest.raises(DuplicateFid):
            client.upload(fid, request)

    def test_count_mismatch(self, client, dscs1_state, rng, make_data):
        fid, request = upload_request(dscs1_state, make_data(rng, 20), rng)
        request.tags = request.tags[:-1]
        with pytest.raises(CountMismatch):
            client.upload(fid, request)

    def test_fid_must_be_public_prime(self, client, dscs1_state, rng, make_data):
        _, request = upload_request(dscs1_state, make_data(rng, 20), rng)
        with pytest.raises(MalformedMessage, match="public prime"):
            client.upload(b"\x01\x02", request)

    def test_read_out_of_range(self, client, dscs1_state, rng, make_data):
        m = outsource_file(client, dscs1_state, make_data(rng, 20), rng)
        with pytest.raises(IndexOutOfRange):
            client.read(dscs1_state.fid, m + 1)

    def test_head_read(self, client, dscs1_state, rng, make_data):
        outsource_file(client, dscs1_state, make_data(rng, 20), rng)
        reply = client.read(dscs1_state.fid, 0)
        assert reply.block == b"" and reply.proof is not None

    def test_unknown_message_type(self, service):
        reply = service.dispatch(WireMessage(msg_type=0x55))
        assert reply.is_error
        assert ErrorReply.parse(reply.payload).code == UnknownMessageType.code

    def test_garbage_payload(self, service):
        reply = service.dispatch(WireMessage(msg_type=MessageType.UPLOAD, fid=b"\x01", payload=b"\x01"))
        assert ErrorReply.parse(reply.payload).code == MalformedMessage.code

    def test_busy_while_updating(self, service, client, dscs1_state, rng, make_data):
        outsource_file(client, dscs1_state, make_data(rng, 20), rng)
        with service.record(dscs1_state.fid).lock.exclusive():
            with pytest.raises(Busy):
                client.read(dscs1_state.fid, 1)

    def test_dscs2_rejects_modify(self, client, dscs2_state, rng, make_data):
        m = outsource_file(client, dscs2_state, make_data(rng, 4), rng)
        with pytest.raises(AppendOnly):
            client.update(dscs2_state.fid, UpdateRequest(UpdateKind.MODIFY, 1))
        with pytest.raises(AppendOnly):
            update_block(client, dscs2_state, UpdateType.DELETE, 1)
        assert dscs2_state.m == m

    def test_dscs2_insert_at_end_appends(self, client, dscs2_state, rng, make_data):
        m = outsource_file(client, dscs2_state, make_data(rng, 4), rng)
        message = dscs2.append((3, 4), dscs2_state)
        request = UpdateRequest(UpdateKind.INSERT, m, block=dscs2_state.layout.block_to_bytes(message.block),
                                tag=message.tag)
        assert client.update(dscs2_state.fid, request).m == m + 1

    def test_overhead(self, service, client, dscs1_state, rng, make_data):
        outsource_file(client, dscs1_state, make_data(rng, 30), rng)
        sizes = service.storage_overhead(dscs1_state.fid)
        assert set(sizes) == {"file_bytes", "skiplist_bytes", "tag_bytes", "h_list_bytes"}
        assert sizes["h_list_bytes"] > 0


class TestMisbehavingServers:
    """Audits and updates against deliberately dishonest servers."""

    @pytest.mark.parametrize("behavior", ["drop-update", "misplace-update", "partial-update"])
    def test_bad_update_caught(self, dscs1_state, rng, make_data, behavior):
        service = StorageService(behavior=make_behavior(behavior, seed=1))
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        before = dscs1_state.pk.metadata
        committed = update_block(client, dscs1_state, UpdateType.MODIFY, 2, (1, 2, 3, 4), rng)
        if behavior == "partial-update":
            # The root matches; the kept block fails the next read of position 2.
            assert committed
            assert not read_block(client, dscs1_state, 2)[1]
        else:
            assert not committed
            assert dscs1_state.pk.metadata == before
        service.close()

    def test_stale_replay_caught(self, dscs1_state, rng, make_data):
        service = StorageService(behavior=make_behavior("stale-replay"))
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        assert update_block(client, dscs1_state, UpdateType.MODIFY, 3, (4, 3, 2, 1), rng)
        assert not read_block(client, dscs1_state, 3)[1]
        service.close()

    def test_corrupt_fraction(self, dscs1_state, rng, make_data):
        service = StorageService(behavior=make_behavior("corrupt", beta=1.0, seed=2))
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        assert not audit_file(client, dscs1_state, 1, rng).accepted
        service.close()

    def test_tamper_challenged(self, dscs2_state, rng, make_data):
        service = StorageService(behavior=make_behavior("tamper-challenged", seed=3))
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs2_state, make_data(rng, 4), rng)
        assert not audit_file(client, dscs2_state, 2, rng).accepted
        service.close()


class TestPersistence:
    """Tests for snapshots, the journal and recovery."""

    def test_reopen_after_clean_close(self, temp_dir, dscs1_state, rng, make_data):
        service = persistent(temp_dir)
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        assert update_block(client, dscs1_state, UpdateType.INSERT, 1, (8, 8, 8, 8), rng)
        blocks = list(service.record(dscs1_state.fid).state.blocks)
        service.close()
        assert (temp_dir / dscs1_state.fid.hex() / JOURNAL_NAME).stat().st_size == 0

        reopened = persistent(temp_dir)
        assert reopened.fids() == [dscs1_state.fid]
        assert reopened.record(dscs1_state.fid).state.blocks == blocks
        client = StorageClient(reopened.dispatch)
        assert audit_file(client, dscs1_state, 3, rng).accepted
        reopened.close()

    def test_dscs2_reopen(self, temp_dir, dscs2_state, rng, make_data):
        service = persistent(temp_dir)
        client = StorageClient(service.dispatch)
        m = outsource_file(client, dscs2_state, make_data(rng, 4), rng)
        crash(service)
        reopened = persistent(temp_dir)
        assert reopened.record(dscs2_state.fid).m == m
        reopened.close()

    def test_journal_replay(self, temp_dir, dscs1_state, rng, make_data):
        service = persistent(temp_dir, config={"checkpoint_every": 0})
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        for i in (1, 2, 3):
            assert update_block(client, dscs1_state, UpdateType.MODIFY, i, (i, i, i, i), rng)
        blocks = list(service.record(dscs1_state.fid).state.blocks)
        crash(service)
        assert len(Journal.read(temp_dir / dscs1_state.fid.hex() / JOURNAL_NAME)) == 3

        reopened = persistent(temp_dir)
        record = reopened.record(dscs1_state.fid)
        assert record.state.blocks == blocks
        assert record.state.skiplist.metadata == dscs1_state.pk.metadata
        reopened.close()

    def test_checkpoint_every(self, temp_dir, dscs1_state, rng, make_data):
        service = persistent(temp_dir, config={"checkpoint_every": 2})
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        store = service.record(dscs1_state.fid).store
        update_block(client, dscs1_state, UpdateType.MODIFY, 1, (1, 1, 1, 1), rng)
        assert store.pending == 1
        update_block(client, dscs1_state, UpdateType.MODIFY, 1, (2, 2, 2, 2), rng)
        assert store.pending == 0
        assert store.generation == 2
        manifest = json.loads(store.manifest_path.read_text())
        assert manifest["seq"] == 2
        assert sorted(p.name for p in store.directory.glob("*.dat")) == sorted(
            f"{name}.2.dat" for name in manifest["parts"])
        service.close()

    def test_journal_write_failure(self, temp_dir, dscs1_state, rng, make_data, mocker):
        service = persistent(temp_dir)
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        blocks = list(service.record(dscs1_state.fid).state.blocks)
        mocker.patch.object(Journal, "append", side_effect=OSError("disk full"))
        with pytest.raises(ServiceError, match="durable"):
            update_block(client, dscs1_state, UpdateType.MODIFY, 1, (9, 9, 9, 9), rng)
        assert dscs1_state.pending is None
        assert service.record(dscs1_state.fid).state.blocks == blocks
        mocker.stopall()
        service.close()

    def test_incomplete_upload_removed(self, temp_dir):
        orphan = temp_dir / "abcd"
        orphan.mkdir()
        (orphan / "blocks.1.dat").write_bytes(b"\x00" * 8)
        service = persistent(temp_dir)
        assert service.fids() == []
        assert not orphan.exists()
        service.close()

    def test_record_framing(self):
        record = JournalRecord(seq=7, payload=b"payload")
        data = record.serialize()
        assert JournalRecord.deserialize(data) == (record, len(data))
        assert JournalRecord.deserialize(data[:-1]) is None
        corrupt = bytearray(data)
        corrupt[14] ^= 0xFF
        assert JournalRecord.deserialize(bytes(corrupt)) is None


class TestCrashRecovery:
    """Crashes injected at every durability step land on a consistent state."""

    @pytest.mark.parametrize("stage", [
        "journal-appended",
        "journal-synced",
        "snapshot-written",
        "manifest-replaced",
        "journal-truncated",
    ])
    @pytest.mark.parametrize("updtype", [UpdateType.INSERT, UpdateType.MODIFY, UpdateType.DELETE])
    def test_update_crash(self, temp_dir, dscs1_state, rng, make_data, stage, updtype):
        hook = FaultHook()
        service = persistent(temp_dir, config={"checkpoint_every": 1}, fault_hook=hook)
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        fid = dscs1_state.fid
        pre = list(service.record(fid).state.blocks)
        new_block = (5, 6, 7, 8)
        post = list(pre)
        if updtype is UpdateType.INSERT:
            post.insert(2, new_block)
        elif updtype is UpdateType.MODIFY:
            post[1] = new_block
        else:
            del post[1]

        hook.arm(stage)
        with pytest.raises(ServiceError):
            update_block(client, dscs1_state, updtype, 2, None if updtype is UpdateType.DELETE else new_block, rng)
        assert stage in hook.seen
        crash(service)

        reopened = persistent(temp_dir)
        record = reopened.record(fid)
        assert record.state.blocks in (pre, post)
        # Every journal record is fsynced before any of these stages.
        assert record.state.blocks == post
        assert record.state.skiplist.check_invariants() == []
        assert record.state.skiplist.tags() == record.state.tags
        assert len(record.state.pk.h_list) == record.m
        reopened.close()

    @pytest.mark.parametrize("stage,survives", [
        ("snapshot-written", False),
        ("manifest-replaced", True),
        ("upload-written", True),
    ])
    def test_upload_crash(self, temp_dir, dscs1_state, rng, make_data, stage, survives):
        hook = FaultHook()
        hook.arm(stage)
        service = persistent(temp_dir, fault_hook=hook)
        client = StorageClient(service.dispatch)
        with pytest.raises(ServiceError):
            outsource_file(client, dscs1_state, make_data(rng, 30), rng)
        crash(service)

        reopened = persistent(temp_dir)
        assert (dscs1_state.fid in reopened.fids()) is survives
        assert (temp_dir / dscs1_state.fid.hex()).exists() is survives
        if survives:
            assert reopened.record(dscs1_state.fid).m == dscs1_state.pk.m
        reopened.close()

    def test_torn_journal(self, temp_dir, dscs1_state, rng, make_data):
        """Cutting the journal anywhere leaves some prefix of the applied updates."""
        live = temp_dir / "live"
        service = persistent(live, config={"checkpoint_every": 0})
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 40), rng)
        fid = dscs1_state.fid
        prefixes = [list(service.record(fid).state.blocks)]
        for step in range(5):
            i = rng.randint(1, dscs1_state.pk.m)
            assert update_block(client, dscs1_state, UpdateType.MODIFY, i, (step,) * 4, rng)
            prefixes.append(list(service.record(fid).state.blocks))
        crash(service)

        journal = live / fid.hex() / JOURNAL_NAME
        size = journal.stat().st_size
        cuts = sorted({0, size, size - 1} | {rng.randrange(size) for _ in range(12)})
        for n, cut in enumerate(cuts):
            copy = temp_dir / f"cut-{n}"
            shutil.copytree(live, copy)
            with open(copy / fid.hex() / JOURNAL_NAME, "r+b") as handle:
                handle.truncate(cut)
            reopened = persistent(copy)
            blocks = reopened.record(fid).state.blocks
            assert blocks in prefixes
            if cut == size:
                assert blocks == prefixes[-1]
            crash(reopened)

    def test_stray_generation_removed(self, temp_dir, dscs1_state, rng, make_data):
        service = persistent(temp_dir)
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 30), rng)
        crash(service)
        directory = temp_dir / dscs1_state.fid.hex()
        (directory / "blocks.9.dat").write_bytes(b"junk")
        (directory / (MANIFEST_NAME + ".tmp")).write_bytes(b"{")
        reopened = persistent(temp_dir)
        assert not (directory / "blocks.9.dat").exists()
        assert not (directory / (MANIFEST_NAME + ".tmp")).exists()
        reopened.close()


class TestConcurrency:
    """Audits and updates racing on one file."""

    def test_no_overlapping_writes(self, dscs1_state, rng, make_data):
        trace = LockTrace()
        service = StorageService(trace=trace)
        client = StorageClient(service.dispatch)
        outsource_file(client, dscs1_state, make_data(rng, 60), rng)
        fid = dscs1_state.fid
        chal = dscs1.challenge(dscs1_state.pk, 3, random.Random(1))
        counts = {"audits": 0, "busy": 0}
        counts_lock = threading.Lock()

        def auditor():
            for _ in range(30):
                try:
                    service.handle_challenge(fid, chal)
                    service.handle_read(fid, 1)
                    with counts_lock:
                        counts["audits"] += 1
                except Busy:
                    with counts_lock:
                        counts["busy"] += 1

        threads = [threading.Thread(target=auditor) for _ in range(4)]
        for thread in threads:
            thread.start()
        updater_rng = random.Random(2)
        for step in range(20):
            try:
                update_block(client, dscs1_state, UpdateType.MODIFY, 1 + step % 3, (step,) * 4, updater_rng)
            except Busy:
                counts["busy"] += 1
        for thread in threads:
            thread.join()

        assert trace.violations() == []
        assert counts["audits"] > 0
        service.close()


@pytest.mark.integration
class TestTcpServer:
    """Round trips over a loopback socket."""

    @pytest.fixture
    def running(self):
        service = StorageService()
        server = StorageServer(service, "127.0.0.1", 0, workers=2)
        server.start()
        yield service, server
        server.stop()
        service.close()

    def test_round_trip(self, running, dscs1_state, rng, make_data):
        _, server = running
        host, port = server.address
        data = make_data(rng, 50)
        with RemoteStorage(host, port, timeout=10.0) as remote:
            client = StorageClient(remote.request)
            outsource_file(client, dscs1_state, data, rng)
            assert audit_file(client, dscs1_state, 3, rng).accepted
            assert update_block(client, dscs1_state, UpdateType.DELETE, 1, None, rng)
            assert read_block(client, dscs1_state, 1)[1]
            assert client.sent_bytes > len(data)

    def test_error_frame_over_socket(self, running):
        _, server = running
        with RemoteStorage(*server.address) as remote:
            with pytest.raises(UnknownFid):
                StorageClient(remote.request).read(b"\x01", 1)

    def test_bad_magic_closes_connection(self, running):
        _, server = running
        with socket.create_connection(server.address, timeout=5.0) as sock:
            sock.sendall(b"GET / HT")
            reply = read_message(sock)
            assert reply.is_error
            assert ErrorReply.parse(reply.payload).code == MalformedMessage.code
            assert read_message(sock) is None
