"""Tests for dscs1.py: RSA tags over an authenticated skip list."""
import random
from dataclasses import replace

import pytest

import dscs1
from auth_skiplist import UpdateType
from crypto_core import Challenge
from errors import ExtractionStalled, IndexOutOfRange, StaleProof, UpdatesDisabled


@pytest.fixture
def outsourced(dscs1_state, rng, make_data):
    """Client state plus honest server copy of a 60-byte file."""
    data = make_data(rng, 60)
    bundle = dscs1.outsource(data, dscs1_state, rng)
    return dscs1_state, dscs1.ServerFileI.from_bundle(bundle), data


@pytest.fixture(scope="module")
def wide_keys(test_profile):
    """n = 2048 two-byte segments, i.e. 4 KB blocks."""
    return dscs1.keygen(test_profile, 1, 2048, random.Random(71)).to_bytes()


def fetch_from(server):
    def fetch(j):
        _, tag, proof = server.auth_read(j)
        return tag, proof
    return fetch


def flipped(block):
    return (block[0] ^ 1,) + tuple(block[1:])


def tampering_reader(server):
    """Reader that corrupts one segment of the first block it is asked for."""
    state = {"done": False}

    def reader(i):
        block, tag, proof = server.auth_read(i)
        if not state["done"]:
            state["done"] = True
            block = flipped(block)
        return block, tag, proof
    return reader


def do_update(state, server, i, updtype, block, rng):
    message = dscs1.init_update(state, i, updtype, fetch_from(server), block, rng)
    return dscs1.verify_update(state, server.perform_update(message))


class TestOutsource:
    """Tests for keygen, outsourcing and authenticated reads."""

    def test_keygen_needs_blocks(self, test_profile):
        with pytest.raises(ValueError):
            dscs1.keygen(test_profile, 0, 4)

    def test_fid_is_public_prime(self, dscs1_state):
        assert int.from_bytes(dscs1_state.fid, "big") == dscs1_state.pk.e

    def test_every_block_reads(self, outsourced):
        state, server, _ = outsourced
        assert state.pk.m == server.m
        for i in range(1, server.m + 1):
            block, tag, proof = server.auth_read(i)
            assert dscs1.verify_read(i, block, tag, proof, state.pk)

    def test_tampered_read_fails(self, outsourced):
        state, server, _ = outsourced
        block, tag, proof = server.auth_read(2)
        assert not dscs1.verify_read(2, flipped(block), tag, proof, state.pk)
        assert not dscs1.verify_read(3, block, tag, proof, state.pk)

    def test_head_read(self, outsourced):
        _, server, _ = outsourced
        block, tag, _ = server.auth_read(0)
        assert block == () and tag == b""

    def test_decode_file(self, outsourced):
        state, server, data = outsourced
        assert dscs1.decode_file(server.blocks, state) == data

    def test_state_bytes(self, outsourced):
        state, _, _ = outsourced
        loaded = dscs1.ClientStateI.from_bytes(state.to_bytes())
        assert loaded.pk == state.pk
        assert loaded.trapdoor.N == state.trapdoor.N
        assert loaded.profile.name == "test"

    def test_overhead(self, outsourced):
        _, server, _ = outsourced
        sizes = server.storage_overhead()
        assert sizes["file_bytes"] == server.m * 4 * 2
        assert dscs1.storage_overhead(server) > 0


class TestAudit:
    """Tests for challenge, prove and verify_audit."""

    def test_honest_audit(self, outsourced, rng):
        state, server, _ = outsourced
        for _ in range(20):
            chal = dscs1.challenge(state.pk, 4, rng)
            assert dscs1.verify_audit(chal, server.prove(chal), state.pk)

    def test_proof_bytes(self, outsourced, rng):
        state, server, _ = outsourced
        chal = dscs1.challenge(state.pk, 3, rng)
        proof = server.prove(chal)
        data = proof.to_bytes(state.pk)
        parsed, end = dscs1.StorageProofI.from_bytes(data)
        assert end == len(data)
        assert dscs1.verify_audit(chal, parsed, state.pk)

    @pytest.mark.slow
    def test_large_file_audits(self, wide_keys, make_data):
        """100 audits with l = 10 over a 64 KB file in 4 KB blocks."""
        rng = random.Random(73)
        state = dscs1.ClientStateI.from_bytes(wide_keys)
        server = dscs1.ServerFileI.from_bundle(dscs1.outsource(make_data(rng, 65536), state, rng))
        assert server.m >= 16
        for _ in range(100):
            chal = dscs1.challenge(state.pk, 10, rng)
            assert dscs1.verify_audit(chal, server.prove(chal), state.pk)

    def _tamper_runs(self, state, server, rng, runs):
        for _ in range(runs):
            chal = dscs1.challenge(state.pk, min(4, server.m), rng)
            proof = server.prove(chal, reader=tampering_reader(server))
            assert not dscs1.verify_audit(chal, proof, state.pk)

    def test_tampered_block_detected(self, outsourced, rng):
        state, server, _ = outsourced
        self._tamper_runs(state, server, rng, 50)

    @pytest.mark.slow
    def test_tampered_block_detected_many(self, outsourced, rng):
        state, server, _ = outsourced
        self._tamper_runs(state, server, rng, 1000)

    def _forged_s_runs(self, state, server, rng, runs, mocker):
        combined = mocker.spy(dscs1, "verify_combined")
        e = state.pk.e
        proof = chal = None
        for k in range(runs):
            if k % 100 == 0:
                chal = dscs1.challenge(state.pk, 4, rng)
                proof = server.prove(chal)
            forged = replace(proof, t=replace(proof.t, s=(proof.t.s + rng.randrange(1, e)) % e))
            assert not dscs1.verify_audit(chal, forged, state.pk)
        assert combined.call_count == 0

    def test_forged_s_rejected(self, outsourced, rng, mocker):
        """An altered s with honest per-index tags fails the s cross-check."""
        state, server, _ = outsourced
        self._forged_s_runs(state, server, rng, 300, mocker)

    @pytest.mark.slow
    def test_forged_s_rejected_many(self, outsourced, rng, mocker):
        state, server, _ = outsourced
        self._forged_s_runs(state, server, rng, 10000, mocker)

    def test_wrong_entry_count(self, outsourced, rng):
        state, server, _ = outsourced
        chal = dscs1.challenge(state.pk, 3, rng)
        proof = server.prove(chal)
        proof.entries = proof.entries[:-1]
        assert not dscs1.verify_audit(chal, proof, state.pk)

    def test_challenge_outside_file(self, outsourced):
        _, server, _ = outsourced
        with pytest.raises(IndexOutOfRange):
            server.prove(Challenge(pairs=((server.m + 1, 3),)))


class TestDynamicUpdates:
    """Tests for insert, modify and delete."""

    def test_modify(self, outsourced, rng):
        state, server, _ = outsourced
        new_block = (1, 2, 3, 4)
        assert do_update(state, server, 2, UpdateType.MODIFY, new_block, rng)
        block, tag, proof = server.auth_read(2)
        assert block == new_block
        assert dscs1.verify_read(2, block, tag, proof, state.pk)

    def test_insert_and_delete(self, outsourced, rng):
        state, server, _ = outsourced
        m = server.m
        assert do_update(state, server, 0, UpdateType.INSERT, (9, 9, 9, 9), rng)
        assert do_update(state, server, m + 1, UpdateType.INSERT, (7, 7, 7, 7), rng)
        assert do_update(state, server, 3, UpdateType.DELETE, None, rng)
        assert state.pk.m == server.m == m + 1
        assert state.pk.h_list == server.pk.h_list
        for _ in range(10):
            chal = dscs1.challenge(state.pk, 3, rng)
            assert dscs1.verify_audit(chal, server.prove(chal), state.pk)

    def test_static_mode(self, outsourced, rng):
        state, server, _ = outsourced
        state.static = True
        with pytest.raises(UpdatesDisabled):
            dscs1.init_update(state, 1, UpdateType.MODIFY, fetch_from(server), (1, 1, 1, 1), rng)

    def test_pending_blocks_second_update(self, outsourced, rng):
        state, server, _ = outsourced
        dscs1.init_update(state, 1, UpdateType.MODIFY, fetch_from(server), (1, 1, 1, 1), rng)
        with pytest.raises(RuntimeError):
            dscs1.init_update(state, 2, UpdateType.MODIFY, fetch_from(server), (1, 1, 1, 1), rng)

    def test_stale_anchor(self, outsourced, rng):
        state, server, _ = outsourced
        old = server.clone()
        assert do_update(state, server, 1, UpdateType.MODIFY, (5, 5, 5, 5), rng)
        with pytest.raises(StaleProof):
            dscs1.init_update(state, 1, UpdateType.MODIFY, fetch_from(old), (6, 6, 6, 6), rng)
        assert state.pending is None


class TestAdversaries:
    """Servers that answer updates or audits dishonestly."""

    def _drop(self, state, server, rng):
        i = rng.randint(1, server.m)
        message = dscs1.init_update(state, i, UpdateType.MODIFY, fetch_from(server), (3, 1, 4, 1), rng)
        assert message.index == i
        _, _, proof = server.auth_read(i)
        return dscs1.verify_update(state, proof)

    def _misplace(self, state, server, rng):
        i = rng.randint(1, server.m - 1)
        message = dscs1.init_update(state, i, UpdateType.MODIFY, fetch_from(server), (2, 7, 1, 8), rng)
        message.index = i + 1
        return dscs1.verify_update(state, server.clone().perform_update(message))

    def test_dropped_update_rejected(self, outsourced, rng):
        state, server, _ = outsourced
        before = state.pk.metadata
        for _ in range(20):
            assert not self._drop(state, server, rng)
        assert state.pk.metadata == before

    def test_misplaced_update_rejected(self, outsourced, rng):
        state, server, _ = outsourced
        for _ in range(20):
            assert not self._misplace(state, server, rng)

    @pytest.mark.slow
    def test_adversaries_many(self, outsourced, rng):
        state, server, _ = outsourced
        for _ in range(300):
            assert not self._drop(state, server, rng)
            assert not self._misplace(state, server, rng)

    def _replay(self, state, server, rng, rounds):
        for _ in range(rounds):
            old = server.clone()
            i = rng.randint(1, server.m)
            assert do_update(state, server, i, UpdateType.MODIFY, tuple(rng.randrange(1 << 16) for _ in range(4)), rng)
            chal = Challenge(pairs=((i, rng.randrange(1, state.pk.e)),))
            assert not dscs1.verify_audit(chal, old.prove(chal), state.pk)

    def test_stale_replay_rejected(self, outsourced, rng):
        state, server, _ = outsourced
        self._replay(state, server, rng, 20)

    @pytest.mark.slow
    def test_stale_replay_many(self, outsourced, rng):
        state, server, _ = outsourced
        self._replay(state, server, rng, 1000)


class TestExtraction:
    """Tests for block extraction from accepted audits."""

    @pytest.mark.parametrize("count", [1, 4, 8])
    def test_extracts_blocks(self, dscs1_state, rng, make_data, count):
        server = dscs1.ServerFileI.from_bundle(dscs1.outsource(make_data(rng, 80), dscs1_state, rng))
        indices = rng.sample(range(1, server.m + 1), count)
        blocks = dscs1.extract_blocks(server.prove, indices, dscs1_state.pk, rng)
        assert blocks == [server.blocks[i - 1] for i in sorted(indices)]

    def test_stalls_on_bad_responder(self, outsourced, rng):
        state, _, _ = outsourced
        with pytest.raises(ExtractionStalled):
            dscs1.extract_blocks(lambda chal: None, [1], state.pk, rng, max_stalls=3)

    def test_nothing_to_extract(self, outsourced):
        state, _, _ = outsourced
        with pytest.raises(ValueError):
            dscs1.extract_blocks(lambda chal: None, [], state.pk)
