"""Tests for dscs2.py: append-only storage with pairing tags."""
import random

import pytest

import dscs2
from auth_skiplist import UpdateType
from crypto_core import Challenge
from errors import AppendOnly, IndexOutOfRange, MalformedMessage


@pytest.fixture
def outsourced(dscs2_state, rng, make_data):
    """Client state and server copy of a 4-byte file (three blocks at n=2)."""
    data = make_data(rng, 4)
    bundle = dscs2.outsource2(data, dscs2_state)
    return dscs2_state, dscs2.ServerFileII.from_bundle(bundle), data


def audit(state, server, l, rng):
    chal = dscs2.challenge2(state.m, l, state.pk, rng)
    proof = server.prove2(chal)
    return dscs2.verify_audit2(chal, proof, state.pk, state.fid, state.m)


class TestOutsource2:
    """Tests for outsourcing and reads."""

    def test_block_count(self, outsourced):
        state, server, _ = outsourced
        assert state.m == server.m == 3

    def test_public_read(self, outsourced):
        state, server, _ = outsourced
        block, tag = server.auth_read2(2)
        assert dscs2.verify_read2(2, block, tag, state.pk, state.fid, state.m)
        assert not dscs2.verify_read2(2, (block[0] ^ 1, block[1]), tag, state.pk, state.fid, state.m)

    def test_secret_read(self, outsourced):
        state, server, _ = outsourced
        for i in range(1, server.m + 1):
            block, tag = server.auth_read2(i)
            assert dscs2.verify_read2_secret(i, block, tag, state)
        block, tag = server.auth_read2(1)
        assert not dscs2.verify_read2_secret(2, block, tag, state)
        assert not dscs2.verify_read2_secret(1, block, b"\x00\x01", state)

    def test_read_out_of_range(self, outsourced):
        state, server, _ = outsourced
        block, tag = server.auth_read2(1)
        assert not dscs2.verify_read2(state.m + 1, block, tag, state.pk, state.fid, state.m)
        with pytest.raises(IndexOutOfRange):
            server.auth_read2(0)

    def test_decode_file(self, outsourced):
        state, server, data = outsourced
        assert dscs2.decode_file(server.blocks, state) == data

    def test_state_bytes(self, outsourced):
        state, _, _ = outsourced
        loaded = dscs2.ClientStateII.from_bytes(state.to_bytes())
        assert (loaded.fid, loaded.m, loaded.sk) == (state.fid, state.m, state.sk)

    def test_overhead(self, outsourced):
        state, server, _ = outsourced
        sizes = server.storage_overhead(state.profile.segment_bytes)
        assert sizes["skiplist_bytes"] == sizes["h_list_bytes"] == 0
        assert dscs2.storage_overhead(server, state.profile.segment_bytes) > 0


class TestAudit2:
    """Tests for challenge2, prove2 and verify_audit2."""

    def test_honest_audit(self, outsourced, rng):
        state, server, _ = outsourced
        assert audit(state, server, 2, rng)

    def test_tampered_block_rejected(self, outsourced, rng):
        state, server, _ = outsourced
        server.blocks[0] = (server.blocks[0][0] ^ 1, server.blocks[0][1])
        chal = Challenge(pairs=((1, 5), (2, 9)))
        assert not dscs2.verify_audit2(chal, server.prove2(chal), state.pk, state.fid, state.m)

    def test_index_beyond_m_rejected(self, outsourced):
        state, server, _ = outsourced
        chal = Challenge(pairs=((3, 4),))
        proof = server.prove2(chal)
        assert not dscs2.verify_audit2(chal, proof, state.pk, state.fid, 2)

    def test_proof_bytes(self, outsourced, rng):
        state, server, _ = outsourced
        chal = dscs2.challenge2(state.m, 2, state.pk, rng)
        data = server.prove2(chal).to_bytes(state.pk.suite)
        parsed, end = dscs2.StorageProofII.from_bytes(data, state.pk.suite)
        assert end == len(data)
        assert dscs2.verify_audit2(chal, parsed, state.pk, state.fid, state.m)


class TestAppendOnly:
    """Tests for appends and rejected updates."""

    def test_append_then_audit(self, outsourced, rng):
        state, server, _ = outsourced
        message = dscs2.append((11, 22), state)
        assert state.m == 3
        assert dscs2.commit_append(state, server.perform_append(message))
        assert state.m == 4
        chal = Challenge(pairs=((4, rng.randrange(1, state.pk.suite.order)),))
        assert dscs2.verify_audit2(chal, server.prove2(chal), state.pk, state.fid, state.m)

    def test_insert_at_end_is_append(self, outsourced):
        state, _, _ = outsourced
        message = dscs2.init_update2(state, state.m, UpdateType.INSERT, (1, 2))
        assert message.block == (1, 2)
        assert state.m == 3

    @pytest.mark.parametrize("updtype,index", [
        (UpdateType.INSERT, 1),
        (UpdateType.MODIFY, 2),
        (UpdateType.DELETE, 3),
    ])
    def test_other_updates_rejected(self, outsourced, updtype, index):
        state, _, _ = outsourced
        with pytest.raises(AppendOnly):
            dscs2.init_update2(state, index, updtype, (1, 2))
        assert state.m == 3

    def test_unacknowledged_append_keeps_count(self, outsourced, rng):
        """An append that never reaches the server leaves audits in range."""
        state, server, _ = outsourced
        dscs2.append((7, 8), state)
        assert state.m == 3
        assert audit(state, server, 3, rng)
        assert not dscs2.commit_append(state, 3)
        assert not dscs2.commit_append(state, 5)
        assert state.m == 3

    def test_wrong_block_width(self, outsourced):
        _, server, _ = outsourced
        with pytest.raises(MalformedMessage):
            server.perform_append(dscs2.AppendMessage(block=(1, 2, 3), tag=b""))

    def test_proof_size_constant(self, outsourced, rng):
        """Proof bytes do not depend on m or l."""
        state, server, _ = outsourced
        suite = state.pk.suite
        sizes = set()
        for l in (1, 3):
            chal = dscs2.challenge2(state.m, l, state.pk, rng)
            sizes.add(len(server.prove2(chal).to_bytes(suite)))
        dscs2.commit_append(state, server.perform_append(dscs2.append((5, 6), state)))
        chal = dscs2.challenge2(state.m, 4, state.pk, rng)
        sizes.add(len(server.prove2(chal).to_bytes(suite)))
        assert len(sizes) == 1

    @pytest.mark.slow
    def test_many_appends(self, dscs2_state, make_data):
        """256 appends with an audit every 32."""
        rng = random.Random(83)
        server = dscs2.ServerFileII.from_bundle(dscs2.outsource2(make_data(rng, 2), dscs2_state))
        for k in range(1, 257):
            block = (rng.randrange(1 << 16), rng.randrange(1 << 16))
            dscs2.commit_append(dscs2_state, server.perform_append(dscs2.append(block, dscs2_state)))
            if k % 32 == 0:
                assert audit(dscs2_state, server, 4, rng)
        assert server.m == dscs2_state.m


class TestKeygen2:
    """Tests for keygen2 parameters."""

    def test_initial_count_kept(self, test_profile):
        state = dscs2.keygen2(test_profile, 5, 2, random.Random(21))
        assert state.m == 5
        assert len(state.fid) == test_profile.lam // 8

    @pytest.mark.parametrize("m,n", [(-1, 2), (0, 0)])
    def test_bad_arguments(self, test_profile, m, n):
        with pytest.raises(ValueError):
            dscs2.keygen2(test_profile, m, n, random.Random(1))


@pytest.mark.slow
class TestReadAgreement:
    """Public and owner-side read checks give the same verdict."""

    def test_500_instances(self, outsourced):
        state, server, _ = outsourced
        rng = random.Random(907)
        width = 1 << (8 * state.profile.segment_bytes)
        tampered_seen = 0
        for _ in range(500):
            i = rng.randrange(1, state.m + 1)
            block, tag = server.auth_read2(i)
            honest = rng.random() < 0.5
            if not honest:
                tampered_seen += 1
                kind = rng.randrange(3)
                if kind == 0:
                    j = rng.randrange(len(block))
                    block = block[:j] + ((block[j] + rng.randrange(1, width)) % width,) + block[j + 1:]
                elif kind == 1:
                    i = rng.choice([k for k in range(1, state.m + 1) if k != i])
                else:
                    other = rng.choice([k for k in range(1, state.m + 1) if server.tags[k - 1] != tag])
                    tag = server.tags[other - 1]
            public = dscs2.verify_read2(i, block, tag, state.pk, state.fid, state.m)
            secret = dscs2.verify_read2_secret(i, block, tag, state)
            assert public == secret == honest
        assert tampered_seen > 100
