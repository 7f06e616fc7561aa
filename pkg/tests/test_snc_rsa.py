"""Tests for snc_rsa.py homomorphic RSA tags."""
import random
from dataclasses import replace

import pytest

from crypto_core import random_unit
from errors import LengthMismatch, SegmentOutOfField
from snc_rsa import (
    AugmentedVector,
    SncRsaPublicKey,
    SncRsaTag,
    check_tag,
    combine,
    linear_sums,
    tag_gen,
    verify_combined,
    verify_single,
)


@pytest.fixture
def keyed(dscs1_state):
    """Trapdoor and a public key with eight h values."""
    rng = random.Random(5)
    pk = dscs1_state.pk
    pk.h_list = [random_unit(pk.N, rng) for _ in range(8)]
    return dscs1_state.trapdoor, pk


def random_block(rng, pk):
    return tuple(rng.randrange(1 << 16) for _ in range(pk.n))


class TestTagging:
    """Tests for single-block tags."""

    def test_tag_verifies(self, keyed, rng):
        sk, pk = keyed
        for i in range(1, pk.m + 1):
            block = random_block(rng, pk)
            tag = tag_gen(block, i, sk, pk, rng=rng)
            assert verify_single(block, i, tag, pk)

    def test_tag_bound_to_position(self, keyed, rng):
        sk, pk = keyed
        block = random_block(rng, pk)
        tag = tag_gen(block, 2, sk, pk, rng=rng)
        assert not verify_single(block, 3, tag, pk)
        assert not verify_single(block, 0, tag, pk)

    def test_tampered_block(self, keyed, rng):
        sk, pk = keyed
        block = random_block(rng, pk)
        tag = tag_gen(block, 1, sk, pk, rng=rng)
        changed = (block[0] ^ 1,) + block[1:]
        assert not check_tag(changed, tag, pk.h(1), pk)

    def test_segment_out_of_field(self, keyed):
        sk, pk = keyed
        with pytest.raises(SegmentOutOfField):
            tag_gen((pk.e,) + (0,) * (pk.n - 1), 1, sk, pk)

    def test_wrong_block_length(self, keyed):
        sk, pk = keyed
        with pytest.raises(LengthMismatch):
            tag_gen((1, 2), 1, sk, pk)

    def test_explicit_h_for_pending_insert(self, keyed, rng):
        """A tag made with an h value outside the key checks against that h."""
        sk, pk = keyed
        block = random_block(rng, pk)
        h = pk.h(1) * pk.h(2) % pk.N
        tag = tag_gen(block, 9, sk, pk, rng=rng, h=h)
        assert check_tag(block, tag, h, pk)

    def test_tag_bytes_fixed_width(self, keyed, rng):
        sk, pk = keyed
        tag = SncRsaTag(s=1, x=2)
        data = tag.to_bytes(pk)
        assert len(data) == 8 + pk.field_width + pk.residue_width
        assert SncRsaTag.parse(data) == tag

    def test_public_key_bytes(self, keyed):
        _, pk = keyed
        parsed, end = SncRsaPublicKey.from_bytes(pk.to_bytes())
        assert parsed == pk
        assert end == len(pk.to_bytes())


class TestCombination:
    """Tests for combine / verify_combined."""

    def _items(self, keyed, rng, indices, coeff_bits):
        sk, pk = keyed
        items = []
        for i in indices:
            block = random_block(rng, pk)
            tag = tag_gen(block, i, sk, pk, rng=rng)
            items.append((AugmentedVector.unit(block, i), tag, rng.randrange(1, 1 << coeff_bits)))
        return items

    def test_combination_verifies(self, keyed, rng):
        _, pk = keyed
        w, t = combine(self._items(keyed, rng, [1, 3, 4, 8], 16), pk)
        assert verify_combined(w, t, pk)

    def test_large_coefficients_carry(self, keyed, rng):
        """Coefficients far above e exercise the carry correction."""
        _, pk = keyed
        items = self._items(keyed, rng, [2, 5, 6], 200)
        sums = linear_sums(items)
        assert any(value >= pk.e for value in sums.data)
        w, t = combine(items, pk)
        assert verify_combined(w, t, pk)

    def test_combination_of_one(self, keyed, rng):
        _, pk = keyed
        w, t = combine(self._items(keyed, rng, [7], 8), pk)
        assert verify_combined(w, t, pk)

    def test_forged_vector_fails(self, keyed, rng):
        _, pk = keyed
        w, t = combine(self._items(keyed, rng, [1, 2], 16), pk)
        forged = AugmentedVector(data=((w.data[0] + 1) % pk.e,) + w.data[1:], coeffs=w.coeffs)
        assert not verify_combined(forged, t, pk)

    def _forged_x_runs(self, keyed, runs, seed):
        _, pk = keyed
        rng = random.Random(seed)
        w, t = combine(self._items(keyed, rng, [1, 4, 6], 16), pk)
        for _ in range(runs):
            x = random_unit(pk.N, rng)
            if x == t.x:
                continue
            assert not verify_combined(w, replace(t, x=x), pk)

    def test_forged_x_fails(self, keyed):
        self._forged_x_runs(keyed, 200, seed=17)

    @pytest.mark.slow
    def test_forged_x_fails_10000(self, keyed):
        """10,000 random residues in place of x never verify."""
        self._forged_x_runs(keyed, 10000, seed=19)

    def test_coefficient_outside_key(self, keyed, rng):
        _, pk = keyed
        w, t = combine(self._items(keyed, rng, [1], 8), pk)
        assert not verify_combined(AugmentedVector(data=w.data, coeffs={pk.m + 1: 1}), t, pk)

    def test_empty_combination(self, keyed):
        _, pk = keyed
        with pytest.raises(LengthMismatch):
            combine([], pk)

    def test_dense_form(self):
        vector = AugmentedVector(data=(4, 5), coeffs={2: 7})
        assert vector.dense(3) == [4, 5, 0, 7, 0]
