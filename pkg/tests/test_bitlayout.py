import numpy as np
import pytest
from hypothesis import given, strategies as st

from tlut.bitlayout import (OpCounters, PLANE_INTERLEAVE, build_unified_layout, pack_bit_serial,
                            repack_bit_parallel_naive, repack_naive_nibbles, tile_codes,
                            tile_permutation, unpack)
from tlut.lutgemv import decode_read_offsets, valid_plans
from tlut.quantkit import (INT2_BLOCK64, INT4_BLOCK64, INT4_CHANNEL, TERNARY, QuantizedMatrix,
                           QuantScheme, quantize)
from tlut.tiler import best_tiling

import oracles
from conftest import make_model


def _qm(codes, bits=4):
    codes = np.asarray(codes, dtype=np.uint8)
    M, K = codes.shape
    s = QuantScheme(bits, "per_tensor")
    return QuantizedMatrix(M, K, s, codes, np.ones((1, 1)), np.zeros((1, 1), np.uint8))


def test_plane_extraction_example():
    p = pack_bit_serial(_qm([[0b0101, 0b0011, 0, 0]]))
    assert [p.bit(0, 0, k) for k in (0, 1)] == [1, 1]
    assert [p.bit(1, 0, k) for k in (0, 1)] == [0, 1]
    assert [p.bit(2, 0, k) for k in (0, 1)] == [1, 0]
    assert [p.bit(3, 0, k) for k in (0, 1)] == [0, 0]
    assert p.planes.shape == (4, 1)  # ceil(4/8) bytes per plane


def test_zero_planes():
    assert not pack_bit_serial(_qm(np.zeros((3, 8)))).planes.any()


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3, 4]))
def test_planes_reconstruct(seed, bits):
    codes = np.random.default_rng(seed).integers(0, 1 << bits, (16, 64))
    p = pack_bit_serial(_qm(codes, bits))
    assert np.array_equal(p.reconstruct(), codes)
    assert p.planes.shape[1] == -(-16 * 64 // 8)


def test_naive_repack_examples():
    c = OpCounters()
    assert repack_bit_parallel_naive(pack_bit_serial(_qm([[1, 2, 4, 8]])), 0, 0, c) == 0x8421
    assert repack_bit_parallel_naive(pack_bit_serial(_qm([[0, 0, 0, 0]])), 0, 0) == 0
    assert c.bit_ops == 48 and c.combine_ops == 15


def test_naive_repack_matches_oracle_word():
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 16, (4, 32))
    p = pack_bit_serial(_qm(codes))
    for m in range(4):
        for q in range(8):
            assert repack_bit_parallel_naive(p, m, q) == oracles.repack_word(codes[m, 4 * q:4 * q + 4])


def test_vectorized_naive_matches_scalar():
    groups = np.array(list(oracles.all_code_groups(4)), dtype=np.uint8)
    nib = np.array([[oracles.plane_nibble(g, i) for g in groups[::97]] for i in range(4)], np.uint8)
    words = repack_naive_nibbles(nib, 4)
    assert words.tolist() == [oracles.repack_word(g) for g in groups[::97]]


@pytest.mark.parametrize("scheme", [INT4_BLOCK64, INT2_BLOCK64, INT4_CHANNEL, TERNARY])
@pytest.mark.parametrize("shape", [(64, 64), (96, 192), (256, 256)])
def test_round_trip(hw, scheme, shape):
    q, model = make_model(*shape, scheme, hw, seed=shape[0])
    assert unpack(model) == q


def test_round_trip_256_downscaled(hw):
    q, model = make_model(256, 256, INT4_BLOCK64, hw, seed=7)
    assert unpack(model) == q
    assert model.weight_bytes == model.M_pad * model.K_pad * 4 // 8


def test_single_tile_permutation_is_bijection(hw):
    cfg = best_tiling(64, 64, hw, INT4_BLOCK64)
    perm = tile_permutation(cfg, 4)
    assert perm.shape == (cfg.m_tile, cfg.k_tile, 4)
    assert np.array_equal(np.sort(perm.ravel()), np.arange(cfg.m_tile * cfg.k_tile * 4))


def test_permutation_places_bits(hw):
    q, model = make_model(64, 128, INT4_BLOCK64, hw, seed=3)
    perm = tile_permutation(model.tiling, 4)
    Mt, Kt = model.tiling.m_tile, model.tiling.k_tile
    bits = np.unpackbits(np.frombuffer(model.tiles[0].tile_bytes, np.uint8), bitorder="little")
    codes = q.codes[:Mt, :Kt]
    for i in range(4):
        assert np.array_equal(bits[perm[:, :, i]], (codes >> i) & 1)


def test_tiles_contiguous_and_ordered(hw):
    _, model = make_model(256, 512, INT2_BLOCK64, hw)
    nm, nk = model.grid
    assert [(t.m0, t.k0) for t in model.tiles] == [
        (mi * model.tiling.m_tile, ki * model.tiling.k_tile) for mi in range(nm) for ki in range(nk)]
    assert len({len(t.tile_bytes) for t in model.tiles}) == 1


def test_decode_reads_strictly_increasing(hw):
    _, model = make_model(256, 512, INT4_BLOCK64, hw)
    assert np.all(np.diff(decode_read_offsets(model)) > 0)


def test_other_plans_stay_within_tile_order(hw):
    # a plan other than the packed one reorders reads inside a tile only
    _, model = make_model(256, 512, INT4_BLOCK64, hw)
    per_tile = len(model.tiles[0].tile_bytes) * 2
    for plan in valid_plans(model, hw):
        off = decode_read_offsets(model, plan)
        assert np.array_equal(np.sort(off), np.arange(per_tile))


def test_padding_codes_are_zero_points(hw):
    q = quantize(np.random.default_rng(0).standard_normal((40, 64)), INT4_BLOCK64)
    model = build_unified_layout(q, best_tiling(40, 64, hw, INT4_BLOCK64), hw)
    assert model.M_pad > 40
    assert np.all(tile_codes(model, 0)[40:] == 0)   # pad zero-point is 0 for asymmetric
    assert unpack(model) == q


def test_interleave_constant_is_declared():
    assert PLANE_INTERLEAVE.startswith("kd,md,plane")
