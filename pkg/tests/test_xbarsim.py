import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfpim.errors import InvalidInput
from hfpim.quant import QuantMatrix, QuantVector, offset_encode
from hfpim.xbarsim import (
    AdcModel,
    CellMode,
    NoiseSpec,
    NorCost,
    adc_bits,
    apply_weight_noise,
    bit_error_rate,
    bitserial_gemv,
    calibrate_sigma,
    nor_multiply,
    program_matrix,
    program_tile,
    sfu_balance,
)


def _enc(w):
    return offset_encode(QuantMatrix(np.asarray(w, dtype=np.int8), 1.0))


def _x(v):
    return QuantVector(np.asarray(v, dtype=np.int8), 1.0)


@pytest.mark.parametrize("rows,bpc,bits", [(64, 1, 6), (64, 2, 7), (2, 1, 1), (1, 1, 0), (128, 2, 8)])
def test_adc_bits(rows, bpc, bits):
    assert adc_bits(rows, bpc) == bits


def test_program_slc_and_mlc_slices():
    t = program_tile([[0b10110001]], CellMode.SLC)
    np.testing.assert_array_equal(t.cells[0], [1, 0, 0, 0, 1, 1, 0, 1])
    t = program_tile([[0b10110001]], CellMode.MLC2)
    np.testing.assert_array_equal(t.cells[0], [1, 0, 3, 2])
    assert t.words()[0, 0] == 0b10110001


def test_program_rejects_out_of_range():
    for bad in (256, -1):
        with pytest.raises(InvalidInput):
            program_tile([[bad]], "SLC")
    with pytest.raises(InvalidInput):
        program_tile(np.zeros((65, 1), dtype=np.uint8), "SLC")
    with pytest.raises(InvalidInput):
        program_tile(np.zeros((4, 17), dtype=np.uint8), "SLC")
    # 32 MLC words still fit 128 columns
    program_tile(np.zeros((4, 32), dtype=np.uint8), "MLC2")


def test_noise_factors():
    w = np.full((8, 4), 200, dtype=np.uint8)
    assert program_tile(w, "MLC2", NoiseSpec(0.0)).noise_free
    assert program_tile(w, "MLC2", NoiseSpec(0.1), protected=True).noise_free
    a = program_tile(w, "MLC2", NoiseSpec(0.1, seed=3), stream=(0, 5))
    b = program_tile(w, "MLC2", NoiseSpec(0.1, seed=3), stream=(0, 5))
    c = program_tile(w, "MLC2", NoiseSpec(0.1, seed=3), stream=(0, 6))
    np.testing.assert_array_equal(a.factors, b.factors)
    assert not np.array_equal(a.factors, c.factors)
    # per-weight: every slice of a word shares one factor
    f = a.factors.reshape(8, 4, 4)
    assert np.all(f == f[:, :, :1])
    p = program_tile(w, "MLC2", NoiseSpec(0.1, "per-cell", seed=3))
    assert len(np.unique(p.factors)) == p.factors.size


def test_cell_position_bijective():
    t = program_tile(np.arange(64 * 32).reshape(64, 32) % 256, "MLC2", row_offset=64, col_offset=32)
    seen = set()
    for r in range(64, 128):
        for wd in range(32, 64):
            for s in range(4):
                seen.add(t.cell_position(r, wd, s))
    assert len(seen) == 64 * 128
    with pytest.raises(InvalidInput):
        t.cell_position(0, 32, 0)


def test_small_example():
    for mode in CellMode:
        y, rep = bitserial_gemv(program_matrix(_enc([[1, 2], [3, 4]]), mode), _x([1, 1]))
        np.testing.assert_array_equal(y, [4, 6])
        assert rep.clean


def test_zero_input_under_noise():
    rng = np.random.default_rng(1)
    enc = _enc(rng.integers(-128, 128, (20, 9)))
    tiles = program_matrix(enc, "MLC2", NoiseSpec(0.2, seed=1))
    y, _ = bitserial_gemv(tiles, _x(np.zeros(20)))
    assert not y.any()


def test_exhaustive_2x2():
    vals = [-2, -1, 0, 1, 2]
    xs = np.array(list(itertools.product(vals, repeat=2)), dtype=np.int8)
    for w in itertools.product(vals, repeat=4):
        w = np.array(w).reshape(2, 2)
        oracle = xs.astype(np.int64) @ w
        enc = _enc(w)
        ys = bitserial_gemv(program_matrix(enc, "SLC"), _x(xs))[0]
        ym = bitserial_gemv(program_matrix(enc, "MLC2"), _x(xs))[0]
        np.testing.assert_array_equal(ys, oracle)
        np.testing.assert_array_equal(ym, oracle)


def test_oracle_equivalence_random():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        m, n = int(rng.integers(1, 129)), int(rng.integers(1, 65))
        w = rng.integers(-128, 128, (m, n))
        x = rng.integers(-128, 128, m)
        enc = _enc(w)
        oracle = x @ w
        for mode in CellMode:
            y, rep = bitserial_gemv(program_matrix(enc, mode), _x(x))
            if rep.clean:
                np.testing.assert_array_equal(y, oracle)


def test_conversion_count_halves():
    w = np.random.default_rng(3).integers(-128, 128, (100, 40))
    x = _x(np.random.default_rng(4).integers(-128, 128, 100))
    _, slc = bitserial_gemv(program_matrix(_enc(w), "SLC"), x)
    _, mlc = bitserial_gemv(program_matrix(_enc(w), "MLC2"), x)
    assert mlc.conversions * 2 == slc.conversions
    # 2 row tiles x 40 words x 8 slices x 8 cycles
    assert slc.conversions == 2 * 40 * 8 * 8


def test_full_tile_conversions():
    tiles = [program_tile(np.zeros((64, 16), dtype=np.uint8), "SLC")]
    adc = AdcModel.for_mode("SLC")
    bitserial_gemv(tiles, np.zeros(64, dtype=np.int64), adc, offset=0)
    assert adc.conversions == 1024


def test_saturation_reported():
    # all cells at level 3, all input bits set: column sums of 192 exceed 127
    w = np.full((64, 1), 127)
    x = np.full(64, -1)
    y, rep = bitserial_gemv(program_matrix(_enc(w), "MLC2"), _x(x))
    assert rep.saturated > 0
    assert y[0] != -64 * 127
    y, rep = bitserial_gemv(program_matrix(_enc(w), "SLC"), _x(x))
    assert rep.saturated > 0


def test_geometry_mismatch():
    tiles = program_matrix(_enc(np.ones((70, 3))), "SLC")
    with pytest.raises(InvalidInput):
        bitserial_gemv(tiles, _x(np.ones(64)))
    with pytest.raises(InvalidInput):
        bitserial_gemv(tiles[1:], _x(np.ones(70)))
    with pytest.raises(InvalidInput):
        bitserial_gemv(tiles + tiles[:1], _x(np.ones(70)))


def test_mode_equivalence_batch():
    rng = np.random.default_rng(9)
    w = rng.integers(-20, 20, (150, 33))
    x = rng.integers(-30, 30, (5, 150))
    ys = bitserial_gemv(program_matrix(_enc(w), "SLC"), _x(x))[0]
    ym = bitserial_gemv(program_matrix(_enc(w), "MLC2"), _x(x))[0]
    np.testing.assert_array_equal(ys, ym)
    np.testing.assert_array_equal(ys, x @ w)


def test_noise_perturbs_but_protected_does_not():
    rng = np.random.default_rng(5)
    w = rng.integers(-60, 60, (32, 8))
    x = rng.integers(-60, 60, 32)
    clean = x @ w
    prot = bitserial_gemv(program_matrix(_enc(w), "SLC", NoiseSpec(0.3), protected=True), _x(x))[0]
    np.testing.assert_array_equal(prot, clean)
    noisy = bitserial_gemv(program_matrix(_enc(w), "MLC2", NoiseSpec(0.3, seed=1)), _x(x))[0]
    assert not np.array_equal(noisy, clean)


def test_ber_properties():
    sig = calibrate_sigma(0.0404, CellMode.MLC2)
    assert abs(bit_error_rate(sig, CellMode.MLC2) - 0.0404) <= 1e-6
    assert calibrate_sigma(0.0404, CellMode.SLC) > sig
    assert bit_error_rate(sig, CellMode.SLC) < bit_error_rate(sig, CellMode.MLC2)
    grid = np.linspace(0, 2, 50)
    for mode in CellMode:
        b = [bit_error_rate(s, mode) for s in grid]
        assert np.all(np.diff(b) >= 0)
    assert calibrate_sigma(1e-8, "MLC2") < 0.05


def test_ber_oracle_monte_carlo():
    # independent estimate: sample reads and decode to the nearest level
    from hfpim.xbarsim import level_conductances
    sig = 0.12
    g = level_conductances("MLC2")
    rng = np.random.default_rng(0)
    lvl = rng.integers(0, 4, 400_000)
    read = g[lvl] * (1 + rng.normal(0, sig, lvl.size))
    mids = (g[1:] + g[:-1]) / 2
    decoded = np.searchsorted(mids, read)
    mc = np.mean(decoded != lvl)
    assert abs(mc - bit_error_rate(sig, "MLC2")) < 3e-3


def test_calibrate_bad_target():
    with pytest.raises(InvalidInput):
        calibrate_sigma(0.0, "MLC2")
    with pytest.raises(InvalidInput):
        calibrate_sigma(0.5, "MLC2")


def test_apply_weight_noise():
    w = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(apply_weight_noise(w, 0.0), w)
    ones = np.ones((1000, 1000))
    eta = apply_weight_noise(ones, seed=8) - 1.0
    assert abs(eta.mean()) <= 4 * 0.025 / 1000
    assert abs(eta.std() - 0.025) <= 0.01 * 0.025
    np.testing.assert_array_equal(apply_weight_noise(w, 0.1, 4), apply_weight_noise(w, 0.1, 4))


def test_nor_multiply_examples():
    assert nor_multiply(13, 11)[0] == 143
    assert nor_multiply(0, 255)[0] == 0
    assert nor_multiply(-128, -128, signed=True)[0] == 16384
    _, cost = nor_multiply(7, 9)
    assert cost == NorCost(64, 192, 5)


def test_nor_multiply_exhaustive():
    a, b = np.meshgrid(np.arange(256), np.arange(256))
    p, cost = nor_multiply(a, b)
    np.testing.assert_array_equal(p, a * b)
    assert cost.nor_ops == 64 * 65536
    assert nor_multiply.last_gate_count > 0
    p, _ = nor_multiply(a - 128, b - 128, signed=True)
    np.testing.assert_array_equal(p, (a - 128) * (b - 128))


def test_nor_rejects_range():
    with pytest.raises(InvalidInput):
        nor_multiply(256, 1)
    with pytest.raises(InvalidInput):
        nor_multiply(128, 1, signed=True)


@pytest.mark.parametrize("arrays,row_bits,out", [(256, 1024, 273), (256, 192, 51), (1, 960, 1)])
def test_sfu_balance(arrays, row_bits, out):
    assert sfu_balance(arrays, row_bits) == out


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 70), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_gemv_matches_oracle_property(m, n, seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(-128, 128, (m, n))
    x = rng.integers(-128, 128, m)
    for mode in CellMode:
        y, rep = bitserial_gemv(program_matrix(_enc(w), mode), _x(x))
        if rep.clean:
            np.testing.assert_array_equal(y, x @ w)
