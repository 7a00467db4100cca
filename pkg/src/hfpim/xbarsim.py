"""Functional model of analog RRAM crossbar GEMV and the digital NOR datapath.

Weights are stored as offset-encoded 8-bit words (see :mod:`hfpim.quant`).
A matrix ``w`` of shape (inputs, outputs) is laid out with its columns stored
vertically: logical row ``i`` drives wordline ``i`` and every output word
spreads over 8 SLC columns or 4 MLC2 columns, least significant slice first.
Inputs stream one two's-complement bit per cycle, LSB first.
"""
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import CalibrationFailed, InvalidInput
from .quant import OFFSET, QuantVector

ARRAY_ROWS = 64
ARRAY_COLS = 128
WORD_BITS = 8
ON_OFF_RATIO = 150.0
DEFAULT_NOISE_STD = 0.025


class CellMode(enum.Enum):
    SLC = 1
    MLC2 = 2

    @property
    def bits_per_cell(self):
        return self.value

    @property
    def slices(self):
        """Columns occupied by one 8-bit word."""
        return WORD_BITS // self.value

    @property
    def max_level(self):
        return (1 << self.value) - 1

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        try:
            return cls[str(s).upper()]
        except KeyError:
            raise InvalidInput(f"unknown cell mode {s!r}") from None


def adc_bits(rows, bits_per_cell):
    """ADC resolution for full precision: ceil(log2 rows) + bits_per_cell - 1."""
    if rows < 1 or bits_per_cell not in (1, 2):
        raise InvalidInput("rows must be >= 1 and bits_per_cell 1 or 2")
    return (rows - 1).bit_length() + bits_per_cell - 1


@dataclass
class AdcModel:
    """Ideal saturating converter that counts its conversions."""

    bits: int
    conversions: int = 0
    saturated: int = 0

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise InvalidInput(f"unsupported ADC resolution {self.bits}")

    @classmethod
    def for_mode(cls, mode, rows=ARRAY_ROWS):
        return cls(adc_bits(rows, CellMode.parse(mode).bits_per_cell))

    @property
    def saturation_code(self):
        return (1 << self.bits) - 1

    def convert(self, analog):
        codes = np.rint(np.maximum(analog, 0.0))
        sat = codes > self.saturation_code
        self.conversions += analog.size
        self.saturated += int(sat.sum())
        return np.minimum(codes, self.saturation_code).astype(np.int64)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    placement: str = "per-weight"
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidInput("noise sigma must be >= 0")
        if self.placement not in ("per-weight", "per-cell"):
            raise InvalidInput(f"unknown noise placement {self.placement!r}")


@dataclass(frozen=True)
class CrossbarTile:
    """One programmed array.

    ``cells`` has shape (n_rows, n_words * slices); ``factors`` holds the
    multiplicative read deviation (1 + eta) at the cell granularity, so a
    per-weight draw is repeated across the slices of its word.
    """

    mode: CellMode
    cells: np.ndarray
    factors: np.ndarray
    row_offset: int = 0
    col_offset: int = 0
    rows: int = ARRAY_ROWS
    cols: int = ARRAY_COLS
    protected: bool = False

    @property
    def n_rows(self):
        return self.cells.shape[0]

    @property
    def n_words(self):
        return self.cells.shape[1] // self.mode.slices

    @property
    def occupied_columns(self):
        return self.cells.shape[1]

    @property
    def noise_free(self):
        return bool(np.all(self.factors == 1.0))

    def cell_position(self, row, word, bit_slice):
        """(array row, array column) of one slice of a logical weight."""
        r = row - self.row_offset
        w = word - self.col_offset
        if not (0 <= r < self.n_rows and 0 <= w < self.n_words and 0 <= bit_slice < self.mode.slices):
            raise InvalidInput(f"weight ({row}, {word}) slice {bit_slice} is not on this tile")
        return r, w * self.mode.slices + bit_slice

    def words(self):
        """Decode the stored cells back into 8-bit words."""
        s = self.mode.slices
        sl = self.cells.reshape(self.n_rows, self.n_words, s).astype(np.int64)
        weights = 1 << (self.mode.bits_per_cell * np.arange(s))
        return (sl * weights).sum(axis=2)

    def conductance(self):
        return self.cells * self.factors


def _slice_words(words, mode):
    s = mode.slices
    shifts = mode.bits_per_cell * np.arange(s, dtype=np.uint8)
    cells = (words[:, :, None] >> shifts) & mode.max_level
    return cells.reshape(words.shape[0], words.shape[1] * s).astype(np.uint8)


def program_tile(words, mode, noise=None, protected=False, row_offset=0, col_offset=0,
                 stream=(0,), rows=ARRAY_ROWS, cols=ARRAY_COLS):
    """Program a block of offset-encoded words onto one array.

    ``words`` is (n_rows, n_words) with n_rows <= ``rows`` and
    n_words * slices <= ``cols``. Protected (SLC-plan) tiles are noise free.
    Otherwise noise is drawn from a generator keyed by ``(noise.seed, *stream)``
    so every tile of a run gets its own reproducible stream.
    """
    mode = CellMode.parse(mode)
    words = np.asarray(words)
    if words.ndim == 1:
        words = words[:, None]
    if words.ndim != 2:
        raise InvalidInput("words must be a 2-D block")
    if np.issubdtype(words.dtype, np.floating) and np.any(words != np.round(words)):
        raise InvalidInput("words must be integers")
    if words.size and (words.min() < 0 or words.max() > 255):
        raise InvalidInput("words must lie in [0, 255]")
    n_rows, n_words = words.shape
    if n_rows > rows or n_words * mode.slices > cols:
        raise InvalidInput(
            f"block {n_rows}x{n_words} does not fit a {rows}x{cols} {mode.name} array")
    cells = _slice_words(words.astype(np.uint8), mode)
    noise = noise or NoiseSpec()
    if protected or noise.sigma == 0.0:
        factors = np.ones(cells.shape)
    else:
        rng = np.random.default_rng([noise.seed, *stream])
        if noise.placement == "per-weight":
            eta = rng.normal(0.0, noise.sigma, (n_rows, n_words))
            factors = np.repeat(1.0 + eta, mode.slices, axis=1)
        else:
            factors = 1.0 + rng.normal(0.0, noise.sigma, cells.shape)
    return CrossbarTile(mode, cells, factors, row_offset, col_offset, rows, cols, protected)


def program_matrix(enc, mode, noise=None, protected=False, stream=(0,),
                   rows=ARRAY_ROWS, cols=ARRAY_COLS):
    """Tile an offset-encoded matrix (inputs x outputs) onto as many arrays as needed.

    Tiles are visited row-tile major; tile ``t`` draws noise from the stream
    ``(*stream, t)``.
    """
    mode = CellMode.parse(mode)
    words = enc.words if hasattr(enc, "words") else np.asarray(enc)
    per_tile = cols // mode.slices
    if per_tile < 1:
        raise InvalidInput(f"{cols} columns cannot hold one {mode.name} word")
    n_rows, n_words = words.shape
    tiles = []
    for r0 in range(0, n_rows, rows):
        for c0 in range(0, n_words, per_tile):
            block = words[r0:r0 + rows, c0:c0 + per_tile]
            tiles.append(program_tile(block, mode, noise, protected, r0, c0,
                                      (*stream, len(tiles)), rows, cols))
    return tiles


@dataclass
class SaturationReport:
    conversions: int = 0
    saturated: int = 0
    per_tile: list = field(default_factory=list)

    @property
    def clean(self):
        return self.saturated == 0

    def __iadd__(self, other):
        self.conversions += other.conversions
        self.saturated += other.saturated
        self.per_tile.extend(other.per_tile)
        return self


def _cycle_weights(input_bits):
    w = 1 << np.arange(input_bits, dtype=np.int64)
    w[-1] = -w[-1]
    return w


def bitserial_gemv(tiles, x, adc=None, input_bits=WORD_BITS, offset=OFFSET):
    """Bit-serial ``x @ w`` over a set of tiles holding one offset-encoded matrix.

    ``x`` is a :class:`QuantVector` (or an int array) of length equal to the
    logical row count; a 2-D batch runs every vector through the same tiles.
    Returns the signed integer result and a :class:`SaturationReport`.
    """
    if not tiles:
        raise InvalidInput("no tiles given")
    xi = x.data if isinstance(x, QuantVector) else np.asarray(x)
    xi = xi.astype(np.int64)
    single = xi.ndim == 1
    if single:
        xi = xi[None, :]
    n_rows = max(t.row_offset + t.n_rows for t in tiles)
    n_words = max(t.col_offset + t.n_words for t in tiles)
    if xi.shape[1] != n_rows:
        raise InvalidInput(f"input length {xi.shape[1]} does not match {n_rows} rows")
    if xi.min(initial=0) < -(1 << (input_bits - 1)) or xi.max(initial=0) >= 1 << (input_bits - 1):
        raise InvalidInput(f"input does not fit {input_bits}-bit two's complement")
    coverage = np.zeros((n_rows, n_words), dtype=np.int64)
    for t in tiles:
        coverage[t.row_offset:t.row_offset + t.n_rows, t.col_offset:t.col_offset + t.n_words] += 1
    if np.any(coverage != 1):
        raise InvalidInput("tiles do not cover the matrix exactly once")

    # two's-complement bit planes, LSB first: (batch, input_bits, rows)
    ux = xi & ((1 << input_bits) - 1)
    planes = ((ux[:, None, :] >> np.arange(input_bits)[None, :, None]) & 1).astype(np.float64)
    cyc = _cycle_weights(input_bits)
    y = np.zeros((xi.shape[0], n_words), dtype=np.int64)
    report = SaturationReport()
    for t in tiles:
        conv = adc if adc is not None else AdcModel.for_mode(t.mode, t.rows)
        before_c, before_s = conv.conversions, conv.saturated
        g = t.conductance()
        analog = planes[:, :, t.row_offset:t.row_offset + t.n_rows] @ g
        codes = conv.convert(analog)
        s = t.mode.slices
        codes = codes.reshape(codes.shape[0], input_bits, t.n_words, s)
        slice_w = 1 << (t.mode.bits_per_cell * np.arange(s, dtype=np.int64))
        per_word = codes @ slice_w                         # (batch, bits, words)
        y[:, t.col_offset:t.col_offset + t.n_words] += np.einsum("bcw,c->bw", per_word, cyc)
        dc, ds = conv.conversions - before_c, conv.saturated - before_s
        report += SaturationReport(dc, ds, [ds])
    y -= offset * xi.sum(axis=1)[:, None]
    return (y[0] if single else y), report


# --- device noise ----------------------------------------------------------

def level_conductances(mode, on_off_ratio=ON_OFF_RATIO):
    """Equispaced normalized conductance levels in [1/on_off_ratio, 1]."""
    mode = CellMode.parse(mode)
    return np.linspace(1.0 / on_off_ratio, 1.0, mode.max_level + 1)


def bit_error_rate(sigma, mode, on_off_ratio=ON_OFF_RATIO):
    """Probability that a read ``g (1 + eta)`` lands past a neighbouring midpoint.

    Averaged over levels with a uniform prior.
    """
    g = level_conductances(mode, on_off_ratio)
    if sigma <= 0:
        return 0.0
    mids = (g[1:] + g[:-1]) / 2
    p = np.zeros(len(g))
    p[1:] += ndtr((mids / g[1:] - 1.0) / sigma)          # falls below lower boundary
    p[:-1] += 1.0 - ndtr((mids / g[:-1] - 1.0) / sigma)  # rises above upper boundary
    return float(p.mean())


def calibrate_sigma(target_ber, mode, on_off_ratio=ON_OFF_RATIO, hi=2.0, tol=1e-9):
    """Noise std whose bit error rate equals ``target_ber`` (bisection)."""
    if not 0 < target_ber < 0.5:
        raise InvalidInput("target BER must lie in (0, 0.5)")
    lo, ber_lo = 0.0, 0.0
    ber_hi = bit_error_rate(hi, mode, on_off_ratio)
    if ber_hi < target_ber:
        raise CalibrationFailed(f"BER {ber_hi:.4f} at sigma={hi} is below target {target_ber}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        ber = bit_error_rate(mid, mode, on_off_ratio)
        assert ber_lo <= ber <= ber_hi, "BER is not monotone in sigma"
        if abs(ber - target_ber) <= tol:
            return mid
        if ber < target_ber:
            lo, ber_lo = mid, ber
        else:
            hi, ber_hi = mid, ber
    raise CalibrationFailed(f"bisection did not reach BER tolerance {tol}")


def apply_weight_noise(w, sigma=DEFAULT_NOISE_STD, seed=0):
    """``w * (1 + eta)`` with ``eta ~ N(0, sigma^2)`` drawn element-wise."""
    if not sigma >= 0:
        raise InvalidInput("sigma must be >= 0")
    w = np.asarray(w, dtype=np.float64)
    if sigma == 0:
        return w.copy()
    rng = np.random.default_rng(seed)
    return w * (1.0 + rng.normal(0.0, sigma, w.shape))


# --- digital NOR datapath --------------------------------------------------

NOR_PER_INT8_PRODUCT = 64
COLUMNS_PER_NOR = 3
CYCLES_PER_ROW_OP = 5  # four write cycles and one read cycle


@dataclass(frozen=True)
class NorCost:
    nor_ops: int
    columns: int
    cycles: int

    @classmethod
    def for_outputs(cls, n=1, bits_a=8, bits_b=8):
        nors = bits_a * bits_b
        return cls(nors * n, nors * COLUMNS_PER_NOR, CYCLES_PER_ROW_OP)


class _Netlist:
    def __init__(self):
        self.gates = 0

    def nor(self, a, b):
        self.gates += 1
        return ~(a | b)

    def inv(self, a):
        return self.nor(a, a)

    def full_adder(self, a, b, c):
        g1 = self.nor(a, b)
        g2 = self.nor(a, g1)
        g3 = self.nor(b, g1)
        g4 = self.nor(g2, g3)        # xnor(a, b)
        g5 = self.nor(g4, c)
        g6 = self.nor(g4, g5)
        g7 = self.nor(c, g5)
        s = self.nor(g6, g7)
        carry = self.nor(g1, g5)
        return s, carry


def _bits(v, n):
    return [((v >> i) & 1).astype(bool) for i in range(n)]


def nor_multiply(a, b, signed=False):
    """Multiply 8-bit operands with an array multiplier built only from NOR gates.

    Unsigned operands lie in [0, 255]; with ``signed`` they are INT8 and get
    sign-extended to a 16-bit truncated multiplier. Accepts scalars or arrays.
    The returned cost is the fixed per-output accounting of the digital PIM
    (64 NORs over 3 columns each, 5 cycles per row operation); the number of
    gates actually evaluated is available as ``nor_multiply.last_gate_count``.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    lo, hi = (-128, 127) if signed else (0, 255)
    if a.min(initial=lo) < lo or a.max(initial=lo) > hi or b.min(initial=lo) < lo or b.max(initial=lo) > hi:
        raise InvalidInput(f"operands must lie in [{lo}, {hi}]")
    width = 16
    a_bits = _bits(a & 0xFFFF, width if signed else 8)
    b_bits = _bits(b & 0xFFFF, width if signed else 8)
    net = _Netlist()
    shape = np.broadcast(a, b).shape
    zero = np.zeros(shape, dtype=bool)
    na = [net.inv(x) for x in a_bits]
    nb = [net.inv(x) for x in b_bits]
    acc = [zero] * width
    for j, bj in enumerate(nb):
        if j >= width:
            break
        carry = zero
        for i in range(width - j):
            pp = net.nor(na[i], bj) if i < len(na) else zero   # a_i AND b_j
            acc[i + j], carry = net.full_adder(acc[i + j], pp, carry)
    out = np.zeros(shape, dtype=np.int64)
    for i, bit in enumerate(acc):
        out |= bit.astype(np.int64) << i
    if signed:
        out = np.where(out >= 1 << 15, out - (1 << 16), out)
    nor_multiply.last_gate_count = net.gates
    n = int(np.prod(shape)) if shape else 1
    return (out if shape else int(out)), NorCost.for_outputs(n)


nor_multiply.last_gate_count = 0


def sfu_balance(arrays, row_bits, nor_per_output=NOR_PER_INT8_PRODUCT,
                columns_per_nor=COLUMNS_PER_NOR, cycles_per_op=CYCLES_PER_ROW_OP):
    """Products per cycle a digital module sustains, which the SFU must match."""
    if arrays < 1 or row_bits < 1:
        raise InvalidInput("arrays and row_bits must be positive")
    return (arrays * row_bits) // (nor_per_output * columns_per_nor * cycles_per_op)
