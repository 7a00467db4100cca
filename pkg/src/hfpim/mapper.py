"""Partition factors into SLC/MLC groups, tile them onto arrays and place layers on PUs.

Every static matrix is stored with inputs along the array rows: a factor
``b = diag(sigma) V^T`` (k x N) is programmed as its transpose (N rows, k
words) and ``u`` (M x k) as ``u^T`` (k rows, M words).
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .costmodel import WorkloadSpec
from .errors import InvalidInput, PlacementFailed
from .quant import offset_encode, quantize, quantize_vector
from .xbarsim import CellMode, bitserial_gemv, program_matrix


@dataclass(frozen=True)
class HardwareShape:
    pus_per_chip: int = 24
    analog_modules_per_pu: int = 24
    arrays_per_analog_module: int = 512
    array_rows: int = 64
    array_cols: int = 128
    digital_modules_per_pu: int = 8
    digital_arrays_per_module: int = 256
    digital_array_rows: int = 1024
    digital_array_cols: int = 1024

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 1:
                raise InvalidInput(f"{k} must be positive")

    @property
    def analog_arrays_per_pu(self):
        return self.analog_modules_per_pu * self.arrays_per_analog_module

    @property
    def digital_bits_per_pu(self):
        return (self.digital_modules_per_pu * self.digital_arrays_per_module
                * self.digital_array_rows * self.digital_array_cols)


@dataclass(frozen=True)
class ParallelismPlan:
    mode: str = "one-pu-per-layer"
    n: int = 1

    def __post_init__(self):
        if self.mode == "one-pu-per-layer":
            if self.n != 1:
                raise InvalidInput("one-pu-per-layer takes n = 1")
        elif self.mode in ("tensor", "pipeline"):
            if self.n < 2:
                raise InvalidInput(f"{self.mode} parallelism needs n >= 2")
        else:
            raise InvalidInput(f"unknown parallelism mode {self.mode!r}")

    @classmethod
    def parse(cls, s):
        """``"tensor(2)"``, ``"pipeline(4)"`` or ``"one-pu-per-layer"``."""
        if isinstance(s, cls):
            return s
        s = str(s).strip()
        if "(" in s and s.endswith(")"):
            mode, n = s[:-1].split("(", 1)
            try:
                return cls(mode.strip(), int(n))
            except ValueError:
                raise InvalidInput(f"bad parallelism {s!r}") from None
        return cls(s)

    def __str__(self):
        return self.mode if self.mode == "one-pu-per-layer" else f"{self.mode}({self.n})"


@dataclass(frozen=True)
class TileGeometry:
    row_offset: int
    col_offset: int
    n_rows: int
    n_words: int
    mode: CellMode

    @property
    def occupied_columns(self):
        return self.n_words * self.mode.slices


def tile_matrix(m, mode, shape=None):
    """Geometries covering a (rows, words) matrix with 64-row tiles.

    ``m`` is an offset-encoded matrix, an array, or just a ``(rows, words)``
    tuple. A tile holds 16 SLC words or 32 MLC2 words per row.
    """
    shape = shape or HardwareShape()
    mode = CellMode.parse(mode)
    if isinstance(m, tuple):
        rows, words = m
    else:
        rows, words = (m.words if hasattr(m, "words") else np.asarray(m)).shape
    cap = shape.array_cols // mode.slices
    out = []
    for r0 in range(0, rows, shape.array_rows):
        for c0 in range(0, words, cap):
            out.append(TileGeometry(r0, c0, min(shape.array_rows, rows - r0),
                                    min(cap, words - c0), mode))
    return out


def tile_count(rows, words, mode, shape=None):
    shape = shape or HardwareShape()
    cap = shape.array_cols // CellMode.parse(mode).slices
    return math.ceil(rows / shape.array_rows) * math.ceil(words / cap)


# --- SLC/MLC partition --------------------------------------------------------

@dataclass(frozen=True)
class RankGroup:
    mode: CellMode
    ranks: tuple
    b: np.ndarray   # len(ranks) x N
    u: np.ndarray   # M x len(ranks)

    @property
    def empty(self):
        return len(self.ranks) == 0

    def dense(self):
        return self.u @ self.b


def partition_by_plan(b, u, plan):
    """Split merged factors by rank into an SLC group and an MLC2 group.

    ``u_slc @ b_slc + u_mlc @ b_mlc == u @ b`` (up to float summation order).
    """
    b = np.asarray(b, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    k = b.shape[0]
    if u.shape[1] != k:
        raise InvalidInput(f"b has {k} ranks but u has {u.shape[1]}")
    if plan.rank != k:
        raise InvalidInput(f"plan covers {plan.rank} ranks, factors have {k}")
    slc = list(plan.slc_ranks)
    mlc = list(plan.mlc_ranks)
    return (RankGroup(CellMode.SLC, tuple(slc), b[slc], u[:, slc]),
            RankGroup(CellMode.MLC2, tuple(mlc), b[mlc], u[:, mlc]))


@dataclass
class ProgrammedGroup:
    """Both crossbar stages of one rank group, quantized and programmed."""

    group: RankGroup
    b_tiles: list
    u_tiles: list
    b_scale: float
    u_scale: float


def program_groups(groups, noise=None, stream=(0,), shape=None):
    """Quantize and program the ``b`` and ``u`` parts of every non-empty group.

    SLC groups are programmed noise free.
    """
    shape = shape or HardwareShape()
    out = []
    for gi, g in enumerate(groups):
        if g.empty:
            continue
        protected = g.mode == CellMode.SLC
        qb = quantize(g.b.T)      # N x k: inputs on rows
        qu = quantize(g.u.T)      # k x M
        bt = program_matrix(offset_encode(qb), g.mode, noise, protected, (*stream, gi, 0),
                            shape.array_rows, shape.array_cols)
        ut = program_matrix(offset_encode(qu), g.mode, noise, protected, (*stream, gi, 1),
                            shape.array_rows, shape.array_cols)
        out.append(ProgrammedGroup(g, bt, ut, qb.scale, qu.scale))
    return out


def crossbar_forward(programmed, x):
    """``W x`` for a batch of rows ``x`` through the programmed groups.

    Inputs and the rank-space intermediate are re-quantized to INT8; group
    results are summed digitally. Returns (y, conversions, saturations).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = None
    conv = sat = 0
    qx = quantize_vector(x)
    for pg in programmed:
        z, r1 = bitserial_gemv(pg.b_tiles, qx)
        z = z * (qx.scale * pg.b_scale)
        qz = quantize_vector(z)
        o, r2 = bitserial_gemv(pg.u_tiles, qz)
        o = o * (qz.scale * pg.u_scale)
        y = o if y is None else y + o
        conv += r1.conversions + r2.conversions
        sat += r1.saturated + r2.saturated
    if y is None:
        raise InvalidInput("nothing programmed")
    return y, conv, sat


# --- model placement -------------------------------------------------------------

@dataclass(frozen=True)
class MatrixPlacement:
    stage: str
    part: str           # "b", "u" or "dense"
    mode: CellMode
    ranks: tuple
    tiles: tuple
    pus: tuple


@dataclass
class LayerPlacement:
    layer: int
    pus: tuple
    matrices: list = field(default_factory=list)
    digital_stages: tuple = ("attn_scores", "attn_v")
    psum_routes: list = field(default_factory=list)
    copy: int = 0
    chip: int = 0

    def arrays_per_pu(self):
        per = {p: 0 for p in self.pus}
        for m in self.matrices:
            for i, t in enumerate(m.tiles):
                per[m.pus[i % len(m.pus)]] += 1
        return per

    def to_dict(self):
        return {
            "layer": self.layer, "copy": self.copy, "chip": self.chip, "pus": list(self.pus),
            "matrices": [{"stage": m.stage, "part": m.part, "mode": m.mode.name,
                          "ranks": [m.ranks[0], m.ranks[-1] + 1] if m.ranks else [],
                          "tiles": len(m.tiles)} for m in self.matrices],
            "digital_stages": list(self.digital_stages),
            "psum_routes": [list(r) for r in self.psum_routes],
        }


def _stage_matrices(workload, rank_policy, slc_fraction, mode):
    """(stage, part, mode, ranks, rows, words) of every static matrix of a layer."""
    out = []
    for stage, n_in, n_out in workload.matrices():
        if rank_policy is None:
            out.append((stage, "dense", mode, (), n_in, n_out))
            continue
        k = (n_in * n_out) // (n_in + n_out) if rank_policy == "hard-threshold" else int(rank_policy)
        if not 1 <= k <= min(n_in, n_out):
            raise InvalidInput(f"rank {k} invalid for a {n_out}x{n_in} matrix")
        n_slc = min(k, int(math.floor(k * slc_fraction + 0.5)))
        for m, ranks in ((CellMode.SLC, tuple(range(n_slc))), (CellMode.MLC2, tuple(range(n_slc, k)))):
            if ranks:
                out.append((stage, "b", m, ranks, n_in, len(ranks)))
                out.append((stage, "u", m, ranks, len(ranks), n_out))
    return out


def place_model(workload, shape=None, par=None, rank_policy="hard-threshold", slc_fraction=0.0,
                mode="MLC2"):
    """Assign every layer's static matrices to analog arrays and attention to digital modules.

    ``rank_policy`` is ``"hard-threshold"``, an explicit rank, or ``None`` for
    dense matrices stored in ``mode``. With factors, the leading
    ``slc_fraction`` of each matrix's ranks sits on SLC tiles (the actual rank
    indices come from a protection plan at programming time; only the count
    matters here). Row tiles of a layer are dealt round-robin over its PUs.
    """
    shape = shape or HardwareShape()
    par = ParallelismPlan.parse(par or "one-pu-per-layer")
    if not isinstance(workload, WorkloadSpec):
        raise InvalidInput("workload must be a WorkloadSpec")
    if not 0 <= slc_fraction <= 1:
        raise InvalidInput("slc_fraction must lie in [0, 1]")
    mode = CellMode.parse(mode)
    L = workload.layers
    if par.mode == "pipeline":
        chips = par.n
        p = shape.pus_per_chip * chips // L
        if p < 1:
            raise PlacementFailed(f"{chips} chips hold {shape.pus_per_chip * chips} PUs, "
                                  f"fewer than {L} layers", "pus")
        copies = 1
    else:
        chips = 1
        p = par.n if par.mode == "tensor" else 1
        if L * p > shape.pus_per_chip:
            raise PlacementFailed(f"{L} layers x {p} PUs exceed {shape.pus_per_chip} PUs per chip",
                                  "pus")
        copies = shape.pus_per_chip // (L * p)

    mats = _stage_matrices(workload, rank_policy, slc_fraction, mode)
    # capacity: arrays per PU
    total = 0
    layer_mats = []
    for stage, part, m, ranks, rows, words in mats:
        tiles = tile_matrix((rows, words), m, shape)
        total += len(tiles)
        layer_mats.append((stage, part, m, ranks, tiles))
    need = math.ceil(total / p)
    if need > shape.analog_arrays_per_pu:
        raise PlacementFailed(
            f"layer needs {total} arrays ({need} per PU over {p} PU(s)); a PU has "
            f"{shape.analog_arrays_per_pu}", "analog_arrays_per_pu")
    kv_bits = 2 * workload.seq_len * workload.hidden * workload.input_bits
    if math.ceil(kv_bits / p) > shape.digital_bits_per_pu:
        raise PlacementFailed("KV cache exceeds the digital module capacity", "digital_bits_per_pu")

    placements = []
    for c in range(copies):
        for layer in range(L):
            first = (c * L + layer) * p
            pus = tuple(range(first, first + p))
            lp = LayerPlacement(layer, pus, copy=c, chip=first // shape.pus_per_chip)
            for stage, part, m, ranks, tiles in layer_mats:
                # row tiles go round-robin so each PU gets a slice of the inputs
                owners = tuple(pus[(t.row_offset // shape.array_rows) % p] for t in tiles)
                lp.matrices.append(MatrixPlacement(stage, part, m, ranks, tuple(tiles), owners))
            if p > 1:
                lp.psum_routes = [(q, pus[0]) for q in pus[1:]]
            placements.append(lp)
    _check_placement(placements, shape)
    return placements


def _check_placement(placements, shape):
    for lp in placements:
        slc, mlc = {}, {}
        for m in lp.matrices:
            if m.part != "dense":
                side = slc if m.mode == CellMode.SLC else mlc
                side.setdefault((m.stage, m.part), set()).update(m.ranks)
        for key, ranks in slc.items():
            assert not ranks & mlc.get(key, set()), f"SLC rank placed on an MLC tile in {key}"
    for pu, n in arrays_used(placements).items():
        if n > shape.analog_arrays_per_pu:
            raise PlacementFailed(f"PU {pu} holds {n} arrays, budget {shape.analog_arrays_per_pu}",
                                  "analog_arrays_per_pu")


def arrays_used(placements):
    """Tile count per PU."""
    use = {}
    for lp in placements:
        for m in lp.matrices:
            for pu in m.pus:
                use[pu] = use.get(pu, 0) + 1
    return use


def model_copies(placements):
    return len({lp.copy for lp in placements})

