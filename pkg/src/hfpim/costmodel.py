"""Operation counts, energy/latency/area accounting and parallel scaling.

Energies are in pJ, times in ns, areas in mm^2. Powers in the component
table are module aggregates; per-array and per-conversion energies are
derived by dividing them over the units that draw them.
"""
import json
import math
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigError, InvalidInput

DEFAULT_TABLE = "hybrid_rram_65nm.json"
ANALOG_STAGES = ("qkv", "proj", "ffn1", "ffn2")
DIGITAL_STAGES = ("attn_scores", "attn_v")
KINDS = ("encoder", "decoder-prefill", "decoder-generate")


@dataclass(frozen=True)
class Component:
    area_mm2: float
    power_mw: float
    count: int

    def __post_init__(self):
        if self.area_mm2 < 0 or self.power_mw < 0 or self.count < 1:
            raise ConfigError("component area/power must be >= 0 and count >= 1")


@dataclass(frozen=True)
class ModuleSpec:
    per_pu: int
    arrays: int
    array_rows: int
    array_cols: int
    components: dict
    sfu_inputs: int = 0

    @property
    def area_mm2(self):
        return sum(c.area_mm2 for c in self.components.values())

    @property
    def power_mw(self):
        return sum(c.power_mw for c in self.components.values())

    def array_power_mw(self, exclude=("adc", "sfu")):
        """Power attributable to one active array (module power / array count)."""
        return sum(c.power_mw for k, c in self.components.items() if k not in exclude) / self.arrays


@dataclass(frozen=True)
class ComponentCostTable:
    analog: ModuleSpec
    digital: ModuleSpec
    clock_ghz: float = 1.0
    analog_cycle_ns: float = 100.0
    adc_rate_gsps: float = 1.28
    oci_gbps: float = 1000.0
    pcie_gbps: float = 128.0
    global_bus_gbps: float = 128.0
    aggregation_cycles: int = 24
    psum_bytes: int = 4
    pus_per_chip: int = 24
    nor_per_product: int = 64
    columns_per_nor: int = 3
    cycles_per_row_op: int = 5
    adc_bit_energy_factor: float = 2.0
    name: str = ""

    @classmethod
    def from_json(cls, path=None):
        """Load a table; ``None`` gives the packaged default."""
        try:
            if path is None:
                text = resources.files("hfpim.tables").joinpath(DEFAULT_TABLE).read_text()
            else:
                with open(path) as fh:
                    text = fh.read()
            raw = json.loads(text)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read cost table: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        try:
            mods = {}
            for kind in ("analog", "digital"):
                m = raw["modules"][kind]
                comps = {k: Component(float(c["area_mm2"]), float(c["power_mw"]), int(c["count"]))
                         for k, c in m["components"].items()}
                mods[kind] = ModuleSpec(int(m["per_pu"]), int(m["arrays"]), int(m["array_rows"]),
                                        int(m["array_cols"]), comps, int(m.get("sfu_inputs", 0)))
            scalars = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw and k not in mods}
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed cost table: {e}") from e
        t = cls(mods["analog"], mods["digital"], **scalars)
        for k in ("clock_ghz", "analog_cycle_ns", "adc_rate_gsps", "oci_gbps", "pcie_gbps"):
            if not getattr(t, k) > 0:
                raise ConfigError(f"{k} must be positive")
        return t

    # derived per-operation energies

    def adc_energy_pj(self, bits=6):
        """Energy of one conversion: per-ADC power over the sample rate, doubling per extra bit."""
        adc = self.analog.components["adc"]
        base = (adc.power_mw / adc.count) / self.adc_rate_gsps   # mW / GSps = pJ
        return base * self.adc_bit_energy_factor ** (bits - 6)

    def analog_tile_cycle_pj(self):
        """Non-ADC energy of one array for one analog read cycle."""
        return self.analog.array_power_mw() * self.analog_cycle_ns

    def digital_module_cycle_pj(self):
        """Non-SFU energy of one busy digital module for one clock cycle."""
        return sum(c.power_mw for k, c in self.digital.components.items() if k != "sfu") / self.clock_ghz

    def sfu_cycle_pj(self):
        return self.digital.components["sfu"].power_mw / self.clock_ghz

    def digital_products_per_cycle(self, bits_a=8, bits_b=8):
        """Products one digital module completes per cycle (row-parallel NOR lowering)."""
        nors = self.nor_per_product * bits_a * bits_b / 64
        return (self.digital.arrays * self.digital.array_cols) / (nors * self.columns_per_nor
                                                                  * self.cycles_per_row_op)

    @property
    def area(self):
        return {"analog_module": self.analog.area_mm2, "digital_module": self.digital.area_mm2,
                "pu": self.analog.area_mm2 * self.analog.per_pu + self.digital.area_mm2 * self.digital.per_pu}


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "encoder"
    seq_len: int = 128
    hidden: int = 768
    ffn: int = 3072
    heads: int = 12
    layers: int = 12
    input_bits: int = 8
    weight_bits: int = 8
    attn_prob_bits: int = 12
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown workload kind {self.kind!r}")
        for k in ("seq_len", "hidden", "ffn", "heads", "layers", "input_bits", "weight_bits"):
            if getattr(self, k) < 1:
                raise InvalidInput(f"{k} must be positive")

    @property
    def tokens(self):
        """Rows pushed through the static layers per pass."""
        return 1 if self.kind == "decoder-generate" else self.seq_len

    def matrices(self):
        """(stage, inputs, outputs) of the static weight matrices of one layer."""
        d, f = self.hidden, self.ffn
        return [("qkv", d, 3 * d), ("proj", d, d), ("ffn1", d, f), ("ffn2", f, d)]


PRESETS = {
    "bert-base": WorkloadSpec("encoder", 128, 768, 3072, 12, 12, name="bert-base"),
    "bert-large": WorkloadSpec("encoder", 128, 1024, 4096, 16, 24, name="bert-large"),
    "vit-base": WorkloadSpec("encoder", 197, 768, 3072, 12, 12, name="vit-base"),
    "gpt2": WorkloadSpec("decoder-generate", 1024, 768, 3072, 12, 12, name="gpt2"),
    "llama3-1b": WorkloadSpec("decoder-generate", 100, 2048, 8192, 32, 16, name="llama3-1b"),
}


def count_ops(w):
    """MACs per stage for one layer (one generated token for decoder-generate)."""
    t, d, f, ctx = w.tokens, w.hidden, w.ffn, w.seq_len
    ops = {"qkv": 3 * t * d * d, "proj": t * d * d, "ffn1": t * d * f, "ffn2": t * f * d}
    ops["attn_scores"] = t * ctx * d
    ops["attn_v"] = t * ctx * d
    return ops


def static_fraction(w):
    ops = count_ops(w)
    static = sum(ops[s] for s in ANALOG_STAGES)
    return static / sum(ops.values())


@dataclass
class StageCost:
    stage: str
    module: str            # "analog" or "digital"
    layer: int = 0
    pu: int = 0
    macs: int = 0
    conversions: int = 0
    cycles: int = 0
    energy_pj: float = 0.0
    latency_ns: float = 0.0
    arrays: int = 0
    out_elems: int = 0
    adc_busy_ns: float = 0.0

    def __post_init__(self):
        for k in ("macs", "conversions", "cycles", "energy_pj", "latency_ns", "arrays"):
            if getattr(self, k) < 0:
                raise InvalidInput(f"negative {k} in stage cost")


@dataclass
class CostReport:
    stages: list = field(default_factory=list)
    area_mm2: dict = field(default_factory=dict)
    workload: WorkloadSpec = None

    def add(self, s):
        self.stages.append(s)
        return self

    def extend(self, other):
        self.stages.extend(other.stages)
        return self

    def _sum(self, key, pred=lambda s: True):
        return sum(getattr(s, key) for s in self.stages if pred(s))

    @property
    def energy_pj(self):
        return self._sum("energy_pj")

    @property
    def latency_ns(self):
        return self._sum("latency_ns")

    @property
    def conversions(self):
        return self._sum("conversions")

    @property
    def macs(self):
        return self._sum("macs")

    def by_module(self, key="energy_pj"):
        out = {}
        for s in self.stages:
            out[s.module] = out.get(s.module, 0.0) + getattr(s, key)
        return out

    def by_pu(self, key="energy_pj"):
        out = {}
        for s in self.stages:
            out[s.pu] = out.get(s.pu, 0.0) + getattr(s, key)
        return out

    def by_stage(self, key="energy_pj"):
        out = {}
        for s in self.stages:
            out[s.stage] = out.get(s.stage, 0.0) + getattr(s, key)
        return out

    def layer_latency_ns(self, layer=0):
        return self._sum("latency_ns", lambda s: s.layer == layer)

    def check(self):
        """Rollups must equal the sum of their parts."""
        chip = self.energy_pj
        for part in (self.by_pu(), self.by_module(), self.by_stage()):
            assert math.isclose(sum(part.values()), chip, rel_tol=1e-9, abs_tol=1e-6), \
                "energy rollup does not add up"
        assert all(s.energy_pj >= 0 and s.latency_ns >= 0 for s in self.stages)
        return True

    def to_dict(self):
        self.check()
        return {
            "energy_pj": self.energy_pj,
            "latency_ns": self.latency_ns,
            "conversions": self.conversions,
            "macs": self.macs,
            "energy_by_module": self.by_module(),
            "energy_by_stage": self.by_stage(),
            "area_mm2": self.area_mm2,
        }


def _mode_bits(mode):
    name = getattr(mode, "name", str(mode)).upper()
    if name not in ("SLC", "MLC2"):
        raise InvalidInput(f"unknown cell mode {mode!r}")
    return 1 if name == "SLC" else 2


def analog_stage_cost(stage, tiles, table, input_bits=8, vectors=1, layer=0, pu=0,
                      macs=0, out_elems=0, array_rows=None):
    """Cost of streaming ``vectors`` inputs through a set of programmed tiles.

    Row tiles run one after another (8 read cycles of 100 ns each); every tile
    converts its occupied columns once per input bit. ``adc_busy_ns`` is the
    converter occupancy, conversions over the sample rate.
    """
    tiles = list(tiles)
    if not tiles:
        return StageCost(stage, "analog", layer, pu, macs=macs, out_elems=out_elems)
    rows = array_rows or table.analog.array_rows
    row_tiles = len({t.row_offset for t in tiles})
    conversions = 0
    energy = 0.0
    for t in tiles:
        bpc = _mode_bits(t.mode)
        conv = t.occupied_columns * input_bits * vectors
        conversions += conv
        adc_b = (rows - 1).bit_length() + bpc - 1
        energy += conv * table.adc_energy_pj(adc_b)
        energy += input_bits * vectors * table.analog_tile_cycle_pj()
    cycles = input_bits * row_tiles * vectors
    return StageCost(stage, "analog", layer, pu, macs=macs, conversions=conversions, cycles=cycles,
                     energy_pj=energy, latency_ns=cycles * table.analog_cycle_ns, arrays=len(tiles),
                     out_elems=out_elems, adc_busy_ns=conversions / table.adc_rate_gsps)


def digital_stage_cost(stage, products, table, bits_a=8, bits_b=8, sfu_elems=0, layer=0, pu=0,
                       modules=None):
    """NOR-PIM cost of ``products`` multiplications plus ``sfu_elems`` SFU inputs."""
    if products < 0 or sfu_elems < 0:
        raise InvalidInput("operation counts must be non-negative")
    modules = modules or table.digital.per_pu
    rate = table.digital_products_per_cycle(bits_a, bits_b) * modules
    mul_cycles = math.ceil(products / math.floor(rate)) if products else 0
    sfu_cycles = math.ceil(sfu_elems / table.digital.sfu_inputs) if sfu_elems else 0
    cycles = mul_cycles + sfu_cycles
    energy = (mul_cycles * modules * table.digital_module_cycle_pj()
              + sfu_cycles * table.sfu_cycle_pj())
    return StageCost(stage, "digital", layer, pu, macs=products, cycles=cycles, energy_pj=energy,
                     latency_ns=cycles / table.clock_ghz)


def attention_cost(w, table, layer=0, pu=0):
    t, ctx, d = w.tokens, w.seq_len, w.hidden
    scores = digital_stage_cost("attn_scores", t * ctx * d, table, w.input_bits, w.input_bits,
                                sfu_elems=t * ctx * w.heads, layer=layer, pu=pu)
    av = digital_stage_cost("attn_v", t * ctx * d, table, w.attn_prob_bits, w.input_bits,
                            layer=layer, pu=pu)
    return [scores, av]


def combine_parts(stage, parts, layer=0, pu=0, macs=0):
    """Merge per-part costs of one stage.

    ``parts`` maps a cell mode to the costs of its chained parts (``b`` then
    ``u``): parts in a chain add up, the SLC and MLC chains run side by side.
    """
    flat = [c for chain in parts.values() for c in chain]
    lat = max((sum(c.latency_ns for c in chain) for chain in parts.values()), default=0.0)
    cyc = max((sum(c.cycles for c in chain) for chain in parts.values()), default=0)
    return StageCost(stage, "analog", layer, pu, macs=macs,
                     conversions=sum(c.conversions for c in flat), cycles=cyc,
                     energy_pj=sum(c.energy_pj for c in flat), latency_ns=lat,
                     arrays=sum(c.arrays for c in flat), out_elems=sum(c.out_elems for c in flat),
                     adc_busy_ns=sum(c.adc_busy_ns for c in flat))


def estimate(placements, workload, table):
    """Per-stage costs of one model instance placed by :func:`hfpim.mapper.place_model`."""
    rep = CostReport(workload=workload)
    ops = count_ops(workload)
    for lp in placements:
        if getattr(lp, "copy", 0) != 0:
            continue
        pu0 = lp.pus[0]
        for stage, _, _ in workload.matrices():
            parts = {}
            for m in lp.matrices:
                if m.stage != stage:
                    continue
                out = max(t.col_offset + t.n_words for t in m.tiles)
                c = analog_stage_cost(stage, m.tiles, table, workload.input_bits, workload.tokens,
                                      lp.layer, pu0, out_elems=out)
                parts.setdefault(getattr(m.mode, "name", m.mode), []).append(c)
            rep.add(combine_parts(stage, parts, lp.layer, pu0, ops[stage]))
        rep.stages.extend(attention_cost(workload, table, lp.layer, pu0))
    rep.area_mm2 = dict(table.area)
    rep.check()
    return rep


# --- parallel scaling -------------------------------------------------------

def _layer_time(base, layer=0):
    st = [s for s in base.stages if s.layer == layer]
    if not st:
        raise InvalidInput(f"report holds no stages for layer {layer}")
    compute = sum(s.latency_ns for s in st)
    psum = sum(s.out_elems for s in st if s.module == "analog")
    return compute, psum, sum(1 for s in st if s.module == "analog")


def tensor_layer_time(base, p, table, layer=0):
    """Per-token layer time when ``p`` PUs split the rows of every matrix.

    Work divides evenly; each split stage then gathers ``p`` partial-sum
    vectors at the SFU, each costing the aggregation latency plus its
    transfer over the on-chip interconnect.
    """
    if p < 1:
        raise InvalidInput("parallel degree must be >= 1")
    compute, psum_elems, n_stages = _layer_time(base, layer)
    if p == 1:
        return compute
    per_pu = n_stages * table.aggregation_cycles / table.clock_ghz \
        + psum_elems * table.psum_bytes / table.oci_gbps
    return compute / p + p * per_pu


def scale_throughput(base, par, table, layer=0):
    """Throughput factor of a parallelism plan.

    ``tensor(n)`` is relative to one PU per layer. ``pipeline(n)`` is relative
    to the dual-chip layout; the model's layers spread over ``24 n`` PUs
    (``24 n / layers`` per layer) and each chip boundary adds one hidden-vector
    transfer over PCIe.
    """
    w = base.workload
    if par.mode in ("one-pu-per-layer",) or par.n == 1:
        return 1.0
    if par.mode == "tensor":
        return tensor_layer_time(base, 1, table, layer) / tensor_layer_time(base, par.n, table, layer)
    if par.mode == "pipeline":
        if w is None:
            raise InvalidInput("pipeline scaling needs the workload on the report")

        def token_time(chips):
            p = table.pus_per_chip * chips // w.layers
            if p < 1:
                raise InvalidInput(f"{chips} chips cannot hold {w.layers} layers")
            hop = w.hidden * w.input_bits / 8 / table.pcie_gbps
            return w.layers * tensor_layer_time(base, p, table, layer) + (chips - 1) * hop

        return token_time(2) / token_time(par.n)
    raise InvalidInput(f"unknown parallelism mode {par.mode!r}")


def mode_ratio(tiles_slc, tiles_mlc, table, input_bits=8):
    """(conversion ratio, energy ratio) of MLC2 over SLC for the same matrix."""
    a = analog_stage_cost("slc", tiles_slc, table, input_bits)
    b = analog_stage_cost("mlc", tiles_mlc, table, input_bits)
    if a.conversions == 0:
        return float("nan"), float("nan")
    return b.conversions / a.conversions, b.energy_pj / a.energy_pj

