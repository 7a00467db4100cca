"""Batch experiment runner: ``decompose``, ``finetune``, ``simulate`` and ``report``.

Every artifact is written with fixed formatting and ordering so that two runs
of the same config produce byte-identical files.
"""
import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costmodel import PRESETS, ComponentCostTable, WorkloadSpec, analog_stage_cost, estimate
from .errors import CalibrationFailed, ConfigError, InvalidInput, PlacementFailed, TrainingDiverged
from .mapper import ParallelismPlan, crossbar_forward, partition_by_plan, place_model, program_groups
from .redistribution import (FinetuneConfig, _loss, finetune, make_task, select_baseline_ranks,
                             select_slc_ranks)
from .svdcore import as_dense, merge_sigma_vt, svd_decompose, truncate, truncate_to_threshold
from .xbarsim import CellMode, NoiseSpec, calibrate_sigma

log = logging.getLogger("hfpim")

EXIT_OK, EXIT_CONFIG, EXIT_PLACEMENT, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1
DEFAULT_GRID = (0, 5, 10, 30, 40, 50, 100)
SELECTION_MODES = ("gradient", "first-k", "weight-magnitude", "random")
SIM_COLUMNS = ("k_percent", "seed", "selection_mode", "loss", "saturations", "energy_pj",
               "latency_ns", "conversions")


# --- tensor files ------------------------------------------------------------

MAGIC = b"HFPM"
TENSOR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _dtype_code(a):
    for code, dt in _DTYPES.items():
        if a.dtype.kind == dt.kind and a.dtype.itemsize == dt.itemsize:
            return code
    raise InvalidInput(f"dtype {a.dtype} cannot be stored (f32, i8 or u8 only)")


def encode_tensor(a):
    a = np.asarray(a)
    code = _dtype_code(a)
    if a.ndim > 255:
        raise InvalidInput("too many dimensions")
    head = MAGIC + struct.pack("<HBB", TENSOR_VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf):
    buf = bytes(buf)
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise InvalidInput("not a tensor file (bad magic)")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != TENSOR_VERSION:
        raise InvalidInput(f"unsupported tensor file version {version}")
    if code not in _DTYPES:
        raise InvalidInput(f"unknown dtype code {code}")
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise InvalidInput("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dt = _DTYPES[code]
    need = math.prod(dims) * dt.itemsize
    if len(buf) - off != need:
        raise InvalidInput(f"payload has {len(buf) - off} bytes, dims need {need}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def write_tensor(path, a):
    Path(path).write_bytes(encode_tensor(a))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


# --- config --------------------------------------------------------------------

def _known(cls):
    return {f.name for f in dataclasses.fields(cls)}


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    task: dict = field(default_factory=lambda: {"kind": "teacher-regression"})
    rank_policy: object = "hard-threshold"
    k_percent: list = field(default_factory=lambda: list(DEFAULT_GRID))
    noise: dict = field(default_factory=lambda: {"sigma": 0.025})
    seeds: list = field(default_factory=lambda: [0])
    selection_modes: list = field(default_factory=lambda: ["gradient"])
    finetune: dict = field(default_factory=dict)
    cell_mode: str = "MLC2"
    eval_samples: int = 256
    workload: object = None
    parallelism: str = "one-pu-per-layer"
    inputs: dict = field(default_factory=dict)
    output: str = "out"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported (want {SCHEMA_VERSION})")
        if not isinstance(self.task, dict) or "kind" not in self.task:
            raise ConfigError("task needs a 'kind'")
        if self.rank_policy != "hard-threshold" and not (
                isinstance(self.rank_policy, int) and self.rank_policy >= 1):
            raise ConfigError("rank_policy must be 'hard-threshold' or a positive integer")
        if not self.k_percent or any(not 0 <= k <= 100 for k in self.k_percent):
            raise ConfigError("k_percent values must lie in [0, 100]")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("at least one non-negative integer seed is required")
        bad = [m for m in self.selection_modes if m not in SELECTION_MODES]
        if not self.selection_modes or bad:
            raise ConfigError(f"selection_modes must be drawn from {SELECTION_MODES}")
        if set(self.noise) not in ({"sigma"}, {"target_ber"}):
            raise ConfigError("noise takes exactly one of 'sigma' or 'target_ber'")
        # the seed comes from the grid, not from this section
        unknown = set(self.finetune) - (_known(FinetuneConfig) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown finetune keys {sorted(unknown)}")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        try:
            CellMode.parse(self.cell_mode)
            ParallelismPlan.parse(self.parallelism)
        except InvalidInput as e:
            raise ConfigError(str(e)) from e
        if isinstance(self.workload, str) and self.workload not in PRESETS:
            raise ConfigError(f"unknown workload preset {self.workload!r}")

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - _known(cls)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def sigma(self):
        if "sigma" in self.noise:
            s = float(self.noise["sigma"])
            if not s >= 0:
                raise ConfigError("sigma must be >= 0")
            return s
        return calibrate_sigma(float(self.noise["target_ber"]), self.cell_mode)

    def make_task(self, seed):
        kw = {k: v for k, v in self.task.items() if k != "kind"}
        kind = self.task["kind"]
        try:
            return make_task(kind, seed=seed, **kw)
        except TypeError as e:
            raise ConfigError(f"bad task parameters: {e}") from e
        except InvalidInput as e:
            raise ConfigError(str(e)) from e

    def finetune_config(self, seed):
        try:
            return FinetuneConfig(**self.finetune, seed=seed)
        except InvalidInput as e:
            raise ConfigError(str(e)) from e

    def workload_spec(self):
        if self.workload is None:
            return None
        if isinstance(self.workload, str):
            return PRESETS[self.workload]
        try:
            return WorkloadSpec(**self.workload)
        except (TypeError, InvalidInput) as e:
            raise ConfigError(f"bad workload: {e}") from e


# --- output helpers ----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _factors_for(cfg, task):
    return task.decompose(None if cfg.rank_policy == "hard-threshold" else cfg.rank_policy)


# --- decompose ---------------------------------------------------------------------

def _input_matrices(cfg, seed):
    if cfg.inputs:
        out = []
        for mid in sorted(cfg.inputs):
            a = read_tensor(cfg.inputs[mid])
            if a.ndim != 2:
                raise InvalidInput(f"{mid}: expected a matrix, got {a.ndim} dims")
            out.append((mid, as_dense(a.astype(np.float64), mid)))
        return out
    task = cfg.make_task(seed)
    return [(f"layer{i}", w) for i, w in enumerate(task.pretrained)]


def cmd_decompose(cfg, out, seed=None):
    """SVD + truncation of every input matrix; writes factor tensors and a manifest."""
    out = Path(out)
    seed = cfg.seeds[0] if seed is None else seed
    manifest = {"rank_policy": cfg.rank_policy, "matrices": []}
    for mid, w in _input_matrices(cfg, seed):
        full = svd_decompose(w)
        f = truncate_to_threshold(full) if cfg.rank_policy == "hard-threshold" \
            else truncate(full, min(cfg.rank_policy, full.rank))
        err = float(np.linalg.norm(w - f.dense()) / max(np.linalg.norm(w), 1e-300))
        d = out / "factors"
        d.mkdir(parents=True, exist_ok=True)
        for part in ("u", "sigma", "v"):
            write_tensor(d / f"{mid}.{part}.hfpm", getattr(f, part).astype(np.float32))
        manifest["matrices"].append({"id": mid, "shape": list(w.shape), "rank": f.rank,
                                     "relative_error": err})
    _write(out / "manifest.json", _json_text(manifest))
    return manifest


# --- finetune ----------------------------------------------------------------------

def _finetuned(cfg, seed):
    task = cfg.make_task(seed)
    res = finetune(_factors_for(cfg, task), task, cfg.finetune_config(seed))
    return task, res


def cmd_finetune(cfg, out, seed=None):
    """Fine-tune the truncated factors and persist per-matrix gradient records."""
    out = Path(out)
    seeds = cfg.seeds if seed is None else [seed]
    summary = {}
    for s in seeds:
        task, res = _finetuned(cfg, s)
        base = out if len(seeds) == 1 else out / f"seed{s}"
        for i, (f, rec) in enumerate(zip(res.factors, res.records)):
            mid = f"layer{i}"
            _write(base / "gradient" / f"{mid}.grad.json",
                   _json_text({"id": mid, "rank": f.rank, "steps": rec.steps,
                               "values": [float(v) for v in rec.values]}))
            for part in ("u", "sigma", "v"):
                (base / "factors").mkdir(parents=True, exist_ok=True)
                write_tensor(base / "factors" / f"{mid}.{part}.hfpm", getattr(f, part).astype(np.float32))
        rows = [{"epoch": e, "val_loss": float(l)} for e, l in enumerate(res.history)]
        _write(base / "loss_curve.csv", _csv_text(("epoch", "val_loss"), rows))
        summary[s] = res.history
    return summary


# --- simulate ----------------------------------------------------------------------

def _plans(mode, factors, records, k, seed):
    if mode == "gradient":
        return [select_slc_ranks(r, k) for r in records]
    return [select_baseline_ranks(mode, f, k, seed=seed) for f in factors]


def crossbar_inference(factors, plans, x, sigma, seed, stream, table, mode="MLC2"):
    """Run the factored network on crossbar tiles; returns (output, stats)."""
    h = x
    stats = {"saturations": 0, "conversions": 0, "energy_pj": 0.0, "latency_ns": 0.0}
    for li, (f, plan) in enumerate(zip(factors, plans)):
        b, u = merge_sigma_vt(f)
        slc, mlc = partition_by_plan(b, u, plan)
        mlc = dataclasses.replace(mlc, mode=CellMode.parse(mode))
        prog = program_groups((slc, mlc), NoiseSpec(sigma, seed=seed), stream=(*stream, li))
        out, conv, sat = crossbar_forward(prog, h)
        stats["conversions"] += conv
        stats["saturations"] += sat
        lat = 0.0
        for pg in prog:
            chain = 0.0
            for tiles in (pg.b_tiles, pg.u_tiles):
                c = analog_stage_cost(f"layer{li}", tiles, table, vectors=len(h))
                stats["energy_pj"] += c.energy_pj
                chain += c.latency_ns
            lat = max(lat, chain)      # SLC and MLC groups run side by side
        stats["latency_ns"] += lat
        h = np.maximum(out, 0.0) if li < len(factors) - 1 else out
    return h, stats


def _grid_point(job):
    (cfg, table, sigma, seed, ki, k, mode, task, factors, records) = job
    plans = _plans(mode, factors, records, k, seed)
    n = min(cfg.eval_samples, len(task.x_val))
    out, stats = crossbar_inference(factors, plans, task.x_val[:n], sigma, seed, (seed, ki), table,
                                    cfg.cell_mode)
    loss = _loss(out, task.y_val[:n], task.classification)
    return {"k_percent": k, "seed": seed, "selection_mode": mode, "loss": float(loss), **stats}


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    # map() hands results back in submission order whatever the completion order
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def cmd_simulate(cfg, out, table, jobs=1, seed=None):
    """Loss and crossbar cost for every (k_percent, seed, selection mode) grid point."""
    out = Path(out)
    seeds = cfg.seeds if seed is None else [seed]
    sigma = cfg.sigma()
    work = []
    for s in seeds:
        task, res = _finetuned(cfg, s)
        for ki, k in enumerate(cfg.k_percent):
            for mode in cfg.selection_modes:
                work.append((cfg, table, sigma, s, ki, k, mode, task, res.factors, res.records))
    rows = _run_jobs(_grid_point, work, jobs)
    _write(out / "simulate.csv", _csv_text(SIM_COLUMNS, rows))

    rollup = {"config": cfg.to_dict(), "sigma": sigma, "rows": len(rows),
              "loss_by_k": _aggregate(rows)}
    w = cfg.workload_spec()
    if w is not None:
        placement = {}
        for k in sorted(set(cfg.k_percent)):
            try:
                pl = place_model(w, par=cfg.parallelism, rank_policy=cfg.rank_policy,
                                 slc_fraction=k / 100.0, mode=cfg.cell_mode)
            except PlacementFailed as e:
                raise PlacementFailed(f"workload {w.name or w.kind} at k_percent={k}: {e}",
                                      e.constraint) from e
            placement[str(k)] = estimate(pl, w, table).to_dict()
        rollup["workload_cost"] = placement
    _write(out / "simulate.json", _json_text(rollup))
    return rows


# --- report --------------------------------------------------------------------------

REPORT_COLUMNS = ("selection_mode", "k_percent", "runs", "loss_mean", "loss_std", "energy_pj_mean",
                  "latency_ns_mean", "conversions_mean", "saturations_total")


def _aggregate(rows):
    groups = {}
    for r in rows:
        groups.setdefault((str(r["selection_mode"]), float(r["k_percent"])), []).append(r)
    out = []
    for (mode, k) in sorted(groups):
        g = groups[(mode, k)]
        loss = np.array([float(r["loss"]) for r in g])
        out.append({
            "selection_mode": mode, "k_percent": k, "runs": len(g),
            "loss_mean": float(loss.mean()),
            "loss_std": float(loss.std(ddof=1)) if len(g) > 1 else 0.0,
            "energy_pj_mean": float(np.mean([float(r["energy_pj"]) for r in g])),
            "latency_ns_mean": float(np.mean([float(r["latency_ns"]) for r in g])),
            "conversions_mean": float(np.mean([float(r["conversions"]) for r in g])),
            "saturations_total": int(sum(int(r["saturations"]) for r in g)),
        })
    return out


def _read_runs(paths):
    rows, warnings = [], []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "simulate.csv"
        if not p.is_file():
            warnings.append(f"missing run: {p}")
            continue
        with p.open(newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or set(SIM_COLUMNS) - set(rd.fieldnames):
                warnings.append(f"not a simulate table: {p}")
                continue
            rows.extend(rd)
    return rows, warnings


def _markdown(summary, warnings):
    lines = ["# Loss versus protected rank fraction", "",
             "| " + " | ".join(REPORT_COLUMNS) + " |",
             "|" + "---|" * len(REPORT_COLUMNS)]
    for r in summary:
        lines.append("| " + " | ".join(_fmt(r[c]) for c in REPORT_COLUMNS) + " |")
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
    return "\n".join(lines) + "\n"


def cmd_report(paths, out):
    """Summaries over seeds of one or more ``simulate`` outputs."""
    out = Path(out)
    rows, warnings = _read_runs(paths)
    for w in warnings:
        log.warning(w)
    summary = _aggregate(rows)
    _write(out / "summary.csv", _csv_text(REPORT_COLUMNS, summary))
    _write(out / "report.md", _markdown(summary, warnings))
    return summary, warnings


# --- entry point ----------------------------------------------------------------------

def load_table(path=None):
    path = path or os.environ.get("HFPM_TABLE")
    return ComponentCostTable.from_json(path) if path else ComponentCostTable.from_json()


def build_parser():
    p = argparse.ArgumentParser(prog="hfpim", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("decompose", "finetune", "simulate", "report"))
    p.add_argument("runs", nargs="*", help="simulate outputs to summarize (report only)")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seeds")
    p.add_argument("--table", default=None, help="cost table JSON (default: $HFPM_TABLE or built in)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args):
    if args.command == "report":
        cmd_report(args.runs, args.out or "report")
        return EXIT_OK
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    out = args.out or cfg.output
    if args.command == "decompose":
        cmd_decompose(cfg, out, args.seed)
    elif args.command == "finetune":
        cmd_finetune(cfg, out, args.seed)
    else:
        cmd_simulate(cfg, out, load_table(args.table), max(args.jobs, 1), args.seed)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, CalibrationFailed) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except PlacementFailed as e:
        log.error("placement failed (%s): %s", e.constraint, e)
        return EXIT_PLACEMENT
    except TrainingDiverged as e:
        log.error("TrainingDiverged: %s", e)
        return EXIT_DIVERGED
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except InvalidInput as e:
        log.error("invalid input: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
