"""Two-stage design of experiments and a resumable batch runner.

Stage 1 is a plain Latin hypercube over the three material inputs with the
process held at its central setting. Stage 2 draws settings from the full
``3^5`` grid of discrete process values and normalized material levels.
Every setting gets a stable ``run_id`` and a per-run seed hashed from the
plan seed, so interrupted batches can be resumed without changing the
stochastic forcing of any run.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, replace

import numpy as np

from .airflow import DomainGeometry, ProcessParams, TurbulenceConfig
from .errors import ValidationError
from .fiber import MaterialInput, SimulationConfig, simulate
from .laydown import TailPolicy, characterize, write_laydown, write_stats_csv

__all__ = [
    "ParamRange",
    "DEFAULT_RANGES",
    "INPUT_NAMES",
    "latin_hypercube",
    "normalize",
    "denormalize",
    "DoePlan",
    "Setting",
    "build_plan",
    "RunRecord",
    "run_plan",
    "run_seed",
    "load_records",
    "write_plan",
    "read_plan",
    "stats_rows",
]

PLAN_SCHEMA = "spunlab.plan/1"
INPUT_NAMES = ("v", "p", "E", "rho", "titer")
AIR_SPEED_LEVELS = (70.0, 100.0, 130.0)
PRESSURE_LEVELS = (100.0, 150.0, 200.0)
MATERIAL_LEVELS = (0.1, 0.5, 0.9)
CENTER_PROCESS = (100.0, 100.0)


@dataclass(frozen=True)
class ParamRange:
    name: str
    lower: float
    upper: float
    unit: str = ""

    def validate(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)) or not self.lower < self.upper:
            raise ValidationError(f"ranges.{self.name}", f"need lower < upper, got [{self.lower}, {self.upper}]")
        return self

    @property
    def width(self):
        return self.upper - self.lower


DEFAULT_RANGES = (
    ParamRange("v", 70.0, 130.0, "m/s"),
    ParamRange("p", 100.0, 200.0, "Pa"),
    ParamRange("E", 10e9, 30e9, "Pa"),
    ParamRange("rho", 900.0, 1200.0, "kg/m^3"),
    ParamRange("titer", 2.83, 4.53, "dtex"),
)


def latin_hypercube(n, d, seed=0):
    """Plain LHS: one uniform point per bin ``[k/n, (k+1)/n)`` in every column."""
    if n < 1 or d < 1:
        raise ValidationError("lhs", f"n and d must be >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    u = rng.random((n, d))
    perms = np.argsort(rng.random((n, d)), axis=0)
    pts = (perms + u) / n
    # guard against rounding up to the upper bin edge
    return np.minimum(pts, np.nextafter((perms + 1) / n, 0.0))


def normalize(value, rng):
    """Affine map of ``rng`` onto ``[0, 1]``; values outside map outside."""
    return (np.asarray(value, dtype=float) - rng.lower) / rng.width


def denormalize(u, rng):
    return rng.lower + np.asarray(u, dtype=float) * rng.width


def out_of_range(u):
    """True where a normalized coordinate falls outside ``[0, 1]``."""
    u = np.asarray(u, dtype=float)
    return (u < 0.0) | (u > 1.0)


@dataclass(frozen=True)
class Setting:
    run_id: str
    stage: int
    raw: tuple
    normalized: tuple

    def as_dict(self):
        return dict(zip(INPUT_NAMES, self.raw))


@dataclass(frozen=True)
class DoePlan:
    settings: tuple
    ranges: tuple
    seed: int
    n1: int
    n2: int

    @property
    def stage1(self):
        return tuple(s for s in self.settings if s.stage == 1)

    @property
    def stage2(self):
        return tuple(s for s in self.settings if s.stage == 2)

    def __len__(self):
        return len(self.settings)


def _ranges_by_name(ranges):
    by = {r.name: r.validate() for r in ranges}
    missing = [n for n in INPUT_NAMES if n not in by]
    if missing:
        raise ValidationError("ranges", f"missing ranges for {missing}")
    return tuple(by[n] for n in INPUT_NAMES)


def build_plan(ranges=DEFAULT_RANGES, n1=100, n2=105, seed=0,
               air_speeds=AIR_SPEED_LEVELS, pressures=PRESSURE_LEVELS, levels=MATERIAL_LEVELS,
               center=CENTER_PROCESS):
    """Stage 1 LHS over materials plus ``n2`` grid settings drawn without replacement."""
    ranges = _ranges_by_name(ranges)
    n_grid = len(air_speeds) * len(pressures) * len(levels) ** 3
    if n1 < 0 or n2 < 0:
        raise ValidationError("doe", "n1 and n2 must be >= 0")
    if n1 + n2 == 0:
        raise ValidationError("doe", "plan would be empty (n1 = n2 = 0)")
    if n2 > n_grid:
        raise ValidationError("doe.n2", f"at most {n_grid} grid settings exist, got {n2}")
    ss1, ss2 = np.random.SeedSequence(seed).spawn(2)

    settings = []
    if n1:
        lhs = latin_hypercube(n1, 3, np.random.default_rng(ss1))
        for k, row in enumerate(lhs):
            proc = [float(normalize(c, r)) for c, r in zip(center, ranges[:2])]
            mat = [float(denormalize(u, r)) for u, r in zip(row, ranges[2:])]
            settings.append(Setting(f"s1-{k:04d}", 1, tuple(center) + tuple(mat),
                                    tuple(proc) + tuple(float(u) for u in row)))
    if n2:
        grid = list(itertools.product(air_speeds, pressures, levels, levels, levels))
        pick = np.sort(np.random.default_rng(ss2).choice(len(grid), size=n2, replace=False))
        for k, gi in enumerate(pick):
            v, p, *lv = grid[gi]
            raw = (float(v), float(p)) + tuple(float(denormalize(u, r)) for u, r in zip(lv, ranges[2:]))
            norm = (float(normalize(v, ranges[0])), float(normalize(p, ranges[1]))) + tuple(lv)
            settings.append(Setting(f"s2-{k:04d}", 2, raw, norm))
    return DoePlan(tuple(settings), ranges, int(seed), n1, n2)


def run_seed(plan_seed, run_id):
    """Stable 63-bit seed for one run."""
    h = hashlib.sha256(f"{int(plan_seed)}:{run_id}".encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


def write_plan(path, plan, meta=None):
    doc = {
        "schema": PLAN_SCHEMA,
        "seed": plan.seed,
        "n1": plan.n1,
        "n2": plan.n2,
        "inputs": list(INPUT_NAMES),
        "ranges": [asdict(r) for r in plan.ranges],
        "meta": dict(meta or {}),
        "settings": [
            {"run_id": s.run_id, "stage": s.stage, "raw": list(s.raw), "normalized": list(s.normalized)}
            for s in plan.settings
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_plan(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != PLAN_SCHEMA:
        raise ValidationError("plan.schema", f"expected {PLAN_SCHEMA}, got {doc.get('schema')!r}")
    ranges = tuple(ParamRange(**r) for r in doc["ranges"])
    settings = tuple(Setting(s["run_id"], int(s["stage"]), tuple(s["raw"]), tuple(s["normalized"]))
                     for s in doc["settings"])
    return DoePlan(settings, ranges, int(doc["seed"]), int(doc["n1"]), int(doc["n2"]))


@dataclass
class RunRecord:
    run_id: str
    stage: int
    seed: int
    inputs: dict
    normalized: dict
    status: str  # "ok" or "failed"
    stats: dict | None = None
    error: str = ""
    n_events: int = 0
    max_strain: float = float("nan")
    wall_time: float = 0.0

    def to_json(self):
        d = asdict(self)
        if not math.isfinite(d["max_strain"]):
            d["max_strain"] = None
        return json.dumps(d)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        if d.get("max_strain") is None:
            d["max_strain"] = float("nan")
        return cls(**d)

    @property
    def ok(self):
        return self.status == "ok"


def _execute(setting, seed, sim_config, geometry, turbulence, policy, belt_speed, spin_speed,
             laydown_dir=None):
    """Simulate and characterize one setting; never raises."""
    t0 = time.perf_counter()
    v, p, E, rho, titer = setting.raw
    rec = RunRecord(setting.run_id, setting.stage, seed, setting.as_dict(),
                    dict(zip(INPUT_NAMES, setting.normalized)), "failed")
    try:
        process = ProcessParams(inlet_air_speed=v, suction_pressure=p, belt_speed=belt_speed,
                                spin_speed=spin_speed)
        material = MaterialInput.from_dtex(E, rho, titer)
        cfg = replace(sim_config, seed=seed)
        traj, sample = simulate(process, material, geometry, cfg, turbulence)
        rec.n_events = len(sample)
        if laydown_dir is not None:
            write_laydown(os.path.join(laydown_dir, f"{setting.run_id}.csv"), sample,
                          {"run_id": setting.run_id, "seed": seed})
        if traj.max_strain.size:
            rec.max_strain = float(np.nanmax(traj.max_strain))
        if traj.aborted:
            rec.error = traj.error
        else:
            st = characterize(sample, policy)
            rec.stats = {"sigma1": st.sigma1, "sigma2": st.sigma2, "A": st.A,
                         "n_points": st.n_points, "tail_cut": st.tail_cut}
            rec.status = "ok"
    except Exception as exc:  # a failed run must not stop the batch
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.wall_time = time.perf_counter() - t0
    return rec


def load_records(path):
    """Records from a JSON-lines file; a truncated trailing line is ignored."""
    out = {}
    if not os.path.exists(path):
        return out
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = RunRecord.from_json(line)
            except (json.JSONDecodeError, TypeError):
                continue
            out[rec.run_id] = rec
    return out


def _completed(rec, setting, plan_seed):
    # a record only counts if it was produced for exactly this setting
    return (rec is not None and rec.ok and rec.seed == run_seed(plan_seed, setting.run_id)
            and rec.inputs == setting.as_dict())


def run_plan(plan, records_path, sim_config=None, geometry=None, turbulence=None, policy=None,
             belt_speed=2.0, spin_speed=80.0, parallelism=1, progress=None, laydown_dir=None):
    """Run every setting not yet completed in ``records_path``.

    Records are appended as runs finish; failed runs are retried on the
    next call. With ``laydown_dir`` every run also dumps its deposition
    events there. Returns ``(records in plan order, number of new runs)``.
    """
    sim_config = SimulationConfig() if sim_config is None else sim_config
    geometry = DomainGeometry() if geometry is None else geometry
    turbulence = TurbulenceConfig() if turbulence is None else turbulence
    policy = TailPolicy() if policy is None else policy
    if parallelism < 1:
        raise ValidationError("parallel", "must be >= 1")

    done = load_records(records_path)
    todo = [s for s in plan.settings if not _completed(done.get(s.run_id), s, plan.seed)]
    if laydown_dir is not None:
        os.makedirs(laydown_dir, exist_ok=True)
    args = (sim_config, geometry, turbulence, policy, belt_speed, spin_speed, laydown_dir)
    n_total = len(todo)

    with open(records_path, "a") as fh:
        def commit(rec, k):
            fh.write(rec.to_json() + "\n")
            fh.flush()
            done[rec.run_id] = rec
            if progress is not None:
                progress(k, n_total, rec)

        if parallelism == 1 or n_total <= 1:
            for k, s in enumerate(todo, 1):
                commit(_execute(s, run_seed(plan.seed, s.run_id), *args), k)
        else:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                futs = [pool.submit(_execute, s, run_seed(plan.seed, s.run_id), *args) for s in todo]
                for k, fut in enumerate(as_completed(futs), 1):
                    commit(fut.result(), k)

    records = [done[s.run_id] for s in plan.settings
               if s.run_id in done and done[s.run_id].inputs == s.as_dict()]
    return records, n_total


def stats_rows(records):
    """Rows for :func:`spunlab.laydown.write_stats_csv` from completed records."""
    rows = []
    for r in records:
        if not r.ok:
            continue
        row = {"run_id": r.run_id, **r.inputs}
        row.update({k: r.stats[k] for k in ("sigma1", "sigma2", "A", "n_points")})
        rows.append(row)
    return rows


def write_stats(path, records, meta=None):
    write_stats_csv(path, stats_rows(records), meta)
