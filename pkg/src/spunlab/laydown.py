"""Statistics of a single-fiber laydown and a stochastic web surrogate.

A laydown is reduced to three numbers: the throwing-range standard
deviations ``sigma1`` (MD) and ``sigma2`` (CD) of the backtracked deposition
points, and a stochasticity ``A``. For ``A`` each normalized coordinate
``xi = (x - mean) / sigma`` is treated as a stationary Ornstein-Uhlenbeck
process in arc length ``s`` (measured in units of ``arc_length_scale``)::

    d xi = -A xi ds + sqrt(2 A) dW

so ``A -> 0`` freezes the trace (deterministic deposition) and ``A -> inf``
decorrelates neighbouring points (white noise). ``A`` is estimated by exact
transition-density maximum likelihood per coordinate; the MD and CD
estimates are averaged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import lfilter

from .errors import EmptyResultError, InsufficientDataError, ValidationError

__all__ = [
    "LaydownSample",
    "LaydownStats",
    "TailPolicy",
    "backtrack",
    "cut_tail",
    "estimate_sigmas",
    "estimate_A",
    "characterize",
    "generate_virtual_web",
    "VirtualWeb",
    "write_laydown",
    "read_laydown",
    "LAYDOWN_COLUMNS",
    "STATS_COLUMNS",
    "write_stats_csv",
    "read_stats_csv",
]

LAYDOWN_SCHEMA = "spunlab.laydown/1"
STATS_SCHEMA = "spunlab.stats/1"
LAYDOWN_COLUMNS = ("s", "t_dep", "x", "y", "z")
STATS_COLUMNS = ("run_id", "v", "p", "E", "rho", "titer", "sigma1", "sigma2", "A", "n_points")


@dataclass
class LaydownSample:
    """Deposition events ``(s, t_dep, position)`` in web coordinates.

    Positions are belt-fixed: the MD coordinate of an event grows by
    ``belt_speed * t_dep`` relative to where it landed below the nozzle.
    """

    s: np.ndarray
    t_dep: np.ndarray
    positions: np.ndarray
    belt_speed: float = 0.0
    axes: str = "x=MD,y=CD,z=belt-normal"

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float).reshape(-1)
        self.t_dep = np.asarray(self.t_dep, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if not (self.s.size == self.t_dep.size == self.positions.shape[0]):
            raise ValidationError("sample", "s, t_dep and positions must have equal length")
        order = np.argsort(self.s, kind="stable")
        self.s, self.t_dep, self.positions = self.s[order], self.t_dep[order], self.positions[order]
        if np.any(np.diff(self.s) <= 0):
            raise ValidationError("sample.s", "arc lengths must be strictly increasing")

    def __len__(self):
        return self.s.size


@dataclass(frozen=True)
class LaydownStats:
    sigma1: float
    sigma2: float
    A: float
    n_points: int
    tail_cut: int = 0


@dataclass(frozen=True)
class TailPolicy:
    """How to drop the start-up part of a laydown.

    ``kind="fraction"`` drops the leading ``fraction`` of deposited arc
    length; ``kind="burn_in"`` drops events with ``t_dep < burn_in``.
    """

    kind: str = "fraction"
    fraction: float = 0.1
    burn_in: float = 0.0
    arc_length_scale: float = 1.0  # m, unit of arc length for A

    def validate(self):
        if self.kind not in ("fraction", "burn_in"):
            raise ValidationError("policy.kind", f"unknown policy {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError("policy.fraction", "must lie in [0, 1]")
        if not self.arc_length_scale > 0:
            raise ValidationError("policy.arc_length_scale", "must be > 0")
        return self


@dataclass
class _Points:
    """Backtracked (nozzle-frame) MD/CD coordinates with their bookkeeping."""

    s: np.ndarray
    t_dep: np.ndarray
    xy: np.ndarray

    def __len__(self):
        return self.s.size

    def take(self, mask):
        return _Points(self.s[mask], self.t_dep[mask], self.xy[mask])


def backtrack(sample):
    """Subtract belt transport: ``x_MD - belt_speed * t_dep``; CD unchanged."""
    xy = sample.positions[:, :2].copy()
    xy[:, 0] -= sample.belt_speed * sample.t_dep
    return _Points(sample.s.copy(), sample.t_dep.copy(), xy)


def cut_tail(points, policy=None):
    if policy is None:
        policy = TailPolicy()
    policy.validate()
    if len(points) < 1:
        raise InsufficientDataError("cut_tail needs at least one point")
    if policy.kind == "burn_in":
        keep = points.t_dep >= policy.burn_in
    else:
        if policy.fraction == 0.0:
            return points
        # each event stands for one spacing of fiber
        spacing = float(np.median(np.diff(points.s))) if len(points) > 1 else 0.0
        total = points.s[-1] - points.s[0] + spacing
        cut = policy.fraction * total
        keep = points.s - points.s[0] >= cut - 1e-9 * max(total, 1e-300)
    if not keep.any():
        raise EmptyResultError("tail cut removed every deposition event")
    return points.take(keep)


def _xy(points):
    return points.xy if isinstance(points, _Points) else np.asarray(points, dtype=float)[:, :2]


def estimate_sigmas(points):
    """Unbiased sample std of the MD and CD coordinates."""
    xy = _xy(points)
    if xy.shape[0] < 2:
        raise InsufficientDataError("need at least 2 points for a standard deviation")
    # shifting by the first point keeps constant coordinates exactly at zero spread
    sd = np.std(xy - xy[0], axis=0, ddof=1)
    return float(sd[0]), float(sd[1])


def _ou_negloglik(log_ah, xi, h_rel):
    # h_rel: spacings divided by their median; log_ah = log(A * median)
    rho = np.exp(-np.exp(log_ah) * h_rel)
    var = -np.expm1(-2.0 * np.exp(log_ah) * h_rel)
    r = xi[1:] - rho * xi[:-1]
    return 0.5 * np.sum(np.log(var) + r * r / var)


def _estimate_rate(x, s):
    sd = np.std(x, ddof=1)
    if not sd > 0:
        raise InsufficientDataError("zero variance trace")
    xi = (x - x.mean()) / sd
    h = np.diff(s)
    hm = float(np.median(h))
    h_rel = h / hm
    res = minimize_scalar(_ou_negloglik, bounds=(np.log(1e-12), np.log(60.0)), args=(xi, h_rel),
                          method="bounded", options={"xatol": 1e-10, "maxiter": 500})
    return float(np.exp(res.x)) / hm


def estimate_A(points, s=None, arc_length_scale=1.0):
    """Stochasticity parameter of a laydown ordered by arc length.

    ``points`` is either the backtracked point set or an ``(n, 2)`` array
    accompanied by its arc lengths ``s``.
    """
    if isinstance(points, _Points):
        xy, s = points.xy, points.s
    else:
        xy = np.asarray(points, dtype=float)
        if xy.ndim == 1:
            xy = xy[:, None]
        xy = xy[:, :2]
        s = np.arange(xy.shape[0], dtype=float) if s is None else np.asarray(s, dtype=float)
    if xy.shape[0] < 100:
        raise InsufficientDataError(f"need at least 100 points, got {xy.shape[0]}")
    s = s / arc_length_scale
    rates = [_estimate_rate(xy[:, j], s) for j in range(xy.shape[1])]
    return float(np.mean(rates))


def characterize(sample, policy=None):
    """Backtrack, cut the start-up tail and reduce to :class:`LaydownStats`."""
    if policy is None:
        policy = TailPolicy()
    pts = backtrack(sample)
    kept = cut_tail(pts, policy)
    s1, s2 = estimate_sigmas(kept)
    a = estimate_A(kept, arc_length_scale=policy.arc_length_scale)
    return LaydownStats(sigma1=s1, sigma2=s2, A=a, n_points=len(kept), tail_cut=len(pts) - len(kept))


@dataclass
class VirtualWeb:
    fiber_id: np.ndarray
    s: np.ndarray
    xy: np.ndarray
    meta: dict = field(default_factory=dict)

    def fiber(self, i):
        m = self.fiber_id == i
        return self.s[m], self.xy[m]


def _ou_path(rng, n, rho):
    innov = rng.standard_normal(n)
    innov[1:] *= np.sqrt(max(0.0, 1.0 - rho * rho))
    return lfilter([1.0], [1.0, -rho], innov)


def generate_virtual_web(stats, n_fibers, length, ds=1e-3, seed=0, arc_length_scale=1.0,
                         cd_spacing=0.0):
    """Independent OU fiber paths with stationary stds ``(sigma1, sigma2)``.

    Every fiber is sampled at arc-length spacing ``ds`` over ``length``
    meters. Fiber ``i`` is centered at ``y = i * cd_spacing``.
    """
    if n_fibers < 1:
        raise ValidationError("n_fibers", "must be >= 1")
    if not (stats.sigma1 >= 0 and stats.sigma2 >= 0 and stats.A >= 0):
        raise ValidationError("stats", "sigma1, sigma2 and A must be non-negative")
    n = max(2, int(round(length / ds)) + 1)
    s = np.arange(n) * ds
    rho = float(np.exp(-stats.A * ds / arc_length_scale))
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(n_fibers), n)
    xy = np.empty((n_fibers * n, 2))
    for i in range(n_fibers):
        blk = slice(i * n, (i + 1) * n)
        xy[blk, 0] = stats.sigma1 * _ou_path(rng, n, rho)
        xy[blk, 1] = stats.sigma2 * _ou_path(rng, n, rho) + i * cd_spacing
    meta = {"sigma1": stats.sigma1, "sigma2": stats.sigma2, "A": stats.A, "ds": ds,
            "length": length, "seed": seed, "arc_length_scale": arc_length_scale}
    return VirtualWeb(fiber_id=ids, s=np.tile(s, n_fibers), xy=xy, meta=meta)


def write_laydown(path_or_buf, sample, meta=None):
    """Write deposition events as CSV with a ``#`` header line."""
    head = {"schema": LAYDOWN_SCHEMA, "belt_speed": repr(float(sample.belt_speed)), "axes": sample.axes}
    if meta:
        head.update({k: str(v) for k, v in meta.items()})
    lines = ["# " + " ".join(f"{k}={v}" for k, v in head.items()), ",".join(LAYDOWN_COLUMNS)]
    for s, t, p in zip(sample.s, sample.t_dep, sample.positions):
        lines.append(",".join(repr(float(v)) for v in (s, t, p[0], p[1], p[2])))
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)


def _parse_header(line):
    out = {}
    for tok in line.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
    return out


def read_laydown(path_or_buf):
    if hasattr(path_or_buf, "read"):
        text = path_or_buf.read()
    else:
        with open(path_or_buf) as fh:
            text = fh.read()
    head = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            head.update(_parse_header(line))
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(io.StringIO("\n".join(body))))
    if not rows or tuple(rows[0]) != LAYDOWN_COLUMNS:
        raise ValidationError("laydown", f"expected columns {LAYDOWN_COLUMNS}")
    data = np.array(rows[1:], dtype=float).reshape(-1, 5)
    return LaydownSample(s=data[:, 0], t_dep=data[:, 1], positions=data[:, 2:5],
                         belt_speed=float(head.get("belt_speed", 0.0)))


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_stats_csv(path, rows, meta=None):
    """One row per run in :data:`STATS_COLUMNS` order.

    ``rows`` are mappings holding at least those keys. Units: v [m/s],
    p [Pa], E [Pa], rho [kg/m^3], titer [dtex], sigma1/sigma2 [m].
    """
    head = {"schema": STATS_SCHEMA}
    if meta:
        head.update({k: str(v) for k, v in meta.items()})
    lines = ["# " + " ".join(f"{k}={v}" for k, v in head.items()), ",".join(STATS_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in STATS_COLUMNS))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_stats_csv(path):
    """Return ``(columns, rows, header)``; numeric fields are parsed as float."""
    head = {}
    body = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                head.update(_parse_header(line))
            elif line.strip():
                body.append(line)
    rows = list(csv.DictReader(io.StringIO("".join(body))))
    if not body or tuple(rows[0].keys() if rows else next(csv.reader([body[0]]))) != STATS_COLUMNS:
        raise ValidationError("stats", f"expected columns {STATS_COLUMNS}")
    out = []
    for r in rows:
        out.append({k: (v if k == "run_id" else float(v)) for k, v in r.items()})
    return STATS_COLUMNS, out, head
