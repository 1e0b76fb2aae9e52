"""Blocked neural network regression with Levenberg-Marquardt training.

A blocked network has one hidden block per input; neuron ``j`` of block
``i`` only sees ``x_i``::

    y = v0 + sum_i sum_j v_ij tanh(b_ij + w_ij x_i)

so input effects are additive and their derivatives are available in
closed form. Neurons are stored flat with a ``block`` index array, which
allows a different neuron count per block.

Inputs are normalized to ``[0, 1]`` with the ranges stored on the model;
weights act on normalized inputs and produce raw outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import InsufficientDataError, ValidationError

__all__ = [
    "BnnModel",
    "BnnSpec",
    "Dataset",
    "TrainReport",
    "TrainingError",
    "forward",
    "input_gradient",
    "weight_jacobian",
    "fit",
    "train",
    "cross_validate",
    "confidence_intervals",
    "average_elasticity",
    "elasticity_from_gradients",
    "varying_columns",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "spunlab.bnn/1"


class TrainingError(RuntimeError):
    """LM could not make progress (normal equations stay singular)."""


@dataclass
class BnnModel:
    omega: np.ndarray
    bias: np.ndarray
    v: np.ndarray
    v0: float
    block: np.ndarray
    n_inputs: int
    input_names: tuple = ()
    lower: np.ndarray | None = None  # normalization ranges, raw units
    upper: np.ndarray | None = None
    output: str = "y"
    seed: int = 0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        self.block = np.asarray(self.block, dtype=int).reshape(-1)
        self.v0 = float(self.v0)
        k = self.block.size
        if not (self.omega.size == self.bias.size == self.v.size == k):
            raise ValidationError("model", "omega, bias, v and block must have equal length")
        if k and (self.block.min() < 0 or self.block.max() >= self.n_inputs):
            raise ValidationError("model.block", "block index out of range")
        if not self.input_names:
            self.input_names = tuple(f"x{i}" for i in range(self.n_inputs))
        self.input_names = tuple(self.input_names)
        if len(self.input_names) != self.n_inputs:
            raise ValidationError("model.input_names", "one name per input required")
        if self.lower is None:
            self.lower = np.zeros(self.n_inputs)
        if self.upper is None:
            self.upper = np.ones(self.n_inputs)
        self.lower = np.asarray(self.lower, dtype=float).reshape(self.n_inputs)
        self.upper = np.asarray(self.upper, dtype=float).reshape(self.n_inputs)
        if not np.all(self.upper > self.lower):
            raise ValidationError("model.ranges", "need lower < upper for every input")
        if not all(np.all(np.isfinite(a)) for a in (self.omega, self.bias, self.v)) or not math.isfinite(self.v0):
            raise ValidationError("model", "weights must be finite")

    @classmethod
    def zeros(cls, n_inputs, neurons=2, **kw):
        block = _block_index(n_inputs, neurons)
        z = np.zeros(block.size)
        return cls(z, z.copy(), z.copy(), 0.0, block, n_inputs, **kw)

    @property
    def n_weights(self):
        return 3 * self.block.size + 1

    @property
    def width(self):
        return self.upper - self.lower

    def theta(self):
        return np.concatenate([self.omega, self.bias, self.v, [self.v0]])

    def with_theta(self, theta):
        k = self.block.size
        return BnnModel(theta[:k], theta[k:2 * k], theta[2 * k:3 * k], theta[3 * k], self.block,
                        self.n_inputs, self.input_names, self.lower, self.upper, self.output, self.seed)

    def normalize(self, x_raw):
        return (np.asarray(x_raw, dtype=float) - self.lower) / self.width

    def denormalize(self, x):
        return self.lower + np.asarray(x, dtype=float) * self.width


def _block_index(n_inputs, neurons):
    counts = [neurons] * n_inputs if np.isscalar(neurons) else list(neurons)
    if len(counts) != n_inputs or any(int(c) < 1 for c in counts):
        raise ValidationError("spec.neurons", "need one count >= 1 per input")
    return np.repeat(np.arange(n_inputs), np.asarray(counts, dtype=int))


def _as_batch(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.n_inputs:
        raise ValidationError("x", f"expected {model.n_inputs} inputs, got {x.shape[1]}")
    return x, single


def forward(model, x):
    """Network output at normalized input(s) ``x``."""
    x, single = _as_batch(model, x)
    h = np.tanh(model.bias + model.omega * x[:, model.block])
    y = model.v0 + h @ model.v
    return float(y[0]) if single else y


def input_gradient(model, x):
    """``df/dx_i = sum_j v_ij (1 - tanh^2(b_ij + w_ij x_i)) w_ij`` (normalized inputs)."""
    x, single = _as_batch(model, x)
    h = np.tanh(model.bias + model.omega * x[:, model.block])
    contrib = model.v * (1.0 - h * h) * model.omega
    g = np.zeros((x.shape[0], model.n_inputs))
    for i in range(model.n_inputs):
        g[:, i] = contrib[:, model.block == i].sum(axis=1)
    return g[0] if single else g


def weight_jacobian(model, x):
    """``d f / d theta`` for ``theta = (omega, bias, v, v0)``, shape ``(S, P)``."""
    x, _ = _as_batch(model, x)
    xb = x[:, model.block]
    h = np.tanh(model.bias + model.omega * xb)
    d = model.v * (1.0 - h * h)
    return np.hstack([d * xb, d, h, np.ones((x.shape[0], 1))])


@dataclass(frozen=True)
class BnnSpec:
    neurons: int | tuple = 2
    restarts: int = 10
    max_iter: int = 500
    mu0: float = 1e-3
    mu_factor: float = 10.0
    mu_max: float = 1e12
    tol: float = 1e-9
    init_scale: float = 0.5
    test_fraction: float = 0.2
    standardize: bool = True

    def validate(self):
        if self.restarts < 1 or self.max_iter < 1:
            raise ValidationError("spec", "restarts and max_iter must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValidationError("spec.test_fraction", "must lie in [0, 1)")
        if not (self.mu0 > 0 and self.mu_factor > 1):
            raise ValidationError("spec", "need mu0 > 0 and mu_factor > 1")
        return self


@dataclass
class Dataset:
    X: np.ndarray  # normalized inputs, (S, N)
    y: np.ndarray
    input_names: tuple = ()
    output: str = "y"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.size or self.y.size < 1:
            raise ValidationError("dataset", "need S >= 1 samples with matching X and y")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValidationError("dataset", "non-finite values")
        if not self.input_names:
            self.input_names = tuple(f"x{i}" for i in range(self.X.shape[1]))

    def __len__(self):
        return self.y.size


@dataclass
class TrainReport:
    train_mse: float
    test_mse: float
    cv_mse: float = float("nan")
    iterations: int = 0
    restarts: int = 0
    best_restart: int = 0
    seed: int = 0
    n_train: int = 0
    n_test: int = 0
    restart_test_mse: list = field(default_factory=list)


def _lm(model, theta, X, y, spec):
    """Levenberg-Marquardt on the residual ``f(X; theta) - y``.

    Returns ``(theta, mse, iterations)``.
    """
    P = theta.size
    eye = np.eye(P)
    r = forward(model.with_theta(theta), X) - y
    mse = float(np.mean(r * r))
    mu = spec.mu0
    it = 0
    while it < spec.max_iter and mse > 0.0:
        it += 1
        J = weight_jacobian(model.with_theta(theta), X)
        A = J.T @ J
        g = J.T @ r
        accepted = False
        while mu <= spec.mu_max:
            try:
                step = np.linalg.solve(A + mu * eye, -g)
            except np.linalg.LinAlgError:
                mu *= spec.mu_factor
                continue
            cand = theta + step
            rc = forward(model.with_theta(cand), X) - y
            mse_c = float(np.mean(rc * rc))
            if np.isfinite(mse_c) and mse_c < mse:
                accepted = True
                break
            mu *= spec.mu_factor
        if not accepted:
            break  # no descent at any damping: stationary point
        improvement = (mse - mse_c) / mse
        theta, r, mse = cand, rc, mse_c
        mu = max(mu / spec.mu_factor, 1e-20)
        if improvement < spec.tol:
            break
    if not np.all(np.isfinite(theta)):
        raise TrainingError("non-finite weights")
    return theta, mse, it


def _standardizer(y, on):
    if not on:
        return 0.0, 1.0
    mu = float(np.mean(y))
    sd = float(np.std(y))
    return mu, (sd if sd > 0 else 1.0)


def _unstandardize(model, mu, sd):
    return BnnModel(model.omega, model.bias, model.v * sd, model.v0 * sd + mu, model.block,
                    model.n_inputs, model.input_names, model.lower, model.upper, model.output, model.seed)


def _restart_fits(X, y, spec, seeds, template):
    """One LM fit per seed on standardized targets; yields (model, train_mse, iters)."""
    mu, sd = _standardizer(y, spec.standardize)
    ys = (y - mu) / sd
    P = template.n_weights
    for ss in seeds:
        rng = np.random.default_rng(ss)
        theta0 = rng.uniform(-spec.init_scale, spec.init_scale, P)
        theta, _, it = _lm(template, theta0, X, ys, spec)
        m = _unstandardize(template.with_theta(theta), mu, sd)
        r = forward(m, X) - y
        yield m, float(np.mean(r * r)), it


def _template(n_inputs, spec, input_names=(), lower=None, upper=None, output="y", seed=0):
    return BnnModel.zeros(n_inputs, spec.neurons, input_names=tuple(input_names), lower=lower,
                          upper=upper, output=output, seed=seed)


def _check_size(n_train, P):
    if n_train < P:
        raise InsufficientDataError(f"{n_train} training samples for {P} weights")


def fit(X, y, spec=None, seed=0, **model_kw):
    """Multi-start LM on all samples; keeps the restart with the lowest training MSE."""
    spec = (spec or BnnSpec()).validate()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    tmpl = _template(X.shape[1], spec, seed=seed, **model_kw)
    _check_size(y.size, tmpl.n_weights)
    seeds = np.random.SeedSequence(seed).spawn(spec.restarts)
    best = None
    for m, mse, it in _restart_fits(X, y, spec, seeds, tmpl):
        if best is None or mse < best[1]:
            best = (m, mse, it)
    return best


def _split(n, test_fraction, ss):
    perm = np.random.default_rng(ss).permutation(n)
    n_test = int(round(test_fraction * n))
    if test_fraction > 0 and n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def train(dataset, spec=None, seed=0, lower=None, upper=None):
    """Seeded train/test split, multi-start LM, pick the lowest test MSE.

    Ties are broken by restart index. Without test samples the training
    MSE decides. Returns ``(model, report, train_idx, test_idx)``.
    """
    spec = (spec or BnnSpec()).validate()
    X, y = dataset.X, dataset.y
    ss_split, ss_init = np.random.SeedSequence(seed).spawn(2)
    tr, te = _split(len(y), spec.test_fraction, ss_split)
    tmpl = _template(X.shape[1], spec, dataset.input_names, lower, upper, dataset.output, seed)
    _check_size(tr.size, tmpl.n_weights)

    seeds = ss_init.spawn(spec.restarts)
    best = None
    test_mses = []
    for k, (m, tr_mse, it) in enumerate(_restart_fits(X[tr], y[tr], spec, seeds, tmpl)):
        if te.size:
            r = forward(m, X[te]) - y[te]
            te_mse = float(np.mean(r * r))
        else:
            te_mse = float("nan")
        test_mses.append(te_mse)
        key = te_mse if te.size else tr_mse
        if best is None or key < best[0]:
            best = (key, k, m, tr_mse, te_mse, it)
    _, k, model, tr_mse, te_mse, it = best
    report = TrainReport(train_mse=tr_mse, test_mse=te_mse, iterations=it, restarts=spec.restarts,
                         best_restart=k, seed=seed, n_train=int(tr.size), n_test=int(te.size),
                         restart_test_mse=test_mses)
    return model, report, tr, te


def cross_validate(dataset, spec=None, k=5, seed=0):
    """Mean held-out MSE over ``k`` seed-deterministic folds."""
    spec = (spec or BnnSpec()).validate()
    S = len(dataset)
    if not (isinstance(k, (int, np.integer)) and 2 <= k <= S):
        raise ValidationError("cv.k", f"need 2 <= k <= {S}, got {k!r}")
    ss_fold, ss_fit = np.random.SeedSequence(seed).spawn(2)
    folds = np.array_split(np.random.default_rng(ss_fold).permutation(S), k)
    fit_seeds = ss_fit.generate_state(k)
    errs = []
    for f, held in enumerate(folds):
        mask = np.ones(S, dtype=bool)
        mask[held] = False
        m, _, _ = fit(dataset.X[mask], dataset.y[mask], spec, seed=int(fit_seeds[f]))
        r = forward(m, dataset.X[held]) - dataset.y[held]
        errs.append(float(np.mean(r * r)))
    return float(np.mean(errs))


def _linear_columns(model):
    k = model.block.size
    return np.arange(2 * k, 3 * k + 1)


def confidence_intervals(model, X_train, y_train, X=None, level=0.95, ridge=1e-10,
                         include_noise=False, linear=False, quantile="normal"):
    """Delta-method CI half-widths at normalized inputs ``X``.

    ``s^2 = SSE / (S_train - P)`` and the half-width is
    ``q * s * sqrt(g^T (J^T J + ridge I)^-1 g)`` with ``J`` the weight
    Jacobian over the training set and ``g`` the weight gradient at ``x``.
    ``include_noise`` adds the observation variance (prediction band).
    ``linear`` freezes ``omega`` and ``b`` so only ``v, v0`` count as
    parameters. ``quantile`` is ``"normal"`` or ``"t"`` (``S_train - P`` dof).
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    y_train = np.asarray(y_train, dtype=float).reshape(-1)
    X = X_train if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    if not 0.0 < level < 1.0:
        raise ValidationError("level", "must lie in (0, 1)")
    cols = _linear_columns(model) if linear else slice(None)
    J = weight_jacobian(model, X_train)[:, cols]
    P = J.shape[1]
    dof = y_train.size - P
    if dof <= 0:
        raise InsufficientDataError(f"residual degrees of freedom {dof} <= 0")
    r = forward(model, X_train) - y_train
    s2 = float(r @ r) / dof
    if quantile == "t":
        q = float(sps.t.ppf(0.5 + level / 2.0, dof))
    elif quantile == "normal":
        q = float(sps.norm.ppf(0.5 + level / 2.0))
    else:
        raise ValidationError("quantile", f"unknown quantile {quantile!r}")
    G = weight_jacobian(model, X)[:, cols]
    cov = np.linalg.solve(J.T @ J + ridge * np.eye(P), G.T)
    var = np.einsum("ij,ji->i", G, cov)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + 1.0
    return q * math.sqrt(s2) * np.sqrt(var)


def elasticity_from_gradients(grad_raw, x_raw, y):
    """``AE_i = mean_s |df/dx_i| |x_i / y|`` from raw-unit gradients."""
    grad_raw = np.atleast_2d(np.asarray(grad_raw, dtype=float))
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    bad = np.flatnonzero(y == 0.0)
    if bad.size:
        raise ValidationError("y", f"average elasticity needs y != 0; zero at samples {bad.tolist()}")
    return np.mean(np.abs(grad_raw) * np.abs(x_raw / y[:, None]), axis=0)


def average_elasticity(model, x_raw, y):
    """AE per input in raw units; the chain rule divides by the range width."""
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=float))
    g = input_gradient(model, model.normalize(x_raw)) / model.width
    return elasticity_from_gradients(g, x_raw, y)


def varying_columns(X, rtol=1e-12):
    """Indices of columns that are not constant over the samples."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spread = X.max(axis=0) - X.min(axis=0)
    scale = np.maximum(np.abs(X).max(axis=0), 1e-300)
    return np.flatnonzero(spread > rtol * scale)


def model_to_dict(model, report=None):
    d = {
        "format": MODEL_FORMAT,
        "output": model.output,
        "n_inputs": model.n_inputs,
        "input_names": list(model.input_names),
        "lower": model.lower.tolist(),
        "upper": model.upper.tolist(),
        "block": model.block.tolist(),
        "omega": model.omega.tolist(),
        "bias": model.bias.tolist(),
        "v": model.v.tolist(),
        "v0": model.v0,
        "seed": model.seed,
    }
    if report is not None:
        d["report"] = {k: v for k, v in report.__dict__.items()}
    return d


def model_from_dict(d):
    if d.get("format") != MODEL_FORMAT:
        raise ValidationError("model.format", f"expected {MODEL_FORMAT}, got {d.get('format')!r}")
    return BnnModel(d["omega"], d["bias"], d["v"], d["v0"], d["block"], d["n_inputs"],
                    tuple(d["input_names"]), d["lower"], d["upper"], d["output"], d["seed"])


def _nan_to_none(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _nan_to_none(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_nan_to_none(v) for v in o]
    return o


def save_model(path, model, report=None):
    with open(path, "w") as fh:
        json.dump(_nan_to_none(model_to_dict(model, report)), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d), d.get("report")
