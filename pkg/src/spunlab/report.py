"""Effect curves, average-elasticity ranking and the generated commentary."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .bnn import average_elasticity, input_gradient
from .doe import INPUT_NAMES
from .errors import ValidationError

__all__ = [
    "EffectCurve",
    "effect_curves",
    "write_effects_csv",
    "ae_table",
    "write_ae_csv",
    "commentary",
    "write_effects_svg",
    "REFERENCE_AE",
    "INPUT_LABELS",
    "OUTPUTS",
]

OUTPUTS = ("sigma1", "sigma2", "A")
INPUT_LABELS = {
    "v": "air speed",
    "p": "suction pressure",
    "E": "E modulus",
    "rho": "density",
    "titer": "line density",
}
# published average elasticities, kept only as a qualitative comparison column
REFERENCE_AE = {
    "v": {"sigma1": 0.044, "sigma2": 0.134, "A": 0.087},
    "p": {"sigma1": 0.0, "sigma2": 0.00001, "A": 0.019},
    "E": {"sigma1": 0.029, "sigma2": 0.007, "A": 0.056},
    "rho": {"sigma1": 0.007, "sigma2": 0.002, "A": 0.022},
    "titer": {"sigma1": 0.136, "sigma2": 0.061, "A": 0.203},
}

EFFECTS_COLUMNS = ("output", "input", "k", "x_norm", "x_raw", "dfdx_norm", "dfdx_raw", "sign_change")
AE_COLUMNS = ("input", "label") + tuple(f"ae_{o}" for o in OUTPUTS) + tuple(f"rank_{o}" for o in OUTPUTS) \
    + tuple(f"reference_{o}" for o in OUTPUTS)


@dataclass
class EffectCurve:
    output: str
    input: str
    x_norm: np.ndarray
    x_raw: np.ndarray
    dfdx_norm: np.ndarray  # d output / d normalized input
    dfdx_raw: np.ndarray  # d output / d raw input
    sign_changes: list  # raw input values where the effect changes sign

    def __post_init__(self):
        if np.any(np.diff(self.x_norm) <= 0):
            raise ValidationError("effects.grid", "grid must be strictly increasing")


def _sign_changes(x, g):
    out = []
    for k in range(1, len(g)):
        a, b = g[k - 1], g[k]
        if a * b < 0:
            out.append(float(x[k - 1] + (x[k] - x[k - 1]) * a / (a - b)))
    return out


def effect_curves(model, grid=41, baseline=0.5):
    """One curve per model input over ``[0, 1]``, others held at ``baseline``."""
    if grid < 2:
        raise ValidationError("effects.grid", "need at least 2 grid points")
    u = np.linspace(0.0, 1.0, grid)
    curves = []
    for i, name in enumerate(model.input_names):
        X = np.full((grid, model.n_inputs), float(baseline))
        X[:, i] = u
        g = input_gradient(model, X)[:, i]
        x_raw = model.lower[i] + u * model.width[i]
        curves.append(EffectCurve(model.output, name, u, x_raw, g, g / model.width[i],
                                  _sign_changes(x_raw, g)))
    return curves


def _f(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _header(schema, meta):
    head = {"schema": schema}
    head.update({k: str(v) for k, v in (meta or {}).items()})
    return "# " + " ".join(f"{k}={v}" for k, v in head.items())


def write_effects_csv(path, curves, meta=None):
    lines = [_header("spunlab.effects/1", meta), ",".join(EFFECTS_COLUMNS)]
    for c in curves:
        flips = np.zeros(len(c.x_norm), dtype=int)
        g = c.dfdx_norm
        flips[1:] = (g[1:] * g[:-1] < 0).astype(int)
        for k in range(len(c.x_norm)):
            lines.append(",".join(_f(v) for v in (c.output, c.input, k, c.x_norm[k], c.x_raw[k],
                                                   c.dfdx_norm[k], c.dfdx_raw[k], flips[k])))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _ranks(values):
    """1 = largest; NaN entries get rank 0 (not ranked)."""
    names = [n for n, v in values.items() if not math.isnan(v)]
    order = sorted(names, key=lambda n: (-values[n], n))
    ranks = {n: 0 for n in values}
    ranks.update({n: r + 1 for r, n in enumerate(order)})
    return ranks


def ae_table(models, x_raw, outputs_y, input_names=INPUT_NAMES):
    """AE matrix ``{input: {output: value}}`` plus per-output ranks.

    ``models`` maps output name to model; ``x_raw`` is ``(S, 5)`` in
    ``input_names`` order; ``outputs_y`` maps output name to ``y`` samples.
    Inputs a model does not use get NaN.
    """
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=float))
    ae = {n: {o: float("nan") for o in OUTPUTS} for n in input_names}
    for out, model in models.items():
        cols = [input_names.index(n) for n in model.input_names]
        vals = average_elasticity(model, x_raw[:, cols], outputs_y[out])
        for n, val in zip(model.input_names, vals):
            ae[n][out] = float(val)
    ranks = {o: _ranks({n: ae[n][o] for n in input_names}) for o in OUTPUTS}
    return ae, ranks


def write_ae_csv(path, ae, ranks, meta=None):
    lines = [_header("spunlab.ae/1", meta), ",".join(AE_COLUMNS)]
    for n in ae:
        row = [n, INPUT_LABELS.get(n, n)]
        row += [_f(ae[n][o]) for o in OUTPUTS]
        row += [str(ranks[o][n]) for o in OUTPUTS]
        ref = REFERENCE_AE.get(n, {})
        row += [_f(ref.get(o, float("nan"))) for o in OUTPUTS]
        lines.append(",".join(row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt_ae(v):
    return "n/a" if math.isnan(v) else f"{v:.4g}"


def commentary(ae, ranks, curves=(), notes=()):
    """Markdown comparing the computed ranking with the reference values."""
    names = list(ae)
    out = ["# Average elasticity ranking", ""]
    out.append("| input | " + " | ".join(f"AE {o}" for o in OUTPUTS) + " | "
               + " | ".join(f"reference {o}" for o in OUTPUTS) + " |")
    out.append("|---" * (1 + 2 * len(OUTPUTS)) + "|")
    for n in names:
        ref = REFERENCE_AE.get(n, {})
        out.append(f"| {INPUT_LABELS.get(n, n)} | "
                   + " | ".join(_fmt_ae(ae[n][o]) for o in OUTPUTS) + " | "
                   + " | ".join(_fmt_ae(ref.get(o, float('nan'))) for o in OUTPUTS) + " |")
    out += ["", "Reference values are published averages over a CFD-driven study; they are a",
            "qualitative yardstick only and are not expected to be reproduced here.", ""]

    for o in OUTPUTS:
        ours = [n for n in names if ranks[o][n] > 0]
        ours.sort(key=lambda n: ranks[o][n])
        out.append(f"## {o}")
        out.append("")
        if not ours:
            out += ["No model for this output.", ""]
            continue
        ref = {n: REFERENCE_AE[n][o] for n in ours if n in REFERENCE_AE}
        ref_order = sorted(ref, key=lambda n: (-ref[n], n))
        out.append("Computed ranking: " + ", ".join(f"{INPUT_LABELS.get(n, n)} ({_fmt_ae(ae[n][o])})" for n in ours))
        out.append("")
        out.append("Reference ranking over the same inputs: " + ", ".join(INPUT_LABELS.get(n, n) for n in ref_order))
        out.append("")
        if ours[0] == ref_order[0]:
            out.append(f"Agreement: both rank {INPUT_LABELS.get(ours[0], ours[0])} first.")
        else:
            out.append(f"Disagreement: computed top input is {INPUT_LABELS.get(ours[0], ours[0])}, "
                       f"reference top input is {INPUT_LABELS.get(ref_order[0], ref_order[0])}.")
        if len(ours) >= 3:
            rho = spearmanr([ae[n][o] for n in ours], [ref[n] for n in ours]).statistic
            out.append(f"Spearman rank correlation with the reference: {rho:.3f}.")
        skipped = [INPUT_LABELS.get(n, n) for n in names if ranks[o][n] == 0]
        if skipped:
            out.append("Not ranked (constant in the data, effect not identifiable): " + ", ".join(skipped) + ".")
        out.append("")

    flips = [c for c in curves if c.sign_changes]
    out.append("## Sign changes of the effect curves")
    out.append("")
    if flips:
        for c in flips:
            xs = ", ".join(f"{x:.4g}" for x in c.sign_changes)
            out.append(f"- {INPUT_LABELS.get(c.input, c.input)} vs {c.output}: sign change at {xs}; "
                       "the scalar AE hides this reversal.")
    else:
        out.append("None of the effect curves changes sign on its grid.")
    out.append("")
    for line in notes:
        out.append(line)
    return "\n".join(out).rstrip() + "\n"


def write_effects_svg(path, curves):
    """Deterministic SVG line plots of the effect curves (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    inputs = sorted({c.input for c in curves}, key=lambda n: INPUT_NAMES.index(n) if n in INPUT_NAMES else 99)
    with matplotlib.rc_context({"svg.hashsalt": "spunlab", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(1, len(inputs), figsize=(3.2 * len(inputs), 3.0), squeeze=False)
        for ax, name in zip(axes[0], inputs):
            for c in curves:
                if c.input == name:
                    ax.plot(c.x_norm, c.dfdx_norm, label=c.output)
            ax.axhline(0.0, color="0.6", lw=0.6)
            ax.set_xlabel(f"{INPUT_LABELS.get(name, name)} (normalized)")
            ax.legend(fontsize=7)
        axes[0][0].set_ylabel("effect df/dx")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
