"""Acceptance criteria 1-10, one tagged test (or group) per criterion.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the summary for one PASS/FAIL line per criterion.
"""

import json
import time

import numpy as np
import pytest

from spunlab.airflow import ProcessParams
from spunlab.bnn import (
    BnnModel,
    BnnSpec,
    Dataset,
    average_elasticity,
    forward,
    input_gradient,
    train,
)
from spunlab.cli import main
from spunlab.doe import build_plan, latin_hypercube
from spunlab.fiber import MaterialInput, SimulationConfig, derive_material, init_fiber, max_edge_strain, simulate, step
from spunlab.laydown import LaydownStats, estimate_A, estimate_sigmas, generate_virtual_web
from spunlab.report import REFERENCE_AE


def ou_trace(A, n, h, rng):
    x = np.empty(n)
    x[0] = rng.standard_normal()
    noise = rng.standard_normal(n - 1) * np.sqrt(2 * A * h)
    for k in range(n - 1):
        x[k + 1] = x[k] - A * x[k] * h + noise[k]
    return x


def test_1_constraint_suite(criterion):
    detail = criterion(1, "constraint suite on the desk-scale run")
    cfg = SimulationConfig()
    assert (cfg.dt, cfg.ds, cfg.total_time) == (1e-5, 2e-3, 0.05)
    t0 = time.perf_counter()
    traj, sample = simulate(ProcessParams(), MaterialInput.default(), config=cfg)
    wall = time.perf_counter() - t0
    strain = np.nanmax(traj.max_strain)
    lam = np.nanmin(traj.min_contact)
    comp = np.nanmax(traj.max_complementarity)
    detail(f"steps={traj.times.size} max_strain={strain:.2e} min_lambda={lam:.2e} "
           f"max_lambda_gap={comp:.2e} deposited={len(sample)} wall={wall:.1f}s")
    assert not traj.aborted
    assert traj.times.size == round(cfg.total_time / cfg.dt)
    assert np.all(np.isfinite(traj.max_strain))
    assert strain <= 1e-3
    assert lam >= 0.0
    assert comp <= 1e-9
    assert len(sample) > 0
    assert wall < 60.0


def test_2_free_fall_oracle(criterion):
    detail = criterion(2, "free fall matches the analytic center of mass")
    cfg = SimulationConfig(n_initial_nodes=12, clamp_nozzle=False, contact=False)
    st = init_fiber(cfg, np.array([0.0, 0.0, 0.3]))
    st.vel[:] = 0.0
    mat = derive_material(MaterialInput.default())
    w = np.ones(st.n)
    w[0] = w[-1] = 0.5
    w /= w.sum()
    r0 = w @ st.pos
    worst = 0.0
    for k in range(1, 101):
        st = step(st, None, mat, cfg)
        t = k * cfg.dt
        exact_r = r0 + np.array([0.0, 0.0, -0.5 * cfg.gravity * t * t])
        exact_v = np.array([0.0, 0.0, -cfg.gravity * t])
        err_r = np.linalg.norm(w @ st.pos - exact_r) / np.linalg.norm(exact_r)
        err_v = np.linalg.norm(w @ st.vel - exact_v) / np.linalg.norm(exact_v)
        worst = max(worst, err_r, err_v)
    detail(f"max relative error over 100 steps={worst:.2e} strain={max_edge_strain(st):.1e}")
    assert worst <= 1e-6


def test_3_gradient_check(criterion):
    detail = criterion(3, "input gradient vs central differences")
    rng = np.random.default_rng(3)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = BnnModel.zeros(n, tuple(int(k) for k in rng.integers(1, 4, n)))
        m = m.with_theta(rng.uniform(-2, 2, m.n_weights))
        x = rng.random((100, n))
        g = input_gradient(m, x)
        fd = np.empty_like(g)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd[:, i] = (forward(m, x + e) - forward(m, x - e)) / (2 * h)
        # relative to the largest gradient component at each point
        scale = np.maximum(np.abs(g).max(axis=1, keepdims=True), 1e-8)
        worst = max(worst, float(np.max(np.abs(g - fd) / scale)))
    detail(f"max relative error={worst:.2e}")
    assert worst < 1e-6


def test_4_bnn_expressiveness(criterion):
    detail = criterion(4, "known network refit and synthetic function fit")
    rng = np.random.default_rng(4)
    truth = BnnModel.zeros(3, 2)
    truth = truth.with_theta(rng.uniform(-2, 2, truth.n_weights))
    X = rng.random((100, 3))
    _, rep_known, _, _ = train(Dataset(X, forward(truth, X)), BnnSpec(), seed=0)

    X2 = rng.random((200, 2))
    y2 = np.sin(3 * X2[:, 0]) + 0.5 * X2[:, 1]
    spec = BnnSpec()
    assert spec.restarts <= 10
    _, rep_sin, _, _ = train(Dataset(X2, y2), spec, seed=0)
    ratio = np.sqrt(rep_sin.test_mse) / np.std(y2)
    detail(f"known-network train MSE={rep_known.train_mse:.1e} sine test RMSE/std={ratio:.1e}")
    assert rep_known.train_mse < 1e-8
    assert ratio < 0.05


def test_5_average_elasticity(criterion):
    detail = criterion(5, "average elasticity vs brute force")
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(1, 6))
        lower = rng.uniform(1, 10, n)
        upper = lower + rng.uniform(1, 10, n)
        m = BnnModel.zeros(n, 2, lower=lower, upper=upper)
        th = rng.uniform(-2, 2, m.n_weights)
        th[-1] = 5.0
        m = m.with_theta(th)
        S = int(rng.integers(5, 50))
        x = rng.uniform(lower, upper, (S, n))
        y = forward(m, m.normalize(x)) + rng.normal(0, 0.1, S)
        ae = average_elasticity(m, x, y)
        brute = np.zeros(n)
        for s in range(S):
            for i in range(n):
                hi = 1e-6 * (upper[i] - lower[i])
                xp, xm = x[s].copy(), x[s].copy()
                xp[i] += hi
                xm[i] -= hi
                d = (forward(m, m.normalize(xp)) - forward(m, m.normalize(xm))) / (2 * hi)
                brute[i] += abs(d) * abs(x[s, i] / y[s]) / S
        worst = max(worst, float(np.max(np.abs(ae - brute))))
    detail(f"max absolute difference={worst:.1e}")
    assert worst < 1e-3


def test_6_estimator_recovery(criterion):
    detail = criterion(6, "sigma and A estimators recover ground truth")
    rng = np.random.default_rng(6)
    notes = []
    for s1, s2 in ((0.05, 0.02), (0.01, 0.03), (1.0, 1.0)):
        xy = rng.normal(size=(100_000, 2)) * [s1, s2]
        e1, e2 = estimate_sigmas(xy)
        notes.append(f"sigma rel err {abs(e1 / s1 - 1):.1e}/{abs(e2 / s2 - 1):.1e}")
        assert e1 == pytest.approx(s1, rel=0.01) and e2 == pytest.approx(s2, rel=0.01)
    for A in (0.1, 0.5, 2.0):
        n, h = 100_000, 0.02 / A
        xy = np.column_stack([ou_trace(A, n, h, rng), ou_trace(A, n, h, rng)])
        est = estimate_A(xy, np.arange(n) * h)
        notes.append(f"A={A}: {est:.3f}")
        assert est == pytest.approx(A, rel=0.10)
    detail("; ".join(notes))


def test_7_lhs_and_plan_size(criterion):
    detail = criterion(7, "LHS stratification and 205-setting plan")
    for n in (1, 10, 100):
        for d in (1, 3, 5):
            x = latin_hypercube(n, d, seed=n * 10 + d)
            for col in x.T:
                counts = np.bincount(np.minimum((col * n).astype(int), n - 1), minlength=n)
                assert np.all(counts == 1)
    plan = build_plan()
    detail(f"default plan settings={len(plan)}")
    assert len(plan) == 205


# criteria 8 and 9 share one mini-study run

MINI = {
    "doe": {"n1": 30, "n2": 0},
    "simulation": {"total_time": 0.03},
    "seed": 2024,
}
ARTIFACTS = ("plan.json", "stats.csv", "model_sigma1.json", "model_sigma2.json", "model_A.json",
             "effects.csv", "ae_table.csv", "ae_report.md")


def _mini_study(out, cfg):
    t0 = time.perf_counter()
    codes = [main(["--config", str(cfg), "--out", str(out), *cmd]) for cmd in
             (["plan"], ["run"], ["train"], ["effects"], ["rank"])]
    return codes, time.perf_counter() - t0


@pytest.fixture(scope="module")
def mini_study(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(MINI))
    first = _mini_study(root / "a", cfg)
    second = _mini_study(root / "b", cfg)
    return root, first, second


@pytest.mark.slow
def test_8_end_to_end_mini_study(criterion, mini_study):
    detail = criterion(8, "30-setting mini-study is byte-identical on rerun")
    root, (codes_a, wall_a), (codes_b, wall_b) = mini_study
    same = [f for f in ARTIFACTS if (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes()]
    detail(f"exit codes={codes_a}/{codes_b} identical={len(same)}/{len(ARTIFACTS)} "
           f"wall={wall_a:.0f}s+{wall_b:.0f}s")
    assert codes_a == [0] * 5 and codes_b == [0] * 5
    assert len(json.loads((root / "a/plan.json").read_text())["settings"]) == 30
    for f in ARTIFACTS:
        assert (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes(), f
    assert wall_a < 30 * 60


@pytest.mark.slow
def test_9_qualitative_report(criterion, mini_study):
    detail = criterion(9, "AE table beside the reference values with commentary")
    root = mini_study[0] / "a"
    text = (root / "ae_report.md").read_text()
    table = (root / "ae_table.csv").read_text().splitlines()
    assert "reference_sigma1" in table[1]
    titer = next(r for r in table[2:] if r.startswith("titer,"))
    assert titer.split(",")[-3] == repr(REFERENCE_AE["titer"]["sigma1"])  # 0.136
    pressure = next(r for r in table[2:] if r.startswith("p,"))
    assert float(pressure.split(",")[-3]) == pytest.approx(0.0, abs=1e-4)
    verdicts = [ln for ln in text.splitlines() if ln.startswith(("Agreement", "Disagreement"))]
    assert len(verdicts) == 3
    detail(" | ".join(verdicts))


def test_10_virtual_web_round_trip(criterion):
    detail = criterion(10, "virtual web re-characterized within 10%")
    truth = LaydownStats(0.05, 0.02, 0.5, 0)
    web = generate_virtual_web(truth, 1, length=5000.0, ds=0.01, seed=10)
    s, xy = web.fiber(0)
    s1, s2 = estimate_sigmas(xy)
    A = estimate_A(xy, s)
    detail(f"sigma1={s1:.4f} sigma2={s2:.4f} A={A:.3f}")
    assert s1 == pytest.approx(0.05, rel=0.1)
    assert s2 == pytest.approx(0.02, rel=0.1)
    assert A == pytest.approx(0.5, rel=0.1)
