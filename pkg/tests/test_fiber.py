import math
from dataclasses import replace

import numpy as np
import pytest

from spunlab.airflow import DomainGeometry, ProcessParams, TurbulenceConfig, aerodynamic_line_force, build_field
from spunlab.errors import ValidationError
from spunlab.fiber import (
    DTEX,
    MaterialInput,
    SimulationConfig,
    assemble_forces,
    derive_material,
    init_fiber,
    max_edge_strain,
    node_tangents,
    simulate,
    spin_in,
    step,
)

MAT = derive_material(MaterialInput.default())


def test_derive_material_hand_values():
    m = derive_material(MaterialInput.from_dtex(10e9, 900.0, 2.83))
    area = 2.83e-7 / 900.0
    assert m.area == pytest.approx(3.144e-10, rel=1e-3)
    assert m.radius == pytest.approx(1.0003e-5, rel=1e-3)
    assert m.bending_stiffness == pytest.approx(7.863e-11, rel=1e-3)
    # exact formulas
    assert m.line_density == 2.83 * DTEX
    assert m.radius == math.sqrt(area / math.pi)
    assert m.bending_stiffness == 10e9 * math.pi * m.radius**4 / 4.0


def test_doubling_e_doubles_bending_stiffness_only():
    a = derive_material(MaterialInput.from_dtex(10e9, 1000.0, 3.0))
    b = derive_material(MaterialInput.from_dtex(20e9, 1000.0, 3.0))
    assert b.bending_stiffness == 2.0 * a.bending_stiffness
    assert b.line_density == a.line_density
    assert b.radius == a.radius


def test_upper_titer_bound_accepted():
    m = derive_material(MaterialInput.from_dtex(30e9, 1200.0, 4.53))
    assert m.line_density == pytest.approx(4.53e-7)


@pytest.mark.parametrize("args", [(0.0, 900.0, 3.0), (1e10, -1.0, 3.0), (1e10, 900.0, 0.0)])
def test_non_positive_material_rejected(args):
    with pytest.raises(ValidationError):
        derive_material(MaterialInput.from_dtex(*args))


def test_invalid_simulation_config():
    with pytest.raises(ValidationError) as err:
        SimulationConfig(dt=0.0).validate()
    assert err.value.field == "simulation.dt"


def test_init_fiber_defaults():
    cfg = SimulationConfig()
    nozzle = np.array([0.0, 0.0, 0.3])
    st = init_fiber(cfg, nozzle)
    assert st.n == 10
    np.testing.assert_allclose(np.linalg.norm(np.diff(st.pos, axis=0), axis=1), cfg.ds, rtol=1e-12)
    np.testing.assert_array_equal(st.pos[-1], nozzle)
    np.testing.assert_allclose(np.linalg.norm(st.vel, axis=1), 80.0)
    assert np.all(st.vel[:, 2] == -80.0)
    other = init_fiber(cfg, nozzle)
    np.testing.assert_array_equal(st.pos, other.pos)
    np.testing.assert_array_equal(st.vel, other.vel)


def test_spin_in_grows_at_spin_speed():
    cfg = SimulationConfig(ds=2e-3, spin_speed=80.0)
    st = init_fiber(cfg, np.array([0.0, 0.0, 100.0]))
    n0 = st.n
    dt = 1e-3
    for _ in range(1000):
        st.pos[-1, 2] -= cfg.spin_speed * dt
        st = spin_in(st, cfg)
    assert st.created_length == pytest.approx(80.0, abs=1e-9)
    assert st.n - n0 == int(round(80.0 / cfg.ds))
    np.testing.assert_allclose(np.diff(st.s), cfg.ds)


def test_spin_in_inserts_nozzle_node_after_one_segment():
    cfg = SimulationConfig()
    st = init_fiber(cfg, np.array([0.0, 0.0, 0.3]))
    st.pos[-1, 2] -= 0.4 * cfg.ds
    assert spin_in(st, cfg).n == st.n
    st.pos[-1, 2] -= 0.6 * cfg.ds
    new = spin_in(st, cfg)
    assert new.n == st.n + 1
    assert new.fixed[-1] and not new.fixed[-2]
    np.testing.assert_allclose(new.pos[-1], [0.0, 0.0, 0.3], atol=1e-15)
    np.testing.assert_array_equal(new.vel[-1], [0.0, 0.0, -cfg.spin_speed])


def _free_fiber(n=12, ds=2e-3, z0=0.02, vel=None):
    cfg = SimulationConfig(ds=ds, n_initial_nodes=n, clamp_nozzle=False, contact=False)
    st = init_fiber(cfg, np.array([0.0, 0.0, z0]))
    st.vel[:] = 0.0 if vel is None else vel
    return st, cfg


def test_assemble_forces_gravity_only():
    st, cfg = _free_fiber()
    f = assemble_forces(st, None, MAT, gravity=9.81)
    expected = np.tile([0.0, 0.0, -MAT.line_density * 9.81], (st.n, 1))
    np.testing.assert_array_equal(f, expected)


def test_assemble_forces_contact_and_friction():
    st, cfg = _free_fiber()
    st.contact[0] = 2.5e-3
    f = assemble_forces(st, None, MAT, gravity=9.81, friction_coefficient=0.3, belt_speed=0.0)
    # node at rest on a resting belt: no friction, contact along +z
    np.testing.assert_allclose(f[0] - [0, 0, -MAT.line_density * 9.81], [0.0, 0.0, 2.5e-3], atol=1e-18)
    st.vel[0] = [0.4, -0.2, 0.0]
    f = assemble_forces(st, None, MAT, gravity=0.0, friction_coefficient=0.3, belt_speed=1.0)
    # slip relative to belt velocity (-1, 0, 0)
    np.testing.assert_allclose(f[0], [-0.3 * 1.4, 0.3 * 0.2, 2.5e-3], rtol=1e-12)


def test_assemble_forces_includes_drag():
    air = build_field(ProcessParams(), DomainGeometry(), TurbulenceConfig(intensity=0.0))
    st, cfg = _free_fiber(z0=0.25)
    f = assemble_forces(st, air, MAT, gravity=0.0)
    from spunlab.airflow import mean_velocity

    expected = aerodynamic_line_force(st.vel - mean_velocity(air, st.pos), node_tangents(st.pos), MAT.radius)
    np.testing.assert_allclose(f, expected, rtol=1e-14)


def test_clamped_straight_fiber_is_in_equilibrium():
    st, cfg = _free_fiber()
    st.fixed[0] = st.fixed[-1] = True
    cfg = replace(cfg, gravity=0.0)
    new = step(st, None, MAT, cfg)
    np.testing.assert_allclose(new.pos, st.pos, atol=1e-12, rtol=0)
    np.testing.assert_allclose(new.vel, 0.0, atol=1e-12)


def _com(st):
    w = np.ones(st.n)
    w[0] = w[-1] = 0.5
    return (w[:, None] * st.pos).sum(0) / w.sum(), (w[:, None] * st.vel).sum(0) / w.sum()


def test_free_fall_matches_analytic_center_of_mass():
    st, cfg = _free_fiber(z0=0.3)
    g = cfg.gravity
    r0, v0 = _com(st)
    dt = cfg.dt
    for k in range(1, 101):
        st = step(st, None, MAT, cfg)
        r, v = _com(st)
        t = k * dt
        exact_v = v0 + np.array([0, 0, -g * t])
        exact_r = r0 + v0 * t + np.array([0, 0, -0.5 * g * t * t])
        assert np.linalg.norm(v - exact_v) <= 1e-6 * np.linalg.norm(exact_v)
        assert np.linalg.norm(r - exact_r) <= 1e-6 * np.linalg.norm(exact_r)
    assert max_edge_strain(st) < 1e-9


def test_momentum_balance_without_constraints():
    rng = np.random.default_rng(4)
    st, cfg = _free_fiber(n=15, z0=0.03, vel=rng.normal(size=(15, 3)) * 0.5)
    # bend the fiber a little
    st.pos[:, 0] += 1e-4 * np.sin(np.linspace(0, 3, st.n))
    cfg = replace(cfg, dt=1e-4, newton_tol=1e-12)
    w = np.ones(st.n)
    w[0] = w[-1] = 0.5
    mass = MAT.line_density * cfg.ds * w
    for _ in range(5):
        new = step(st, None, MAT, cfg)
        dp = (mass[:, None] * (new.vel - st.vel)).sum(0)
        impulse = np.array([0.0, 0.0, -mass.sum() * cfg.gravity * cfg.dt])
        assert np.linalg.norm(dp - impulse) <= 1e-8 * np.linalg.norm(impulse)
        st = new


def test_node_below_belt_is_pushed_back_with_positive_multiplier():
    cfg = SimulationConfig(n_initial_nodes=10, clamp_nozzle=False)
    st = init_fiber(cfg, np.zeros(3))
    # free fiber tilted by 30 degrees with its tip just below the belt
    k = np.arange(st.n)
    st.pos = np.column_stack([k * cfg.ds * np.cos(np.pi / 6), np.zeros(st.n), k * cfg.ds * 0.5 - 1e-4])
    st.vel[:] = 0.0
    assert st.pos[0, 2] < 0
    new = step(st, None, MAT, cfg)
    assert new.deposited[0]
    assert abs(new.gap[0]) <= cfg.contact_tol
    assert new.contact[0] > 0
    assert np.all(new.contact >= 0)
    assert np.all(new.gap >= -cfg.contact_tol)
    assert max_edge_strain(new) <= cfg.strain_tol


def _short_run(total_time=0.008, belt_speed=2.0, seed=0):
    cfg = SimulationConfig(total_time=total_time, seed=seed)
    proc = ProcessParams(belt_speed=belt_speed)
    return simulate(proc, MaterialInput.default(), DomainGeometry(), cfg)


def test_simulate_is_deterministic():
    (t1, s1), (t2, s2) = _short_run(), _short_run()
    assert len(s1) > 0
    for a in ("s", "t_dep", "positions"):
        assert getattr(s1, a).tobytes() == getattr(s2, a).tobytes()
    assert t1.final_state.pos.tobytes() == t2.final_state.pos.tobytes()


def test_zero_belt_speed_keeps_deposits_in_place():
    traj, sample = _short_run(belt_speed=0.0)
    st = traj.final_state
    assert st.deposited.sum() > 0
    np.testing.assert_array_equal(st.pos[st.deposited], st.dep_pos[st.deposited])


def test_simulation_invariants_and_spun_length():
    traj, sample = _short_run(total_time=0.01)
    cfg = SimulationConfig()
    st = traj.final_state
    assert not traj.aborted
    assert np.nanmax(traj.max_strain) <= cfg.strain_tol
    assert np.nanmin(traj.min_contact) >= 0.0
    assert np.nanmax(traj.max_complementarity) <= 1e-9
    assert st.created_length == pytest.approx(80.0 * 0.01, rel=1e-9)
    # the segment spun during the last step is inserted at the start of the next one
    assert spin_in(st, cfg).n == 10 + int(np.floor(st.created_length / cfg.ds + 1e-9))
    # deposited positions sit on the belt plane
    assert np.all(np.abs(sample.positions[:, 2]) <= cfg.contact_tol)
    # belt moves in -x in the lab frame, so web x = lab x + belt_speed * t
    dep = st.deposited
    np.testing.assert_allclose(st.pos[dep, 0] + 2.0 * st.time,
                               st.dep_pos[dep, 0] + 2.0 * st.t_dep[dep], atol=1e-12)


def test_different_seeds_change_the_laydown():
    _, a = _short_run(seed=1)
    _, b = _short_run(seed=2)
    n = min(len(a), len(b))
    assert n > 0 and not np.array_equal(a.positions[:n], b.positions[:n])
