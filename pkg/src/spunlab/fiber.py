"""Inextensible elastic string model for a spun filament hitting a moving belt.

The centerline is discretized into nodes ``r_k`` spaced ``ds`` apart in arc
length, ordered from the free tip (``k = 0``) to the nozzle. Each time step
solves the implicit Euler discretization of::

    rhoA r_tt = d/ds (T r_s - d/ds (EI r_ss)) + f_ext,   |r_s| = 1

with the edge tensions ``T`` as multipliers of the length constraints and a
per-node multiplier ``lambda >= 0`` for the non-penetration constraint
``r . n_b >= 0`` against the belt plane ``z = 0``. Newton's method is applied
to the coupled system; the contact set is found by an active-set loop.

A node that comes to rest on the belt is *deposited*: from then on it
travels with the belt. The belt moves in ``-x`` in the lab frame so that
web coordinates (belt-fixed) increase with deposition time, ``x_web =
x_lab + belt_speed * t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

from .airflow import (
    DomainGeometry,
    FluctuationStream,
    aerodynamic_line_force,
    build_field,
    drag_jacobian,
    fluctuation_std,
    mean_velocity,
)
from .errors import StepError, ValidationError, require_positive
from .laydown import LaydownSample

__all__ = [
    "DTEX",
    "MaterialInput",
    "MaterialParams",
    "SimulationConfig",
    "FiberState",
    "FiberTrajectory",
    "derive_material",
    "init_fiber",
    "spin_in",
    "node_tangents",
    "assemble_forces",
    "step",
    "simulate",
    "max_edge_strain",
    "laydown_sample",
]

DTEX = 1e-7  # kg/m
BELT_NORMAL = np.array([0.0, 0.0, 1.0])
_NV = 4  # unknowns per node: x, y, z, tension of edge k -> k+1
_BAND = 10


@dataclass(frozen=True)
class MaterialInput:
    """E modulus [Pa], mass density [kg/m^3] and titer [kg/m]."""

    e_modulus: float
    density: float
    titer: float

    @classmethod
    def from_dtex(cls, e_modulus, density, titer_dtex):
        return cls(e_modulus=e_modulus, density=density, titer=titer_dtex * DTEX)

    @classmethod
    def default(cls):
        """Midpoint of the study ranges: 20 GPa, 1050 kg/m^3, 3.68 dtex."""
        return cls.from_dtex(20e9, 1050.0, 3.68)

    @property
    def titer_dtex(self):
        return self.titer / DTEX

    def validate(self):
        require_positive("material.e_modulus", self.e_modulus)
        require_positive("material.density", self.density)
        require_positive("material.titer", self.titer)
        return self


@dataclass(frozen=True)
class MaterialParams:
    line_density: float  # kg/m
    bending_stiffness: float  # N m^2
    radius: float  # m

    @property
    def area(self):
        return math.pi * self.radius**2


def derive_material(material):
    """Circular cross-section with ``rhoA = titer`` and ``EI = E pi R^4 / 4``."""
    material.validate()
    area = material.titer / material.density
    radius = math.sqrt(area / math.pi)
    ei = material.e_modulus * math.pi * radius**4 / 4.0
    return MaterialParams(line_density=material.titer, bending_stiffness=ei, radius=radius)


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 1e-5
    ds: float = 2e-3
    total_time: float = 0.05
    spin_speed: float = 80.0
    newton_tol: float = 1e-9  # relative to ds
    max_newton_iter: int = 30
    friction_coefficient: float = 0.05  # N s/m^2
    regularization: float = 1e-5  # s, bending-rate damping
    seed: int = 0
    n_initial_nodes: int = 10
    gravity: float = 9.81
    contact: bool = True
    clamp_nozzle: bool = True
    max_retries: int = 5
    strain_tol: float = 1e-3
    contact_tol: float = 1e-12  # m

    def validate(self):
        for name in ("dt", "ds", "total_time", "spin_speed", "newton_tol", "strain_tol"):
            require_positive(f"simulation.{name}", getattr(self, name))
        if self.regularization < 0:
            raise ValidationError("simulation.regularization", "must be >= 0")
        if self.friction_coefficient < 0:
            raise ValidationError("simulation.friction_coefficient", "must be >= 0")
        if self.n_initial_nodes < 2:
            raise ValidationError("simulation.n_initial_nodes", "need at least 2 nodes")
        if self.max_newton_iter < 1:
            raise ValidationError("simulation.max_newton_iter", "must be >= 1")
        return self


@dataclass
class FiberState:
    pos: np.ndarray  # (n, 3) m
    vel: np.ndarray  # (n, 3) m/s
    tension: np.ndarray  # (n - 1,) N
    contact: np.ndarray  # (n,) N/m
    deposited: np.ndarray  # (n,) bool
    t_dep: np.ndarray  # (n,) s, nan until deposited
    dep_pos: np.ndarray  # (n, 3) lab position at deposition
    s: np.ndarray  # (n,) material arc length from the initial tip
    fixed: np.ndarray  # (n,) bool, kinematics prescribed by ``vel``
    ds: float
    time: float = 0.0
    nozzle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clamped_top: bool = False
    initial_length: float = 0.0
    newton_iterations: int = 0

    @property
    def n(self):
        return self.pos.shape[0]

    @property
    def spun_length(self):
        """Filament length that has left the nozzle, including the initial piece."""
        length = float(self.s[-1] - self.s[0])
        if self.clamped_top:
            length += float(self.nozzle[2] - self.pos[-1, 2])
        return length

    @property
    def created_length(self):
        """Length spun since initialization, ``u * t`` for a clamped nozzle."""
        return self.spun_length - self.initial_length

    @property
    def gap(self):
        return self.pos @ BELT_NORMAL

    def ghost(self):
        """Prescribed point one segment above the nozzle node (clamped direction)."""
        return self.pos[-1] + self.ds * BELT_NORMAL

    def copy(self):
        return replace(
            self,
            pos=self.pos.copy(),
            vel=self.vel.copy(),
            tension=self.tension.copy(),
            contact=self.contact.copy(),
            deposited=self.deposited.copy(),
            t_dep=self.t_dep.copy(),
            dep_pos=self.dep_pos.copy(),
            s=self.s.copy(),
            fixed=self.fixed.copy(),
            nozzle=self.nozzle.copy(),
        )


def _empty_state(pos, vel, ds, nozzle=None):
    n = pos.shape[0]
    return FiberState(
        pos=np.array(pos, dtype=float),
        vel=np.array(vel, dtype=float),
        tension=np.zeros(n - 1),
        contact=np.zeros(n),
        deposited=np.zeros(n, dtype=bool),
        t_dep=np.full(n, np.nan),
        dep_pos=np.full((n, 3), np.nan),
        s=np.arange(n) * ds,
        fixed=np.zeros(n, dtype=bool),
        ds=ds,
        nozzle=np.zeros(3) if nozzle is None else np.asarray(nozzle, dtype=float),
    )


def init_fiber(config, nozzle):
    """Short straight fiber hanging from ``nozzle``, moving down at spin speed."""
    config.validate()
    nozzle = np.asarray(nozzle, dtype=float)
    n0 = config.n_initial_nodes
    k = np.arange(n0)
    pos = nozzle[None, :] - ((n0 - 1 - k) * config.ds)[:, None] * BELT_NORMAL[None, :]
    vel = np.tile(-config.spin_speed * BELT_NORMAL, (n0, 1))
    state = _empty_state(pos, vel, config.ds, nozzle)
    state.initial_length = (n0 - 1) * config.ds
    if config.clamp_nozzle:
        state.fixed[-1] = True
        state.clamped_top = True
    return state


def spin_in(state, config):
    """Append nozzle nodes for every ``ds`` of filament that has left the nozzle."""
    if not state.clamped_top:
        return state
    below = state.nozzle[2] - state.pos[-1, 2]
    count = int(np.floor(below / state.ds + 1e-9))
    if count <= 0:
        return state
    st = state.copy()
    new_pos = st.pos[-1] + np.outer(np.arange(1, count + 1) * st.ds, BELT_NORMAL)
    new_vel = np.tile(-config.spin_speed * BELT_NORMAL, (count, 1))
    st.fixed[-1] = False
    st.pos = np.vstack([st.pos, new_pos])
    st.vel = np.vstack([st.vel, new_vel])
    st.tension = np.concatenate([st.tension, np.zeros(count)])
    st.contact = np.concatenate([st.contact, np.zeros(count)])
    st.deposited = np.concatenate([st.deposited, np.zeros(count, dtype=bool)])
    st.t_dep = np.concatenate([st.t_dep, np.full(count, np.nan)])
    st.dep_pos = np.vstack([st.dep_pos, np.full((count, 3), np.nan)])
    st.s = np.concatenate([st.s, st.s[-1] + np.arange(1, count + 1) * st.ds])
    fixed = np.zeros(count, dtype=bool)
    fixed[-1] = True
    st.fixed = np.concatenate([st.fixed, fixed])
    return st


def node_tangents(pos):
    """Unit tangents: central differences inside, one-sided at the ends."""
    t = np.empty_like(pos)
    if pos.shape[0] == 1:
        t[:] = BELT_NORMAL
        return t
    t[1:-1] = pos[2:] - pos[:-2]
    t[0] = pos[1] - pos[0]
    t[-1] = pos[-1] - pos[-2]
    norm = np.linalg.norm(t, axis=1)
    bad = norm == 0.0
    t[bad] = BELT_NORMAL
    norm[bad] = 1.0
    return t / norm[:, None]


def _belt_velocity(belt_speed):
    return np.array([-belt_speed, 0.0, 0.0])


def assemble_forces(state, air, material, gravity=9.81, fluctuations=None,
                    friction_coefficient=0.0, belt_speed=0.0):
    """External line forces [N/m] per node at the current state.

    Sum of aerodynamic drag, weight, contact force ``lambda n_b`` and viscous
    friction against belt slip for nodes carrying a contact force.
    """
    f = np.zeros_like(state.pos)
    f[:, 2] -= material.line_density * gravity
    if air is not None:
        u_air = mean_velocity(air, state.pos)
        if fluctuations is not None:
            u_air = u_air + fluctuations
        tb = air.turbulence
        f += aerodynamic_line_force(state.vel - u_air, node_tangents(state.pos), material.radius,
                                    tb.air_density, tb.drag_tangential, tb.drag_normal)
    f += state.contact[:, None] * BELT_NORMAL
    touching = state.contact > 0
    if touching.any():
        slip = state.vel[touching] - _belt_velocity(belt_speed)
        slip -= np.outer(slip @ BELT_NORMAL, BELT_NORMAL)
        f[touching] -= friction_coefficient * slip
    return f


def max_edge_strain(state, edges=None):
    e = np.diff(state.pos, axis=0)
    strain = np.abs(np.linalg.norm(e, axis=1) / state.ds - 1.0)
    if edges is not None:
        strain = strain[edges]
    return float(strain.max()) if strain.size else 0.0


class _Assembler:
    """Residual and banded Jacobian of one implicit step over a node window."""

    def __init__(self, state, air, material, config, dt, fluct, belt_speed, lo, hi):
        self.dt = dt
        self.ds = state.ds
        self.lo, self.hi = lo, hi
        m = hi - lo + 1
        self.m = m
        n = state.n
        rhoA = material.line_density
        self.rhoA = rhoA
        sl = slice(lo, hi + 1)

        presc = (state.fixed | state.deposited)[sl]
        self.free = ~presc
        self.x_old = state.pos[sl].copy()
        v_presc = state.vel[sl].copy()
        v_presc[state.deposited[sl]] = _belt_velocity(belt_speed)
        self.x_presc = self.x_old + dt * v_presc
        self.v_presc = v_presc
        self.x_pred = self.x_old + dt * state.vel[sl]

        w = np.ones(m)
        if lo == 0:
            w[0] = 0.5
        if hi == n - 1:
            w[-1] = 0.5
        self.w = w

        # edges i -> i+1 inside the window with at least one free endpoint
        edge_on = np.zeros(m, dtype=bool)
        edge_on[:-1] = self.free[:-1] | self.free[1:]
        self.edge_on = edge_on

        # bending over the chain (window plus nozzle ghost if present)
        self.ghost = state.clamped_top and hi == n - 1
        L = m + 1 if self.ghost else m
        self.kb = material.bending_stiffness / self.ds**3
        self.eta = config.regularization
        cv = np.zeros(L + 2)
        cv[2:L] = 1.0  # valid centers 1..L-2, shifted by one
        j = np.arange(L)
        self.k0 = (cv[j] + 4 * cv[j + 1] + cv[j + 2])[:m]
        self.k1 = (-2.0 * (cv[j + 1] + cv[j + 2]))[:m]  # (j, j+1)
        self.k2 = cv[j + 2][:m]  # (j, j+2)
        if self.ghost:
            g_old = state.pos[-1] + self.ds * BELT_NORMAL
            self.ghost_old = g_old
        self.c = dt**2 / (rhoA * w * self.ds)  # N -> m
        self.grav = dt**2 * np.array([0.0, 0.0, -config.gravity])

        self.air = air
        if air is not None:
            u_air = mean_velocity(air, state.pos[sl])
            if fluct is not None:
                u_air = u_air + fluct[sl]
            self.u_air = u_air
            # lagged geometry: tangent from the start-of-step configuration
            tan_full = node_tangents(state.pos[max(lo - 1, 0):min(hi + 2, n)])
            off = lo - max(lo - 1, 0)
            self.tangent = tan_full[off:off + m]
            tb = air.turbulence
            self.drag_args = (material.radius, tb.air_density, tb.drag_tangential, tb.drag_normal)
        self.friction = config.friction_coefficient
        self.v_belt = _belt_velocity(belt_speed)
        self.contact_enabled = config.contact

        # static index helpers
        self.nodes = np.arange(m)
        self._build_pattern()

    def _chain(self, X):
        if self.ghost:
            return np.vstack([X, X[-1] + self.ds * BELT_NORMAL])
        return X

    def _bending(self, Y):
        kap = Y[:-2] - 2.0 * Y[1:-1] + Y[2:]
        f = np.zeros_like(Y)
        f[:-2] += kap
        f[1:-1] -= 2.0 * kap
        f[2:] += kap
        return self.kb * f[: self.m]

    def _build_pattern(self):
        self.fi = np.flatnonzero(self.free)
        self.pi = np.flatnonzero(~self.free)
        self.ei = np.flatnonzero(self.edge_on)
        self.eoff = np.flatnonzero(~self.edge_on)
        self._patterns = {}

    def _pattern(self, active):
        """Flat banded-storage indices of all Jacobian entries, in value order."""
        key = active.tobytes()
        if key in self._patterns:
            return self._patterns[key]
        m = self.m
        fi, pi, ei, eo = self.fi, self.pi, self.ei, self.eoff
        act = np.flatnonzero(active)
        i3 = np.arange(3)
        r, c = [], []

        def add(rows, cols):
            rows, cols = np.broadcast_arrays(rows, cols)
            r.append(rows.ravel())
            c.append(cols.ravel())

        # constant unit entries: prescribed x, inactive edges, contact rows z = 0
        add(_NV * pi[:, None] + i3, _NV * pi[:, None] + i3)
        add(_NV * eo + 3, _NV * eo + 3)
        add(_NV * act + 2, _NV * act + 2)
        n_const = sum(a.size for a in r)
        add(_NV * fi[:, None, None] + i3[None, :, None], _NV * fi[:, None, None] + i3[None, None, :])
        up1, up2 = fi[fi + 1 < m], fi[fi + 2 < m]
        dn1, dn2 = fi[fi >= 1], fi[fi >= 2]
        for rows, off in ((up1, 1), (up2, 2), (dn1, -1), (dn2, -2)):
            add(_NV * rows[:, None] + i3, _NV * (rows + off)[:, None] + i3)
        add(_NV * fi[:, None] + i3, (_NV * fi + 3)[:, None])
        add(_NV * dn1[:, None] + i3, (_NV * (dn1 - 1) + 3)[:, None])
        add((_NV * ei + 3)[:, None], _NV * (ei + 1)[:, None] + i3)
        add((_NV * ei + 3)[:, None], _NV * ei[:, None] + i3)
        rows = np.concatenate(r)
        cols = np.concatenate(c)
        # momentum z-rows of contact nodes are replaced by the constraint row
        drop = np.zeros(rows.size, dtype=bool)
        drop[n_const:] = np.isin(rows[n_const:], _NV * act + 2)
        N = _NV * m
        flat = (_BAND + rows - cols) * N + cols
        pat = (flat, np.ones(n_const), drop, act, up1, up2, dn1, dn2)
        self._patterns[key] = pat
        return pat

    def residual_and_jacobian(self, U, active, jacobian=True):
        """Scaled residual (units of length) and banded Jacobian.

        Also stores ``self.contact_hat``: the scaled contact multiplier of
        each active node, i.e. the z-momentum imbalance the belt must carry.
        """
        m, dt, ds = self.m, self.dt, self.ds
        flat, const, drop, act, up1, up2, dn1, dn2 = self._pattern(active)
        fi, pi, ei, eo = self.fi, self.pi, self.ei, self.eoff
        X = U[:, :3]
        Th = U[:, 3].copy()
        Th[eo] = 0.0
        R = np.zeros((m, _NV))

        R[pi, :3] = X[pi] - self.x_presc[pi]

        E = np.zeros((m, 3))
        E[:-1] = X[1:] - X[:-1]
        Tm1 = np.empty(m)
        Tm1[0] = 0.0
        Tm1[1:] = Th[:-1]
        Em1 = np.empty((m, 3))
        Em1[0] = 0.0
        Em1[1:] = E[:-1]
        wds = self.w * ds
        tens = (Th[:, None] * E - Tm1[:, None] * Em1) / wds[:, None]

        damp = self.eta / dt
        Y = self._chain(X)
        Yold = np.vstack([self.x_old, self.ghost_old]) if self.ghost else self.x_old
        fb = self._bending(Y + damp * (Y - Yold))
        mom = X - self.x_pred - tens + self.c[:, None] * fb - self.grav

        vel = (X - self.x_old) / dt
        Jair = None
        if self.air is not None:
            wrel = vel[fi] - self.u_air[fi]
            tan = self.tangent[fi]
            mom[fi] -= (dt**2 / self.rhoA) * aerodynamic_line_force(wrel, tan, *self.drag_args)
            if jacobian:
                Jair = drag_jacobian(wrel, tan, *self.drag_args)
        if act.size:
            slip = vel[act] - self.v_belt
            slip[:, 2] = 0.0
            mom[act] += (dt**2 / self.rhoA) * self.friction * slip
            self.contact_hat = mom[act, 2].copy()
            mom[act, 2] = X[act, 2]
        else:
            self.contact_hat = np.zeros(0)
        R[fi, :3] = mom[fi]
        R[ei, 3] = (np.einsum("ij,ij->i", E[ei], E[ei]) - ds * ds) / (2.0 * ds)
        R[eo, 3] = U[eo, 3]
        if not jacobian:
            return R.ravel(), None

        bend_scale = self.c * self.kb * (1.0 + damp)
        diag = 1.0 + (Th + Tm1) / wds + bend_scale * self.k0
        blocks = np.zeros((fi.size, 3, 3))
        blocks[:, 0, 0] = blocks[:, 1, 1] = blocks[:, 2, 2] = diag[fi]
        if Jair is not None:
            blocks -= (dt / self.rhoA) * Jair
        if act.size:
            pos_in_fi = np.searchsorted(fi, act)
            fr = (dt / self.rhoA) * self.friction
            blocks[pos_in_fi, 0, 0] += fr
            blocks[pos_in_fi, 1, 1] += fr
        k1s = bend_scale * self.k1
        vals = np.concatenate([
            const,
            blocks.ravel(),
            np.repeat(k1s[up1] - Th[up1] / wds[up1], 3),
            np.repeat(bend_scale[up2] * self.k2[up2], 3),
            np.repeat(bend_scale[dn1] * self.k1[dn1 - 1] - Tm1[dn1] / wds[dn1], 3),
            np.repeat(bend_scale[dn2] * self.k2[dn2 - 2], 3),
            (-E[fi] / wds[fi, None]).ravel(),
            (Em1[dn1] / wds[dn1, None]).ravel(),
            (E[ei] / ds).ravel(),
            (-E[ei] / ds).ravel(),
        ])
        vals[drop] = 0.0
        N = _NV * m
        ab = np.bincount(flat, weights=vals,
                         minlength=(2 * _BAND + 1) * N).reshape(2 * _BAND + 1, N)
        return R.ravel(), ab


def _window(state):
    free = ~(state.fixed | state.deposited)
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return None
    return max(0, idx[0] - 2), min(state.n - 1, idx[-1] + 2)


def _advance_prescribed_only(state, dt, belt_speed):
    st = state.copy()
    st.vel[st.deposited] = _belt_velocity(belt_speed)
    st.pos += dt * st.vel
    st.time += dt
    st.contact[:] = 0.0
    return st


def step(state, air, material, config, fluctuations=None, belt_speed=0.0, dt=None):
    """Advance ``state`` by one implicit Euler step.

    Raises :class:`StepError` when Newton does not reach
    ``config.newton_tol * ds`` within ``config.max_newton_iter`` iterations.
    """
    dt = config.dt if dt is None else dt
    win = _window(state)
    if win is None:
        return _advance_prescribed_only(state, dt, belt_speed)
    lo, hi = win
    asm = _Assembler(state, air, material, config, dt, fluctuations, belt_speed, lo, hi)
    m = asm.m
    tol = config.newton_tol * state.ds

    U = np.zeros((m, _NV))
    U[:, :3] = np.where(asm.free[:, None], asm.x_pred, asm.x_presc)
    # warm start tension from the previous step (scaled units)
    t_scale = state.ds * material.line_density / dt**2
    U[:-1, 3] = state.tension[lo:hi] / t_scale
    U[~asm.edge_on, 3] = 0.0
    active = np.zeros(m, dtype=bool)

    total_iter = 0
    for _ in range(50):
        U, iters = _newton(asm, U, active, tol, config.max_newton_iter, state.time)
        total_iter += iters
        if not config.contact:
            break
        gap = U[:, 2]
        lam = np.zeros(m)
        lam[active] = asm.contact_hat
        penetrating = asm.free & ~active & (gap < -config.contact_tol)
        releasing = active & (lam < 0.0)
        if not penetrating.any() and not releasing.any():
            break
        active = (active | penetrating) & ~releasing
        U[active, 2] = np.maximum(U[active, 2], 0.0)
    else:
        raise StepError("contact active set did not settle", time=state.time)

    st = state.copy()
    sl = slice(lo, hi + 1)
    X = U[:, :3]
    free = asm.free
    newvel = np.where(free[:, None], (X - asm.x_old) / dt, asm.v_presc)
    newpos = np.where(free[:, None], X, asm.x_presc)
    # nodes outside the window are prescribed
    outside = np.ones(st.n, dtype=bool)
    outside[sl] = False
    vout = st.vel.copy()
    vout[st.deposited] = _belt_velocity(belt_speed)
    st.pos[outside] += dt * vout[outside]
    st.vel[outside] = vout[outside]
    st.pos[sl] = newpos
    st.vel[sl] = newvel

    tension = np.zeros(st.n - 1)
    th = U[:, 3] * t_scale
    th[~asm.edge_on] = 0.0
    tension[lo:hi] = th[:-1]
    st.tension = tension
    contact = np.zeros(st.n)
    lam = np.zeros(m)
    if config.contact:
        lam[active] = asm.contact_hat
    contact[sl] = lam * material.line_density / dt**2
    st.contact = contact

    newly = np.zeros(st.n, dtype=bool)
    newly[sl] = active
    st.deposited |= newly
    st.t_dep[newly] = state.time + dt
    st.dep_pos[newly] = st.pos[newly]
    st.vel[newly] = _belt_velocity(belt_speed)
    st.time = state.time + dt
    st.newton_iterations = total_iter
    return st


def _newton(asm, U, active, tol, max_iter, time):
    res = np.inf
    for it in range(max_iter + 1):
        R, ab = asm.residual_and_jacobian(U, active)
        res = float(np.max(np.abs(R)))
        if not np.isfinite(res):
            break
        if res <= tol:
            return U, it
        if it == max_iter:
            break
        try:
            delta = solve_banded((_BAND, _BAND), ab, R, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            break
        U = U - delta.reshape(U.shape)
    raise StepError("Newton did not converge", residual_norm=res, time=time)


@dataclass
class FiberTrajectory:
    """Per-step diagnostics and the final fiber state of one run."""

    final_state: FiberState
    times: np.ndarray
    max_strain: np.ndarray
    min_contact: np.ndarray
    max_complementarity: np.ndarray  # max lambda * gap [N/m * m]
    min_gap: np.ndarray
    newton_iterations: np.ndarray
    aborted: bool = False
    error: str = ""
    snapshots: list = field(default_factory=list)


def laydown_sample(state, belt_speed):
    """Deposition events in web (belt-fixed) coordinates, ordered by arc length."""
    idx = np.flatnonzero(state.deposited)
    pos = state.dep_pos[idx].copy()
    t = state.t_dep[idx]
    pos[:, 0] += belt_speed * t
    return LaydownSample(s=state.s[idx], t_dep=t, positions=pos, belt_speed=belt_speed)


def _advance(state, air, material, config, fluct, belt_speed, dt, depth):
    try:
        return step(state, air, material, config, fluct, belt_speed, dt)
    except StepError:
        if depth >= config.max_retries:
            raise
    half = 0.5 * dt
    mid = _advance(state, air, material, config, fluct, belt_speed, half, depth + 1)
    return _advance(mid, air, material, config, fluct, belt_speed, half, depth + 1)


def simulate(process, material_input, geometry=None, config=None, turbulence=None,
             snapshot_every=0, progress=None):
    """Spin, step and deposit a filament until ``config.total_time``.

    ``process.spin_speed`` overrides ``config.spin_speed``. Returns
    ``(FiberTrajectory, LaydownSample)``; on a step failure the trajectory
    is flagged ``aborted`` and the events deposited so far are returned.
    """
    geometry = DomainGeometry() if geometry is None else geometry
    config = SimulationConfig() if config is None else config
    config = replace(config, spin_speed=process.spin_speed).validate()
    material = derive_material(material_input)
    air = build_field(process, geometry, turbulence, seed=config.seed)
    nozzle = np.array([0.0, 0.0, geometry.exit_to_belt_height])
    state = init_fiber(config, nozzle)
    stream = FluctuationStream(air, state.n)
    belt = process.belt_speed

    n_steps = int(round(config.total_time / config.dt))
    diag = np.full((5, n_steps), np.nan)
    snapshots = []
    aborted, error = False, ""
    done = 0
    for i in range(n_steps):
        state = spin_in(state, config)
        if state.n > len(stream):
            stream.append(state.n - len(stream))
        airborne = ~state.deposited
        stream.advance(config.dt, airborne)
        fluct = np.zeros_like(state.pos)
        if air.turbulence.intensity > 0:
            fluct[airborne] = fluctuation_std(air, state.pos[airborne])[:, None] * stream.state[airborne]
        try:
            new = _advance(state, air, material, config, fluct, belt, config.dt, 0)
        except StepError as exc:
            aborted, error = True, str(exc)
            break
        _record(diag, i, state, new)
        state = new
        done = i + 1
        if snapshot_every and (i + 1) % snapshot_every == 0:
            snapshots.append((state.time, state.pos.copy()))
        if progress is not None:
            progress(i + 1, n_steps, state)

    traj = FiberTrajectory(
        final_state=state,
        times=(np.arange(done) + 1) * config.dt,
        max_strain=diag[0, :done],
        min_contact=diag[1, :done],
        max_complementarity=diag[2, :done],
        min_gap=diag[3, :done],
        newton_iterations=diag[4, :done],
        aborted=aborted,
        error=error,
        snapshots=snapshots,
    )
    return traj, laydown_sample(state, belt)


def _record(diag, i, old, new):
    active = ~old.deposited
    n_old = old.n
    # edges touching a node that was dynamic during the step
    edges = np.zeros(new.n - 1, dtype=bool)
    edges[: n_old - 1] = active[:-1] | active[1:]
    diag[0, i] = max_edge_strain(new, edges)
    lam = new.contact[:n_old][active]
    gap = new.gap[:n_old][active]
    diag[1, i] = lam.min() if lam.size else 0.0
    diag[2, i] = float(np.max(lam * gap)) if lam.size else 0.0
    diag[3, i] = gap.min() if gap.size else 0.0
    diag[4, i] = new.newton_iterations
