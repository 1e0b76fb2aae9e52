"""Closed-form air flow between the drawing-channel exit and the suctioned belt.

The field is a planar free jet issuing downwards from a slot at height ``H``
above the belt plane ``z = 0``, turned into a wall jet inside a thin
impingement layer and superposed with Darcy through-flow into the belt.
Turbulence enters as per-node Ornstein-Uhlenbeck velocity fluctuations.

Axis convention: ``x`` machine direction (MD), ``y`` cross direction (CD),
``z`` belt normal pointing up towards the spinneret.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError, require_nonnegative, require_positive

__all__ = [
    "DomainGeometry",
    "ProcessParams",
    "TurbulenceConfig",
    "AirField",
    "FluctuationStream",
    "build_field",
    "mean_velocity",
    "sample_fluctuation",
    "aerodynamic_line_force",
    "drag_jacobian",
]

AIR_DENSITY = 1.2  # kg/m^3
AIR_VISCOSITY = 1.8e-5  # Pa s


@dataclass(frozen=True)
class DomainGeometry:
    """Slot and belt geometry [m]; belt permeability in m/(s Pa)."""

    channel_exit_half_width: float = 0.005
    exit_to_belt_height: float = 0.3
    domain_half_width: float = 0.3
    belt_permeability: float = 0.03

    def validate(self):
        require_positive("geometry.channel_exit_half_width", self.channel_exit_half_width)
        require_positive("geometry.exit_to_belt_height", self.exit_to_belt_height)
        require_positive("geometry.domain_half_width", self.domain_half_width)
        require_nonnegative("geometry.belt_permeability", self.belt_permeability)
        return self


@dataclass(frozen=True)
class ProcessParams:
    inlet_air_speed: float = 100.0  # m/s
    suction_pressure: float = 100.0  # Pa
    belt_speed: float = 2.0  # m/s
    spin_speed: float = 80.0  # m/s

    def validate(self):
        require_positive("process.inlet_air_speed", self.inlet_air_speed)
        require_nonnegative("process.suction_pressure", self.suction_pressure)
        require_nonnegative("process.belt_speed", self.belt_speed)
        require_positive("process.spin_speed", self.spin_speed)
        return self


@dataclass(frozen=True)
class TurbulenceConfig:
    """Jet shape, turbulence and drag-law settings.

    ``intensity`` scales the fluctuation std relative to the local mean
    speed. ``drag_tangential``/``drag_normal`` are the dimensionless
    coefficients of the quadratic drag law.
    """

    intensity: float = 0.15
    correlation_time: float = 2e-4  # s
    spread_rate: float = 0.11
    impingement_height: float = 0.01  # m
    air_density: float = AIR_DENSITY
    air_viscosity: float = AIR_VISCOSITY
    drag_tangential: float = 0.15
    drag_normal: float = 1.6

    def validate(self):
        require_nonnegative("turbulence.intensity", self.intensity)
        require_positive("turbulence.correlation_time", self.correlation_time)
        require_positive("turbulence.spread_rate", self.spread_rate)
        require_positive("turbulence.impingement_height", self.impingement_height)
        require_positive("turbulence.air_density", self.air_density)
        require_positive("turbulence.air_viscosity", self.air_viscosity)
        require_nonnegative("turbulence.drag_tangential", self.drag_tangential)
        require_nonnegative("turbulence.drag_normal", self.drag_normal)
        return self


@dataclass(frozen=True)
class AirField:
    geometry: DomainGeometry
    process: ProcessParams
    turbulence: TurbulenceConfig = field(default_factory=TurbulenceConfig)
    seed: int = 0

    @property
    def turbulence_intensity_scale(self):
        return self.turbulence.intensity

    @property
    def fluctuation_correlation_time(self):
        return self.turbulence.correlation_time

    @property
    def virtual_origin(self):
        """Distance above the exit plane at which the jet half-width vanishes."""
        return self.geometry.channel_exit_half_width / self.turbulence.spread_rate

    def half_width(self, distance):
        return self.turbulence.spread_rate * (np.asarray(distance) + self.virtual_origin)

    def centerline_speed(self, distance):
        # planar jet: U_c^2 * b is conserved
        b0 = self.geometry.channel_exit_half_width
        return self.process.inlet_air_speed * np.sqrt(b0 / self.half_width(distance))

    def darcy_velocity(self):
        return self.geometry.belt_permeability * self.process.suction_pressure

    def reynolds_number(self, speed, radius):
        t = self.turbulence
        return 2.0 * radius * np.abs(speed) * t.air_density / t.air_viscosity


def build_field(process, geometry, turbulence=None, seed=0):
    """Validate inputs and return an immutable :class:`AirField`."""
    if turbulence is None:
        turbulence = TurbulenceConfig()
    geometry.validate()
    process.validate()
    turbulence.validate()
    return AirField(geometry=geometry, process=process, turbulence=turbulence, seed=int(seed))


def _smoothstep(q):
    q = np.clip(q, 0.0, 1.0)
    return q * q * (3.0 - 2.0 * q)


def mean_velocity(air, position):
    """Mean air velocity at ``position`` (shape ``(3,)`` or ``(n, 3)``)."""
    pos = np.asarray(position, dtype=float)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    g = air.geometry
    H = g.exit_to_belt_height
    x = np.clip(pos[:, 0], -g.domain_half_width, g.domain_half_width)
    z = np.clip(pos[:, 2], 0.0, H)

    dist = H - z
    b = air.half_width(dist)
    uc = air.centerline_speed(dist)
    xi = x / b
    profile = np.exp(-xi * xi)
    # 1 outside the impingement layer, 0 on the belt face
    blend = _smoothstep(z / air.turbulence.impingement_height)

    out = np.zeros_like(pos)
    out[:, 0] = uc * np.sqrt(2.0 * np.e) * xi * profile * (1.0 - blend)
    out[:, 2] = -uc * profile * blend - air.darcy_velocity() * (1.0 - blend)
    return out[0] if single else out


def fluctuation_std(air, position):
    """Stationary std of the turbulent fluctuation at ``position``."""
    u = mean_velocity(air, position)
    return air.turbulence.intensity * np.linalg.norm(u, axis=-1)


class FluctuationStream:
    """Independent unit-variance OU processes, one 3-vector per fiber node.

    The physical fluctuation is the unit state scaled by the local std.
    Rows are appended as nodes are spun in; the stream owns its generator.
    """

    def __init__(self, air, n_nodes=0, seed=None):
        self.air = air
        self.tau = air.turbulence.correlation_time
        self.rng = np.random.default_rng(air.seed if seed is None else seed)
        self.time = 0.0
        self.state = self.rng.standard_normal((n_nodes, 3))

    def __len__(self):
        return self.state.shape[0]

    def append(self, count=1):
        new = self.rng.standard_normal((count, 3))
        self.state = np.vstack([self.state, new])

    def advance(self, dt, active=None):
        """Exact OU transition over ``dt``; ``active`` masks the rows updated."""
        if dt < 0:
            raise ValueError("cannot advance a stream backwards in time")
        if dt > 0:
            rho = np.exp(-dt / self.tau)
            noise_scale = np.sqrt(-np.expm1(-2.0 * dt / self.tau))
            if active is None:
                self.state = rho * self.state + noise_scale * self.rng.standard_normal(self.state.shape)
            else:
                idx = np.flatnonzero(active)
                noise = self.rng.standard_normal((idx.size, 3))
                self.state[idx] = rho * self.state[idx] + noise_scale * noise
        self.time += dt

    def velocities(self, positions):
        if self.air.turbulence.intensity == 0.0:
            return np.zeros((self.state.shape[0], 3))
        std = fluctuation_std(self.air, positions)
        return std[:, None] * self.state


def sample_fluctuation(air, position, time, stream):
    """Fluctuating velocity at ``position`` after advancing ``stream`` to ``time``.

    ``stream`` must hold as many rows as there are positions.
    """
    stream.advance(time - stream.time)
    pos = np.atleast_2d(np.asarray(position, dtype=float))
    u = stream.velocities(pos)
    return u[0] if np.ndim(position) == 1 else u


def _check_tangent(tangent):
    norms = np.linalg.norm(tangent, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValidationError("tangent", "must be a unit vector (tolerance 1e-9)")


def aerodynamic_line_force(relative_velocity, tangent, radius, air_density=AIR_DENSITY,
                           drag_tangential=0.15, drag_normal=1.6):
    """Quadratic drag per unit fiber length [N/m].

    ``relative_velocity`` is fiber velocity minus air velocity. The
    tangential and normal parts are damped independently::

        f = -rho_air R (c_t |w_t| w_t + c_n |w_n| w_n)
    """
    w = np.asarray(relative_velocity, dtype=float)
    t = np.asarray(tangent, dtype=float)
    _check_tangent(t)
    wt = np.sum(w * t, axis=-1, keepdims=True) * t
    wn = w - wt
    nt = np.linalg.norm(wt, axis=-1, keepdims=True)
    nn = np.linalg.norm(wn, axis=-1, keepdims=True)
    return -air_density * radius * (drag_tangential * nt * wt + drag_normal * nn * wn)


def drag_jacobian(relative_velocity, tangent, radius, air_density=AIR_DENSITY,
                  drag_tangential=0.15, drag_normal=1.6):
    """Derivative of :func:`aerodynamic_line_force` w.r.t. the relative velocity.

    Returns an ``(n, 3, 3)`` array; tangents are assumed normalized.
    """
    w = np.atleast_2d(relative_velocity)
    t = np.atleast_2d(tangent)
    a = np.einsum("ij,ij->i", w, t)
    wn = w - a[:, None] * t
    nn = np.sqrt(np.einsum("ij,ij->i", wn, wn))
    tt = t[:, :, None] * t[:, None, :]
    # d(|a| a)/dw = |a| P + a a^T / |a|; the tangential part collapses to 2|a| t t^T
    jac = (2.0 * drag_tangential * np.abs(a) - drag_normal * nn)[:, None, None] * tt
    jac[:, 0, 0] += drag_normal * nn
    jac[:, 1, 1] += drag_normal * nn
    jac[:, 2, 2] += drag_normal * nn
    safe = np.where(nn > 0, nn, 1.0)
    jac += drag_normal * (wn[:, :, None] * wn[:, None, :]) / safe[:, None, None]
    return -air_density * radius * jac
