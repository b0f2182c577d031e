"""Flows on chart domains T^a x R^b, prototype driven systems, and suspensions.

States are plain float64 numpy arrays. Angular coordinates (marked by the
owning system's angle mask) are kept reduced to [0, 2*pi). Registry systems
carry a compiled kernel spec (see ``kernels``); arbitrary user fields fall
back to a pure-python RK4 with identical stepping rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import FlowDeconError, IntegrationBlowupError, InvalidFrequencyError

TWO_PI = kernels.TWO_PI
DEFAULT_STEP = 1.0e-3
MAX_STEPS = 1.0e9


def reduce_angles(x: np.ndarray, angle_mask) -> np.ndarray:
    """Canonical representative with angular coordinates in [0, 2*pi)."""
    out = np.array(x, dtype=float)
    for j, is_angle in enumerate(angle_mask):
        if is_angle:
            out[j] = out[j] % TWO_PI
    return out


def circle_dist(a: float, b: float) -> float:
    """Distance between two angles on the circle of circumference 2*pi."""
    d = (a - b) % TWO_PI
    return min(d, TWO_PI - d)


def state_dist(x: np.ndarray, y: np.ndarray, angle_mask) -> float:
    """Max-norm distance respecting angular wrap-around."""
    diffs = [
        circle_dist(x[j], y[j]) if is_angle else abs(x[j] - y[j])
        for j, is_angle in enumerate(angle_mask)
    ]
    return max(diffs) if diffs else 0.0


@dataclass(frozen=True)
class VectorFieldSpec:
    """A vector field on a chart domain.

    ``eval`` must be deterministic and finite on the chart. ``kernel_spec``
    (when present) encodes the same field for the compiled integrator.
    """

    dimension: int
    angle_mask: tuple
    eval: Callable[[np.ndarray], np.ndarray]
    kernel_spec: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.angle_mask) != self.dimension:
            raise FlowDeconError("angle_mask length must equal dimension")


def _py_rk4(f, u, t, n_steps, angle_idx):
    """Uniform-step RK4 mirroring the compiled driver. Returns (u, fail_t)."""
    if n_steps <= 0:
        return u, None
    h = t / n_steps
    for step in range(n_steps):
        k1 = f(u)
        k2 = f(u + 0.5 * h * k1)
        k3 = f(u + 0.5 * h * k2)
        k4 = f(u + h * k3)
        u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for j in angle_idx:
            u[j] = u[j] % TWO_PI
        if not np.all(np.isfinite(u)) or np.any(np.abs(u) > kernels.BLOWUP_BOUND):
            return u, (step + 1) * h
    return u, None


@dataclass(frozen=True)
class FlowSystem:
    """A vector field plus a fixed-step RK4 integrator."""

    field: VectorFieldSpec
    step: float = DEFAULT_STEP

    @property
    def dimension(self) -> int:
        return self.field.dimension

    @property
    def angle_mask(self):
        return self.field.angle_mask

    def _check(self, x: np.ndarray, t: float):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise FlowDeconError(
                f"state has shape {x.shape}, system dimension is {self.dimension}"
            )
        if abs(t) / self.step > MAX_STEPS:
            raise FlowDeconError(f"|t|/dt = {abs(t)/self.step:g} exceeds {MAX_STEPS:g}")
        return x

    def flow(self, x: np.ndarray, t: float) -> np.ndarray:
        x = self._check(x, t)
        if t == 0.0:
            return reduce_angles(x, self.angle_mask)
        if self.field.kernel_spec is not None:
            u0 = np.zeros(kernels.MAX_DIM)
            u0[: self.dimension] = x
            u, fail = kernels.rk4_final(u0, t, self.step, self.field.kernel_spec)
            if not math.isnan(fail):
                raise IntegrationBlowupError(fail, kernels.BLOWUP_BOUND)
            return reduce_angles(u[: self.dimension], self.angle_mask)
        angle_idx = [j for j, a in enumerate(self.angle_mask) if a]
        n_steps = int(np.ceil(abs(t) / self.step))
        u, fail = _py_rk4(self.field.eval, x.copy(), t, n_steps, angle_idx)
        if fail is not None:
            raise IntegrationBlowupError(fail, kernels.BLOWUP_BOUND)
        return reduce_angles(u, self.angle_mask)

    def flow_batch(self, points: Sequence[np.ndarray], t: float):
        """Elementwise flow; propagates the first blowup with its point index."""
        pts = list(points)
        if not pts:
            return []
        if self.field.kernel_spec is not None:
            us = np.zeros((len(pts), self.dimension))
            for i, p in enumerate(pts):
                us[i] = self._check(p, t)
            out, fails = kernels.rk4_batch(us, t, self.step, self.field.kernel_spec)
            bad = np.flatnonzero(~np.isnan(fails))
            if bad.size:
                i = int(bad[0])
                raise IntegrationBlowupError(fails[i], kernels.BLOWUP_BOUND, i)
            return [reduce_angles(row, self.angle_mask) for row in out]
        results = []
        for i, p in enumerate(pts):
            try:
                results.append(self.flow(p, t))
            except IntegrationBlowupError as exc:
                raise IntegrationBlowupError(exc.time, exc.bound, i) from None
        return results

    def flow_batch_times(self, points: Sequence[np.ndarray], times: Sequence[float]):
        """Per-point integration times (signed)."""
        pts = list(points)
        ts = np.asarray(list(times), dtype=float)
        if len(pts) != ts.size:
            raise FlowDeconError("points and times must have equal length")
        if not pts:
            return []
        if self.field.kernel_spec is not None:
            us = np.zeros((len(pts), self.dimension))
            for i, p in enumerate(pts):
                us[i] = self._check(p, float(ts[i]))
            out, fails = kernels.rk4_batch_times(us, ts, self.step, self.field.kernel_spec)
            bad = np.flatnonzero(~np.isnan(fails))
            if bad.size:
                i = int(bad[0])
                raise IntegrationBlowupError(fails[i], kernels.BLOWUP_BOUND, i)
            return [reduce_angles(row, self.angle_mask) for row in out]
        return [self.flow(p, float(t)) for p, t in zip(pts, ts)]

    def sample(self, x: np.ndarray, n_samples: int, dt_sample: float) -> np.ndarray:
        """Trajectory rows at times 0, dt_sample, ..., (n_samples-1)*dt_sample."""
        x = self._check(x, n_samples * dt_sample)
        if self.field.kernel_spec is not None:
            u0 = np.zeros(kernels.MAX_DIM)
            u0[: self.dimension] = x
            out, fail = kernels.rk4_sample(
                u0, n_samples, dt_sample, self.step, self.field.kernel_spec
            )
            if not math.isnan(fail):
                raise IntegrationBlowupError(fail, kernels.BLOWUP_BOUND)
            return out
        rows = np.empty((n_samples, self.dimension))
        rows[0] = x
        cur = x
        for s in range(1, n_samples):
            cur = self.flow(cur, dt_sample)
            rows[s] = cur
        return rows


def flow(sys: FlowSystem, x: np.ndarray, t: float) -> np.ndarray:
    return sys.flow(x, t)


def flow_map_batch(sys: FlowSystem, points, t: float):
    return sys.flow_batch(points, t)


# ---------------------------------------------------------------------------
# warps


@dataclass(frozen=True)
class Warp:
    """Diffeomorphism pair of the chart, with analytic Jacobian."""

    name: str
    wid: int
    params: tuple
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]


def identity_warp(n: int) -> Warp:
    eye = np.eye(n)
    return Warp(
        name="none",
        wid=kernels.WID_NONE,
        params=(),
        forward=lambda x: np.array(x, dtype=float),
        inverse=lambda u: np.array(u, dtype=float),
        jacobian=lambda x: eye.copy(),
    )


def shear_warp(amount: float, d: int, n: int) -> Warp:
    """Shift the first fiber coordinate by amount*sin(theta_1)."""
    f0 = d

    def fwd(x):
        u = np.array(x, dtype=float)
        u[f0] = x[f0] + amount * np.sin(x[0])
        return u

    def inv(u):
        x = np.array(u, dtype=float)
        x[f0] = u[f0] - amount * np.sin(u[0])
        return x

    def jac(x):
        J = np.eye(n)
        J[f0, 0] = amount * np.cos(x[0])
        return J

    return Warp("shear", kernels.WID_SHEAR, (float(amount),), fwd, inv, jac)


def twist_warp(amount: float, n: int) -> Warp:
    """Shift the second driving angle by amount*sin(theta_1)."""

    def fwd(x):
        u = np.array(x, dtype=float)
        u[1] = (x[1] + amount * np.sin(x[0])) % TWO_PI
        return u

    def inv(u):
        x = np.array(u, dtype=float)
        x[1] = (u[1] - amount * np.sin(u[0])) % TWO_PI
        return x

    def jac(x):
        J = np.eye(n)
        J[1, 0] = amount * np.cos(x[0])
        return J

    return Warp("twist", kernels.WID_TWIST, (float(amount),), fwd, inv, jac)


# ---------------------------------------------------------------------------
# prototype driven systems


@dataclass(frozen=True)
class FiberLaw:
    """Named fiber dynamics G(theta, y) from the registry."""

    name: str
    gid: int
    params: tuple
    fiber_dim: int
    angular: bool
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]


def no_fiber() -> FiberLaw:
    return FiberLaw("none", kernels.GID_NONE, (), 0, False, lambda th, y: np.zeros(0))


def linear_damped(a: float = 1.0, c: float = 1.0) -> FiberLaw:
    def g(theta, y):
        return np.array([-a * y[0] + c * np.prod(np.cos(theta))])

    return FiberLaw("linear_damped", kernels.GID_LINEAR_DAMPED, (float(a), float(c)), 1, False, g)


def rotation_fiber(rate: float) -> FiberLaw:
    def g(theta, y):
        return np.array([rate])

    return FiberLaw("rotation_fiber", kernels.GID_ROTATION, (float(rate),), 1, True, g)


def forced_pendulum_fiber(gamma: float = 0.2, amp: float = 1.0) -> FiberLaw:
    def g(theta, y):
        return np.array([y[1], -np.sin(y[0]) - gamma * y[1] + amp * np.cos(theta[0])])

    return FiberLaw(
        "forced_pendulum_fiber", kernels.GID_PENDULUM, (float(gamma), float(amp)), 2, False, g
    )


FIBER_REGISTRY = {
    "none": no_fiber,
    "linear_damped": linear_damped,
    "rotation_fiber": rotation_fiber,
    "forced_pendulum_fiber": forced_pendulum_fiber,
}


@dataclass(frozen=True)
class PrototypeQPD:
    """Driven system theta' = omega, y' = G(theta, y), optionally warped."""

    omega: tuple
    fiber: FiberLaw = field(default_factory=no_fiber)
    warp: Optional[Warp] = None

    @property
    def torus_dim(self) -> int:
        return len(self.omega)

    @property
    def fiber_dim(self) -> int:
        return self.fiber.fiber_dim

    @property
    def dimension(self) -> int:
        return self.torus_dim + self.fiber_dim

    @property
    def angle_mask(self):
        return tuple([True] * self.torus_dim + [self.fiber.angular] * self.fiber_dim)

    def with_warp(self, warp: Warp) -> "PrototypeQPD":
        return replace(self, warp=warp)


def _kernel_spec_for(p: PrototypeQPD, mask_level: int = 0) -> np.ndarray:
    spec = kernels.empty_spec()
    d, m = p.torus_dim, p.fiber_dim
    spec[kernels.IDX_D] = d
    spec[kernels.IDX_M] = m
    spec[kernels.IDX_MASK] = mask_level
    spec[kernels.IDX_GID] = p.fiber.gid
    for i, v in enumerate(p.fiber.params):
        spec[kernels.IDX_GP + i] = v
    if p.warp is not None:
        spec[kernels.IDX_WID] = p.warp.wid
        for i, v in enumerate(p.warp.params):
            spec[kernels.IDX_WP + i] = v
    spec[kernels.IDX_NANG] = d + (m if p.fiber.angular else 0)
    for j, w in enumerate(p.omega):
        spec[kernels.IDX_OMEGA + j] = w
    return spec


def _py_field_for(p: PrototypeQPD, mask_level: int = 0):
    d = p.torus_dim
    omega = np.asarray(p.omega, dtype=float)

    def evaluate(u):
        x = p.warp.inverse(u) if p.warp is not None else np.asarray(u, dtype=float)
        v = np.concatenate([omega, p.fiber.g(x[:d], x[d:])])
        v[:mask_level] = 0.0
        if p.warp is not None:
            v = p.warp.jacobian(x) @ v
        return v

    return evaluate


def make_prototype(p: PrototypeQPD, step: float = DEFAULT_STEP) -> FlowSystem:
    """FlowSystem for a prototype; warp conjugation applied when present."""
    if p.torus_dim < 1:
        raise InvalidFrequencyError("at least one driving angle required")
    if any(w == 0.0 for w in p.omega):
        raise InvalidFrequencyError(f"zero frequency component in omega={p.omega}")
    fld = VectorFieldSpec(
        dimension=p.dimension,
        angle_mask=p.angle_mask,
        eval=_py_field_for(p),
        kernel_spec=_kernel_spec_for(p),
    )
    return FlowSystem(field=fld, step=step)


def masked_prototype_system(p: PrototypeQPD, level: int, step: float = DEFAULT_STEP) -> FlowSystem:
    """Stage flow: the prototype field with the first ``level`` angle rates
    removed in the unwarped chart, conjugated by the warp when present."""
    if not 0 <= level <= p.torus_dim:
        raise FlowDeconError(f"projection level {level} outside 0..{p.torus_dim}")
    fld = VectorFieldSpec(
        dimension=p.dimension,
        angle_mask=p.angle_mask,
        eval=_py_field_for(p, mask_level=level),
        kernel_spec=_kernel_spec_for(p, mask_level=level),
    )
    return FlowSystem(field=fld, step=step)


# ---------------------------------------------------------------------------
# discrete maps and suspensions


@dataclass(frozen=True)
class DiscreteMap:
    """A map of the circle (or a product chart) with an orbit generator."""

    name: str
    step_map: Callable[[np.ndarray], np.ndarray]
    dimension: int = 1
    angle_mask: tuple = (True,)
    invertible: bool = True
    inverse_map: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return self.step_map(np.asarray(x, dtype=float))

    def orbit(self, n: int, rng=None, x0=None) -> np.ndarray:
        """Forward orbit of length n as an (n, dimension) array."""
        if x0 is None:
            if rng is None:
                raise FlowDeconError("orbit needs x0 or an rng to draw one")
            x0 = rng.uniform(0.0, TWO_PI, size=self.dimension)
        out = np.empty((n, self.dimension))
        x = np.asarray(x0, dtype=float)
        for i in range(n):
            out[i] = x
            x = self.step_map(x)
        return out


def circle_rotation_map(alpha: float) -> DiscreteMap:
    def step(x):
        return (x + alpha) % TWO_PI

    def inv(x):
        return (x - alpha) % TWO_PI

    return DiscreteMap(f"rotation({alpha:g})", step, inverse_map=inv)


class DoublingMap(DiscreteMap):
    """phi -> 2*phi mod 2*pi with exact collapse-free orbit generation.

    Forward float iteration loses one mantissa bit per step and hits the fixed
    point 0 after ~52 iterations. Orbits are therefore generated backwards by
    inserting random bits (each stored point is an exact double of its
    predecessor up to one rounding), which keeps long orbits Lebesgue-typical.
    """

    def __init__(self):
        super().__init__(
            "doubling",
            lambda x: (2.0 * x) % TWO_PI,
            invertible=False,
        )

    def orbit(self, n: int, rng=None, x0=None) -> np.ndarray:
        if rng is None:
            raise FlowDeconError("doubling orbits require an rng")
        phi = rng.uniform(0.0, TWO_PI)
        bits = rng.integers(0, 2, size=max(n - 1, 0)).astype(np.float64)
        return kernels.doubling_backward_orbit(phi, bits).reshape(-1, 1)


def doubling_map() -> DoublingMap:
    return DoublingMap()


@dataclass(frozen=True)
class SuspensionSystem:
    """Unit-height suspension semiflow over a base map, driven at rate omega.

    State is (theta, phi): theta in [0, 2*pi) is the height angle advancing
    at rate omega; crossing 2*pi applies the base map to phi. The time-2*pi/omega
    map restricted to the base circle {theta=0} is exactly the base map.
    """

    base: DiscreteMap
    omega: float = TWO_PI  # height 1 corresponds to one time unit

    @property
    def dimension(self) -> int:
        return 1 + self.base.dimension

    @property
    def angle_mask(self):
        return (True,) + tuple(self.base.angle_mask)

    @property
    def period(self) -> float:
        return TWO_PI / self.omega

    def flow(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = (x[0] % TWO_PI) / TWO_PI
        total = s + t / self.period
        n = math.floor(total)
        if n < 0 and not self.base.invertible:
            raise FlowDeconError(
                f"{self.base.name} suspension is a semiflow; backward time crosses the base"
            )
        phi = x[1:]
        if n >= 0:
            for _ in range(n):
                phi = self.base.step_map(phi)
        else:
            for _ in range(-n):
                phi = self.base.inverse_map(phi)
        out = np.empty(self.dimension)
        out[0] = (total - n) * TWO_PI
        out[1:] = phi
        return reduce_angles(out, self.angle_mask)

    def orbit_samples(self, n_samples: int, dt_sample: float, rng) -> np.ndarray:
        """Trajectory samples built on an exact pre-generated base orbit."""
        s0 = rng.uniform(0.0, 1.0)
        heights = s0 + np.arange(n_samples) * (dt_sample / self.period)
        idx = np.floor(heights).astype(np.int64)
        base_orbit = self.base.orbit(int(idx[-1]) + 1, rng=rng)
        out = np.empty((n_samples, self.dimension))
        out[:, 0] = (heights - idx) * TWO_PI
        out[:, 1:] = base_orbit[idx]
        return out

    def base_samples(self, n: int, rng) -> np.ndarray:
        """Points of the base circle distributed per the base invariant measure."""
        orbit = self.base.orbit(max(n, 2), rng=rng)
        return orbit[:n]


def doubling_suspension(omega: float = TWO_PI) -> SuspensionSystem:
    return SuspensionSystem(base=doubling_map(), omega=omega)
