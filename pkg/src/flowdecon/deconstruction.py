"""Nested stage bundles: leaves, conditional samples, laminar flows, returns.

A ``Deconstruction`` holds the ambient flow together with the chain of stage
flows Phi_0 (full), Phi_1, ..., Phi_d (angle rates progressively removed).
Leaves are represented by samples plus a membership predicate, never meshes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dynamics import (
    TWO_PI,
    FlowSystem,
    PrototypeQPD,
    make_prototype,
    masked_prototype_system,
    reduce_angles,
    state_dist,
)
from .eigenfunctions import CircleEigenfunction
from .errors import (
    FlowDeconError,
    InsufficientRecurrenceError,
    LeafEscapeError,
)
from .geometry import MetricSpec, euclidean_metric, projected_field_chain


def _wrap_pi(delta):
    return (delta + np.pi) % TWO_PI - np.pi


@dataclass(frozen=True)
class LeafSpec:
    """Joint level set of the first ``level`` eigenfunctions.

    ``target_phases`` are the pinned values of arg z_j (radians); the default
    zero vector is the base leaf z_1 = ... = z_k = 1.
    """

    level: int
    zs: tuple
    target_phases: tuple
    tolerance: float = 1.0e-8

    def phase_errors(self, x) -> np.ndarray:
        return np.array(
            [abs(_wrap_pi(z.phase(x) - t)) for z, t in zip(self.zs, self.target_phases)]
        )

    def membership(self, x) -> float:
        """max_j |z_j(x) - e^(i target_j)| (chordal distance on the circle)."""
        errs = self.phase_errors(x)
        return float(np.max(2.0 * np.abs(np.sin(errs / 2.0)))) if errs.size else 0.0

    def contains(self, x, scale: float = 1.0) -> bool:
        return self.membership(x) <= scale * self.tolerance


@dataclass(frozen=True)
class LeafSampleMeasure:
    """Uniform-weight empirical measure supported on a leaf."""

    leaf: LeafSpec
    samples: np.ndarray  # (n, dim)
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class Deconstruction:
    """Ambient system plus the stage-flow chain and eigenfunction data."""

    system: FlowSystem
    zs: tuple
    stage_flows: tuple  # index k = flow of the level-k projected field; 0 = full
    leaf_tolerance: float = 1.0e-8

    @property
    def d(self) -> int:
        return len(self.zs)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([z.omega for z in self.zs])

    def leaf(self, k: int, target_phases=None) -> LeafSpec:
        if not 1 <= k <= self.d:
            raise FlowDeconError(f"leaf level {k} outside 1..{self.d}")
        targets = tuple(float(t) for t in (target_phases or [0.0] * k))
        return LeafSpec(
            level=k, zs=tuple(self.zs[:k]), target_phases=targets, tolerance=self.leaf_tolerance
        )

    def laminar_flow(self, k: int, x: np.ndarray, t: float) -> np.ndarray:
        """Flow of the level-k projected field."""
        if not 0 <= k <= self.d:
            raise FlowDeconError(f"stage {k} outside 0..{self.d}")
        return self.stage_flows[k].flow(x, t)


def deconstruct_prototype(
    p: PrototypeQPD, step: float = 1.0e-3, leaf_tolerance: float = 1.0e-8,
    zs: Optional[Sequence[CircleEigenfunction]] = None, declared_d: Optional[int] = None,
) -> Deconstruction:
    """Stage bundle for a registry prototype (exact masked stage fields)."""
    from .eigenfunctions import analytic_eigenfunctions

    all_zs = list(zs) if zs is not None else analytic_eigenfunctions(p)
    d = declared_d if declared_d is not None else len(all_zs)
    all_zs = all_zs[:d]
    flows = [make_prototype(p, step)] + [
        masked_prototype_system(p, k, step) for k in range(1, d + 1)
    ]
    return Deconstruction(
        system=flows[0], zs=tuple(all_zs), stage_flows=tuple(flows), leaf_tolerance=leaf_tolerance
    )


def deconstruct_generic(
    system: FlowSystem,
    zs: Sequence[CircleEigenfunction],
    metric: Optional[MetricSpec] = None,
    h: float = 1.0e-5,
    leaf_tolerance: float = 1.0e-8,
) -> Deconstruction:
    """Stage bundle using the finite-difference projection chain (slow path)."""
    from .dynamics import VectorFieldSpec
    from .geometry import orthonormalizing_metric

    zs = list(zs)
    metric = metric or orthonormalizing_metric(zs, euclidean_metric(system.dimension), h)
    flows: List[FlowSystem] = [system]
    for k in range(1, len(zs) + 1):
        pf = projected_field_chain(system.field.eval, zs, metric, k, h)
        fld = VectorFieldSpec(
            dimension=system.dimension, angle_mask=system.angle_mask, eval=pf.eval
        )
        flows.append(FlowSystem(field=fld, step=system.step))
    return Deconstruction(
        system=system, zs=tuple(zs), stage_flows=tuple(flows), leaf_tolerance=leaf_tolerance
    )


# ---------------------------------------------------------------------------
# leaf sampling


def _phase_batch(z: CircleEigenfunction, rows: np.ndarray) -> np.ndarray:
    fast = getattr(z, "phase_batch", None)
    if fast is not None:
        return fast(rows)
    return np.array([z.phase(row) for row in rows])


def _slide_to_phase(
    bundle: Deconstruction, x: np.ndarray, j: int, target: float, tol: float, max_iter: int = 12
) -> np.ndarray:
    """Move x along the stage-(j-1) flow until arg z_j hits the target phase.

    The phase advances at exactly omega_j along that flow, so this is a
    rapidly converging fixed-point slide (bisection not needed).
    """
    z = bundle.zs[j - 1]
    flow = bundle.stage_flows[j - 1]
    for _ in range(max_iter):
        err = _wrap_pi(z.phase(x) - target)
        if abs(err) <= tol:
            return x
        x = flow.flow(x, -err / z.omega)
    err = _wrap_pi(z.phase(x) - target)
    if abs(err) > tol:
        raise FlowDeconError(f"phase slide stalled at |err|={abs(err):.3g} (stage {j})")
    return x


def _bisect_crossing(
    system: FlowSystem, z: CircleEigenfunction, x_lo: np.ndarray, dt: float, target: float,
    tol: float,
) -> np.ndarray:
    """Bisection along the full flow for the phase-target crossing in [0, dt]."""
    lo, hi = 0.0, dt
    f_lo = _wrap_pi(z.phase(x_lo) - target)
    if f_lo > 0:  # crossing already behind: land directly via phase rate
        return _slide_one(system, z, x_lo, target, tol)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        x_mid = system.flow(x_lo, mid)
        f_mid = _wrap_pi(z.phase(x_mid) - target)
        if abs(f_mid) <= tol:
            return x_mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    return system.flow(x_lo, 0.5 * (lo + hi))


def _slide_one(system: FlowSystem, z: CircleEigenfunction, x, target, tol, max_iter=12):
    for _ in range(max_iter):
        err = _wrap_pi(z.phase(x) - target)
        if abs(err) <= tol:
            return x
        x = system.flow(x, -err / z.omega)
    return x


def sample_leaf(
    bundle: Deconstruction,
    k: int,
    n_samples: int,
    burn_in: float = 50.0,
    rng=None,
    x0: Optional[np.ndarray] = None,
    dt_scan: Optional[float] = None,
    window: float = 0.3,
    target_phases=None,
    max_periods: Optional[int] = None,
) -> LeafSampleMeasure:
    """Collect leaf-k points from crossings of a long full-flow trajectory.

    The trajectory is scanned for upward crossings of the stage-1 phase
    through its target; a crossing is kept when every stage phase up to k is
    simultaneously within ``window``. Kept events are refined onto the leaf:
    bisection along the full flow for phase 1, then slides along the stage
    flows for phases 2..k (motions that preserve the already-pinned phases).
    """
    rng = rng or np.random.default_rng(0)
    leaf = bundle.leaf(k, target_phases)
    sys_full = bundle.system
    n_dim = sys_full.dimension
    omegas = bundle.omegas
    if dt_scan is None:
        dt_scan = min(0.05, 0.5 * np.pi / np.abs(omegas).max())
    if x0 is None:
        x0 = np.zeros(n_dim)
        for j, is_angle in enumerate(sys_full.angle_mask):
            x0[j] = rng.uniform(0.0, TWO_PI) if is_angle else rng.uniform(-0.5, 0.5)
    x0 = np.asarray(x0, dtype=float)
    if burn_in > 0:
        x0 = sys_full.flow(x0, burn_in)

    period1 = TWO_PI / abs(omegas[0])
    accept_prob = (window / TWO_PI) ** (k - 1)
    if max_periods is None:
        max_periods = int(20 * n_samples / accept_prob) + 200
    chunk_rows = max(2048, int(8 * period1 / dt_scan))

    phase_tol = leaf.tolerance  # |z - target| ~ |phase error| for small errors
    samples = []
    cur = x0
    periods_seen = 0
    while len(samples) < n_samples and periods_seen < max_periods:
        rows = sys_full.sample(cur, chunk_rows, dt_scan)
        ph1 = (_phase_batch(bundle.zs[0], rows) - leaf.target_phases[0]) % TWO_PI
        wraps = np.flatnonzero(ph1[1:] < ph1[:-1])
        periods_seen += wraps.size
        if wraps.size:
            others = [
                np.abs(_wrap_pi(_phase_batch(bundle.zs[j], rows[wraps + 1]) - leaf.target_phases[j]))
                for j in range(1, k)
            ]
        for w_idx, i in enumerate(wraps):
            if len(samples) >= n_samples:
                break
            if any(others[j - 1][w_idx] > window for j in range(1, k)):
                continue
            x = _bisect_crossing(
                sys_full, bundle.zs[0], rows[i], dt_scan, leaf.target_phases[0], phase_tol
            )
            for j in range(2, k + 1):
                x = _slide_to_phase(bundle, x, j, leaf.target_phases[j - 1], phase_tol)
            if leaf.membership(x) <= leaf.tolerance * 2.0:
                samples.append(x)
        cur = rows[-1]
    if len(samples) < n_samples:
        raise InsufficientRecurrenceError(
            len(samples), n_samples, periods_seen * period1 + burn_in
        )
    return LeafSampleMeasure(
        leaf=leaf,
        samples=np.array(samples),
        meta={
            "k": k,
            "n_samples": n_samples,
            "burn_in": burn_in,
            "dt_scan": dt_scan,
            "window": window,
            "target_phases": list(leaf.target_phases),
        },
    )


# ---------------------------------------------------------------------------
# return maps


@dataclass(frozen=True)
class ReturnMap:
    """Time-(2*pi/omega) map of an underlying flow, restricted to a leaf."""

    stage: int
    period: float
    flow_sys: FlowSystem
    leaf: LeafSpec
    bundle: Deconstruction

    def apply(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = self.flow_sys.flow(y, self.period)
        drift = self.leaf.membership(out)
        if drift > 0.5 * self.leaf.tolerance:
            # single re-projection pass: re-zero each stage phase by sliding
            # along the flow that moves it while preserving earlier ones
            for j in range(1, self.stage + 1):
                out = _slide_to_phase(
                    self.bundle, out, j, self.leaf.target_phases[j - 1], self.leaf.tolerance
                )
            drift = self.leaf.membership(out)
            if drift > 10.0 * self.leaf.tolerance:
                raise LeafEscapeError(
                    f"membership {drift:.3g} after re-projection (budget "
                    f"{10*self.leaf.tolerance:.3g})"
                )
        return out

    def orbit(self, y: np.ndarray, n: int) -> np.ndarray:
        out = np.empty((n, self.flow_sys.dimension))
        cur = np.asarray(y, dtype=float)
        for i in range(n):
            out[i] = cur
            cur = self.apply(cur)
        return out


def stage_return_map(bundle: Deconstruction, k: int) -> ReturnMap:
    """R_k: time-(2*pi/omega_k) map of the stage-k laminar flow on leaf k."""
    if not 1 <= k <= bundle.d:
        raise FlowDeconError(f"return-map stage {k} outside 1..{bundle.d}")
    return ReturnMap(
        stage=k,
        period=TWO_PI / abs(bundle.zs[k - 1].omega),
        flow_sys=bundle.stage_flows[k],
        leaf=bundle.leaf(k),
        bundle=bundle,
    )


# ---------------------------------------------------------------------------
# suspension tower (single-eigenfunction picture)


@dataclass(frozen=True)
class SuspensionTower:
    """Suspension presentation over the stage-1 leaf with height 1.

    The return map is the full-flow period map restricted to the base leaf
    (the map the tower semantics require: the suspension flow crossing one
    unit of height must reproduce one full period of the ambient flow).
    """

    bundle: Deconstruction
    base: LeafSpec
    return_map: ReturnMap
    height: float = 1.0

    @property
    def omega(self) -> float:
        return self.bundle.zs[0].omega

    @property
    def period(self) -> float:
        return TWO_PI / abs(self.omega)

    def psi(self, y: np.ndarray, s: float) -> np.ndarray:
        """Tower chart: (base point, height s in [0,1)) -> ambient state."""
        return self.bundle.system.flow(np.asarray(y, dtype=float), s * self.period)

    def gamma(self, y: np.ndarray, s: float, t: float):
        """Suspension flow in tower coordinates."""
        total = s + t
        n = math.floor(total)
        cur = np.asarray(y, dtype=float)
        if n >= 0:
            for _ in range(n):
                cur = self.return_map.apply(cur)
        else:
            for _ in range(-n):
                cur = self.return_map.flow_sys.flow(cur, -self.return_map.period)
        return cur, total - n


def build_suspension_tower(bundle: Deconstruction) -> SuspensionTower:
    base = bundle.leaf(1)
    rm = ReturnMap(
        stage=1,
        period=TWO_PI / abs(bundle.zs[0].omega),
        flow_sys=bundle.system,  # full flow: tower semantics
        leaf=base,
        bundle=bundle,
    )
    return SuspensionTower(bundle=bundle, base=base, return_map=rm)


def suspension_psi(tower: SuspensionTower, y: np.ndarray, s: float) -> np.ndarray:
    return tower.psi(y, s)


def suspension_conjugacy_check(
    tower: SuspensionTower, y: np.ndarray, s: float, t: float
) -> float:
    """State distance between Psi(Gamma^t(y,s)) and Phi^(t*period)(Psi(y,s))."""
    yg, sg = tower.gamma(y, s, t)
    lhs = tower.psi(yg, sg)
    rhs = tower.bundle.system.flow(tower.psi(y, s), t * tower.period)
    return state_dist(lhs, rhs, tower.bundle.system.angle_mask)


def eigenfunction_descend(zeta: CircleEigenfunction, tower: SuspensionTower):
    """Restrict an ambient eigenfunction to the base leaf.

    The result satisfies zeta_tilde(R y) = exp(i 2 pi omega'/omega) zeta_tilde(y).
    Returns (base observable, return-map eigenvalue).
    """
    eigenvalue = complex(np.exp(1j * TWO_PI * zeta.omega / tower.omega))

    def base_fn(y):
        return zeta.eval(np.asarray(y, dtype=float))

    return base_fn, eigenvalue


def eigenfunction_ascend(
    base_fn: Callable[[np.ndarray], complex],
    omega_prime: float,
    tower: SuspensionTower,
) -> CircleEigenfunction:
    """Extend a return-map eigenfunction to an ambient flow eigenfunction.

    zeta(Psi(y, s)) = exp(i 2 pi omega' s / omega) base_fn(y); the height s is
    recovered from the stage-1 phase and y by flowing back.
    """
    z1 = tower.bundle.zs[0]

    def ambient(x):
        x = np.asarray(x, dtype=float)
        s = ((z1.phase(x) - tower.base.target_phases[0]) % TWO_PI) / TWO_PI
        y = tower.bundle.system.flow(x, -s * tower.period)
        return complex(np.exp(1j * TWO_PI * omega_prime * s / tower.omega) * base_fn(y))

    return CircleEigenfunction(eval=ambient, omega=float(omega_prime), label="ascended")


def measure_pushforward_check(
    bundle: Deconstruction,
    samples: LeafSampleMeasure,
    f: Callable[[np.ndarray], float],
    t: float,
    rng,
    n_target: Optional[int] = None,
    burn_in: float = 50.0,
):
    """Compare f-means of pushed leaf samples vs an independent target-leaf sample.

    The target leaf sits at phase offset omega*t from the source; returns
    (mean_pushed, mean_target, z_score) with the pooled-standard-error z.
    """
    k = samples.leaf.level
    n_target = n_target or samples.count
    pushed = bundle.system.flow_batch(list(samples.samples), t)
    targets = [
        (tp + bundle.zs[j].omega * t) % TWO_PI
        for j, tp in enumerate(samples.leaf.target_phases)
    ]
    target = sample_leaf(
        bundle, k, n_target, burn_in=burn_in, rng=rng, target_phases=targets,
        window=samples.meta.get("window", 0.3),
    )
    fp = np.array([float(np.real(f(x))) for x in pushed])
    ft = np.array([float(np.real(f(x))) for x in target.samples])
    se = math.sqrt(fp.var(ddof=1) / fp.size + ft.var(ddof=1) / ft.size)
    z = abs(fp.mean() - ft.mean()) / se if se > 0 else 0.0
    return float(fp.mean()), float(ft.mean()), float(z)
