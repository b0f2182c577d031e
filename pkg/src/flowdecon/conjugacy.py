"""Global tower change of variables, skew normal form, spectral splitting.

The tower chart composes the stage flows with times solved from the
cumulative phase relations: writing S_l for the cumulative angle sums
(the phases arg z_l / 2*pi), the factor for angle l runs the stage-(l-1)
flow for time T_l = 2*pi*(S_l/omega_l - S_(l-1)/omega_(l-1)). This is the
unique commuting-flow composition under which the phase identities
    arg z_l(Psi(y, theta)) = 2*pi*(theta_1 + ... + theta_l)
hold for independent frequencies, and it reduces to the plain suspension
chart when d = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import TWO_PI, state_dist
from .deconstruction import Deconstruction, LeafSampleMeasure
from .errors import (
    ConjugacyViolationError,
    FlowDeconError,
    InversionFailureError,
    TowerCoordinatesError,
    UndersampledBinsError,
)


@dataclass(frozen=True)
class TowerCoordinates:
    """(leaf-d point, d angles in [0,1))."""

    y: np.ndarray
    thetas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "thetas", np.asarray(self.thetas, dtype=float) % 1.0)


def _cumulative(thetas: np.ndarray) -> np.ndarray:
    return np.cumsum(thetas) % 1.0


def _triangular(cumulative: np.ndarray) -> np.ndarray:
    out = np.empty_like(cumulative)
    out[0] = cumulative[0]
    out[1:] = (cumulative[1:] - cumulative[:-1]) % 1.0
    return out


def _stage_times(bundle: Deconstruction, cumulative: np.ndarray) -> np.ndarray:
    omegas = bundle.omegas[: cumulative.size]
    taus = TWO_PI * cumulative / omegas
    times = np.empty_like(taus)
    times[0] = taus[0]
    times[1:] = taus[1:] - taus[:-1]
    return times


def psi_k(bundle: Deconstruction, k: int, tower: TowerCoordinates) -> np.ndarray:
    """Tower chart at truncation level k: leaf-k point + k angles -> ambient."""
    if not 1 <= k <= bundle.d:
        raise FlowDeconError(f"psi level {k} outside 1..{bundle.d}")
    thetas = np.asarray(tower.thetas, dtype=float)[:k] % 1.0
    y = np.asarray(tower.y, dtype=float)
    leaf = bundle.leaf(k)
    if leaf.membership(y) > 100.0 * leaf.tolerance:
        raise TowerCoordinatesError(
            f"base point off leaf {k}: membership {leaf.membership(y):.3g}"
        )
    times = _stage_times(bundle, _cumulative(thetas))
    x = y
    for j in range(k, 0, -1):  # angle-k factor first, angle-1 factor last
        if times[j - 1] != 0.0:
            x = bundle.stage_flows[j - 1].flow(x, times[j - 1])
    return x


def psi_k_batch(
    bundle: Deconstruction, k: int, ys: np.ndarray, thetas: np.ndarray
) -> np.ndarray:
    """Vectorized tower chart: rows of leaf points and angle vectors."""
    ys = np.asarray(ys, dtype=float)
    thetas = np.asarray(thetas, dtype=float)[:, :k] % 1.0
    cum = np.cumsum(thetas, axis=1) % 1.0
    omegas = bundle.omegas[:k]
    taus = TWO_PI * cum / omegas
    times = np.empty_like(taus)
    times[:, 0] = taus[:, 0]
    times[:, 1:] = taus[:, 1:] - taus[:, :-1]
    pts = [row for row in ys]
    for j in range(k, 0, -1):
        pts = bundle.stage_flows[j - 1].flow_batch_times(pts, times[:, j - 1])
    return np.array(pts)


def xi(bundle: Deconstruction, x: np.ndarray, membership_tol: float = 1.0e-4) -> TowerCoordinates:
    """Inverse tower chart: extract angles from phases, unwind to the leaf."""
    x = np.asarray(x, dtype=float)
    cumulative = np.array([z.phase(x) / TWO_PI for z in bundle.zs])
    times = _stage_times(bundle, cumulative)
    y = x
    for j in range(1, bundle.d + 1):  # exact reverse of the psi_k composition
        if times[j - 1] != 0.0:
            y = bundle.stage_flows[j - 1].flow(y, -times[j - 1])
    leaf = bundle.leaf(bundle.d)
    drift = leaf.membership(y)
    if drift > membership_tol:
        raise InversionFailureError(
            f"unwound point misses leaf {bundle.d} by {drift:.3g} "
            f"(supplied eigenfunctions are likely not true eigenfunctions)"
        )
    return TowerCoordinates(y=y, thetas=_triangular(cumulative))


def xi_angles(bundle: Deconstruction, x: np.ndarray) -> np.ndarray:
    """Angle block of the inverse chart only (no leaf unwinding)."""
    cumulative = np.array([z.phase(np.asarray(x, dtype=float)) / TWO_PI for z in bundle.zs])
    return _triangular(cumulative)


def xi_angles_batch(bundle: Deconstruction, rows: np.ndarray) -> np.ndarray:
    """Vectorized angle block over trajectory rows; shape (n, d)."""
    cols = []
    for z in bundle.zs:
        if z.phase_batch is not None:
            cols.append(z.phase_batch(rows) / TWO_PI)
        else:
            cols.append(np.array([z.phase(r) for r in rows]) / TWO_PI)
    cum = np.stack(cols, axis=1) % 1.0
    tri = np.empty_like(cum)
    tri[:, 0] = cum[:, 0]
    tri[:, 1:] = (cum[:, 1:] - cum[:, :-1]) % 1.0
    return tri


def tower_dist(a: TowerCoordinates, b: TowerCoordinates, angle_mask) -> float:
    """Max distance over the fiber block (chart metric) and angle block (unit circle)."""
    dy = state_dist(a.y, b.y, angle_mask)
    dth = 0.0
    for u, v in zip(a.thetas, b.thetas):
        delta = abs((u - v) % 1.0)
        dth = max(dth, min(delta, 1.0 - delta))
    return max(dy, dth)


@dataclass(frozen=True)
class SkewProductForm:
    """Skew normal form: rigid angle block over a leaf fiber evolution."""

    bundle: Deconstruction
    angle_tol: float = 1.0e-5

    def affine_cumulative(self, tower: TowerCoordinates, t: float) -> np.ndarray:
        """Cumulative phases after time t: S_j + t*omega_j/2*pi mod 1."""
        S = _cumulative(tower.thetas)
        return (S + t * self.bundle.omegas / TWO_PI) % 1.0

    def evolve(self, tower: TowerCoordinates, t: float) -> TowerCoordinates:
        """Advance: angles affinely, fiber through the ambient conjugation.

        Raises ConjugacyViolationError when the extracted angle block of
        Phi^t departs from the affine prediction beyond ``angle_tol``.
        """
        x = psi_k(self.bundle, self.bundle.d, tower)
        x_t = self.bundle.system.flow(x, t)
        out = xi(self.bundle, x_t)
        predicted = self.affine_cumulative(tower, t)
        extracted = _cumulative(out.thetas)
        err = np.abs((extracted - predicted + 0.5) % 1.0 - 0.5)
        if np.max(err) > self.angle_tol:
            raise ConjugacyViolationError(
                f"angle block off affine prediction by {np.max(err):.3g} cycles"
            )
        return TowerCoordinates(y=out.y, thetas=_triangular(predicted))


def skew_form_evolve(form: SkewProductForm, tower: TowerCoordinates, t: float) -> TowerCoordinates:
    return form.evolve(tower, t)


def flow_group_law_check(
    form: SkewProductForm, tower: TowerCoordinates, s: float, t: float
) -> float:
    """Distance between evolve(s+t) and evolve(t) after evolve(s)."""
    direct = form.evolve(tower, s + t)
    staged = form.evolve(form.evolve(tower, s), t)
    return tower_dist(direct, staged, form.bundle.system.angle_mask)


# ---------------------------------------------------------------------------
# discrete / continuous splitting


@dataclass(frozen=True)
class SplittingProjector:
    """Histogram estimate of the conditional mean given the angle block."""

    bins_per_dim: int
    d: int
    means: np.ndarray   # complex, shape (B,)*d
    counts: np.ndarray

    def bin_of(self, thetas: np.ndarray):
        idx = np.minimum(
            (np.asarray(thetas) % 1.0 * self.bins_per_dim).astype(int), self.bins_per_dim - 1
        )
        return tuple(idx)

    def apply_thetas(self, thetas: np.ndarray) -> complex:
        return complex(self.means[self.bin_of(thetas)])


def project_discrete(
    bundle: Deconstruction,
    f: Callable,
    rows: np.ndarray,
    bins_per_dim: int = 32,
    min_count: int = 30,
):
    """Estimate the projection of f onto angle-measurable functions.

    ``rows`` are ambient trajectory samples. The projector is fitted on the
    even half and evaluated on the odd half so the reported orthogonality
    statistic is an honest out-of-sample test. Returns
    (projector, report dict).
    """
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    thetas = xi_angles_batch(bundle, rows)
    try:
        vals = np.asarray(f(rows), dtype=complex)
        if vals.shape != (n,):
            raise ValueError
    except Exception:
        vals = np.array([f(r) for r in rows], dtype=complex)

    B, d = bins_per_dim, bundle.d
    flat = np.zeros(n, dtype=np.int64)
    idx = np.minimum((thetas * B).astype(np.int64), B - 1)
    for j in range(d):
        flat = flat * B + idx[:, j]

    fit = np.arange(n) % 2 == 0
    hold = ~fit
    size = B**d
    counts = np.bincount(flat[fit], minlength=size)
    starved = np.flatnonzero(counts < min_count)
    if starved.size:
        raise UndersampledBinsError(
            [np.unravel_index(b, (B,) * d) for b in starved], min_count
        )
    sums = (
        np.bincount(flat[fit], weights=vals[fit].real, minlength=size)
        + 1j * np.bincount(flat[fit], weights=vals[fit].imag, minlength=size)
    )
    means = (sums / counts).reshape((B,) * d)
    projector = SplittingProjector(
        bins_per_dim=B, d=d, means=means, counts=counts.reshape((B,) * d)
    )

    proj_hold = means.reshape(-1)[flat[hold]]
    resid_hold = vals[hold] - proj_hold
    inner = np.mean(proj_hold * np.conj(resid_hold))
    prods = proj_hold * np.conj(resid_hold)
    se = np.sqrt(
        (prods.real.var(ddof=1) + prods.imag.var(ddof=1)) / prods.size
    )
    report = {
        "bins_per_dim": B,
        "n_fit": int(fit.sum()),
        "n_holdout": int(hold.sum()),
        "norm_total": float(np.sqrt(np.mean(np.abs(vals[hold]) ** 2))),
        "norm_discrete": float(np.sqrt(np.mean(np.abs(proj_hold) ** 2))),
        "norm_continuous": float(np.sqrt(np.mean(np.abs(resid_hold) ** 2))),
        "orthogonality_inner": complex(inner),
        "orthogonality_z": float(abs(inner) / se) if se > 0 else 0.0,
    }
    return projector, report
