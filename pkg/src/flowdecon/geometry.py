"""Circle-valued differentials, orthonormalizing metrics, projected fields.

Everything here is the generic (black-box) path: phases are differentiated
by central finite differences of the unwrapped lift, and metrics are built
pointwise. Registry prototypes additionally have exact masked stage fields
(see ``dynamics.masked_prototype_system``); tests cross-check the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .dynamics import TWO_PI, FlowSystem
from .eigenfunctions import CircleEigenfunction
from .errors import (
    FlowDeconError,
    MetricDegenerateError,
    StencilTooCoarseError,
    SubmersionViolationError,
)

DEFAULT_H = 1.0e-5


@dataclass(frozen=True)
class MetricSpec:
    """Riemannian metric as a pointwise Gram-matrix map."""

    gram: Callable[[np.ndarray], np.ndarray]
    label: str = "metric"

    def inner(self, x, v, w) -> float:
        return float(np.asarray(v) @ self.gram(np.asarray(x, dtype=float)) @ np.asarray(w))


def euclidean_metric(n: int) -> MetricSpec:
    eye = np.eye(n)
    return MetricSpec(gram=lambda x: eye.copy(), label="euclidean")


def _wrap_pi(delta: float) -> float:
    """Reduce a phase difference to (-pi, pi]."""
    return (delta + np.pi) % TWO_PI - np.pi


def phase_differential(z: CircleEigenfunction, x: np.ndarray, h: float) -> np.ndarray:
    """d(arg z) at x as a covector, by central differences of the lifted phase."""
    if not 1.0e-7 <= h <= 1.0e-3:
        raise FlowDeconError(f"stencil width h={h:g} outside [1e-7, 1e-3]")
    x = np.asarray(x, dtype=float)
    n = x.size
    dphi = np.empty(n)
    for i in range(n):
        step = np.zeros(n)
        step[i] = h
        jump = _wrap_pi(z.phase(x + step) - z.phase(x - step))
        if abs(jump) > np.pi / 2:
            raise StencilTooCoarseError(
                f"phase jump {jump:.3f} across coordinate {i} stencil at x={x}"
            )
        dphi[i] = jump / (2.0 * h)
    return dphi


def _checked_gram(metric: MetricSpec, x: np.ndarray) -> np.ndarray:
    g = np.asarray(metric.gram(x), dtype=float)
    if not np.allclose(g, g.T, atol=1.0e-12):
        raise MetricDegenerateError(f"gram not symmetric at x={x}")
    evals = np.linalg.eigvalsh(g)
    if evals[0] <= 1.0e-8:
        raise MetricDegenerateError(f"gram eigenvalue {evals[0]:.3g} <= 1e-8 at x={x}")
    return g


def circle_gradient(
    z: CircleEigenfunction,
    metric: MetricSpec,
    x: np.ndarray,
    h: float = DEFAULT_H,
    normalize: bool = False,
) -> np.ndarray:
    """Metric gradient of the phase of z: gram(x)^-1 d(arg z).

    With ``normalize`` the result is conformally rescaled so its squared
    metric norm is 1 (the d=1 policy); under an orthonormalizing metric the
    raw gradient is already unit and the flag is a no-op.
    """
    x = np.asarray(x, dtype=float)
    dphi = phase_differential(z, x, h)
    g = _checked_gram(metric, x)
    grad = np.linalg.solve(g, dphi)
    if normalize:
        sq = float(dphi @ grad)
        if sq <= 0:
            raise MetricDegenerateError(f"nonpositive gradient norm at x={x}")
        grad = grad / sq
    return grad


@dataclass(frozen=True)
class GradientField:
    """Unit-norm gradient field of an eigenfunction under a fixed metric."""

    of: CircleEigenfunction
    metric: MetricSpec
    eval: Callable[[np.ndarray], np.ndarray]


def gradient_field(z: CircleEigenfunction, metric: MetricSpec, h: float = DEFAULT_H) -> GradientField:
    return GradientField(of=z, metric=metric, eval=lambda x: circle_gradient(z, metric, x, h))


def orthonormalizing_metric(
    zs: Sequence[CircleEigenfunction],
    base: MetricSpec,
    h: float = DEFAULT_H,
) -> MetricSpec:
    """Metric making the gradients of the given eigenfunctions orthonormal.

    The base inner product is modified only on the span of the gradient
    directions: with D the stacked phase differentials and K = D B0 D^T the
    dual Gram matrix (B0 the base inverse), the new inverse metric is
    B = B0 + B0 D^T (K^-2 - K^-1) D B0, which solves D B D^T = I.
    Rank deficiency of the differentials raises SubmersionViolationError.
    """

    def gram(x):
        x = np.asarray(x, dtype=float)
        D = np.stack([phase_differential(z, x, h) for z in zs])
        B0 = np.linalg.inv(_checked_gram(base, x))
        K = D @ B0 @ D.T
        svals = np.linalg.svd(K, compute_uv=False)
        if svals[-1] < 1.0e-8 * max(svals[0], 1.0):
            raise SubmersionViolationError(x, "eigenfunction differentials rank-deficient")
        Kinv = np.linalg.inv(K)
        B = B0 + B0 @ D.T @ (Kinv @ Kinv - Kinv) @ D @ B0
        G = np.linalg.inv(B)
        return 0.5 * (G + G.T)

    return MetricSpec(gram=gram, label=f"orthonormalizing({len(zs)})")


def project_field(
    V_prev: Callable[[np.ndarray], np.ndarray],
    z_k: CircleEigenfunction,
    metric: MetricSpec,
    x: np.ndarray,
    h: float = DEFAULT_H,
) -> np.ndarray:
    """One projection step: V_prev - <V_prev, grad z_k> grad z_k (metric inner)."""
    x = np.asarray(x, dtype=float)
    grad = circle_gradient(z_k, metric, x, h)
    g = _checked_gram(metric, x)
    v = np.asarray(V_prev(x), dtype=float)
    coeff = float(v @ g @ grad)
    return v - coeff * grad


@dataclass(frozen=True)
class ProjectedField:
    """Level-k projected field evaluator (generic finite-difference path)."""

    level: int
    eval: Callable[[np.ndarray], np.ndarray]


def projected_field_chain(
    V0: Callable[[np.ndarray], np.ndarray],
    zs: Sequence[CircleEigenfunction],
    metric: MetricSpec,
    level: int,
    h: float = DEFAULT_H,
) -> ProjectedField:
    """V_level by recursively removing gradient components of z_1..z_level."""
    if not 0 <= level <= len(zs):
        raise FlowDeconError(f"level {level} outside 0..{len(zs)}")

    def ev(x, level=level):
        x = np.asarray(x, dtype=float)
        g = _checked_gram(metric, x)
        v = np.asarray(V0(x), dtype=float)
        for j in range(level):
            grad = circle_gradient(zs[j], metric, x, h)
            v = v - float(v @ g @ grad) * grad
        return v

    return ProjectedField(level=level, eval=ev)


def frequency_consistency(
    V_prev: Callable[[np.ndarray], np.ndarray],
    z_k: CircleEigenfunction,
    metric: MetricSpec,
    x: np.ndarray,
    h: float = DEFAULT_H,
) -> float:
    """|<V_prev, grad z_k>_tau - omega_k|: diagnoses wrong claimed frequencies."""
    x = np.asarray(x, dtype=float)
    grad = circle_gradient(z_k, metric, x, h)
    g = _checked_gram(metric, x)
    coeff = float(np.asarray(V_prev(x), dtype=float) @ g @ grad)
    return abs(coeff - z_k.omega)


def lie_derivative(
    W: Callable[[np.ndarray], np.ndarray],
    f: Callable[[np.ndarray], complex],
    x: np.ndarray,
    h: float = DEFAULT_H,
) -> complex:
    """Directional derivative of f along W(x) by central differences."""
    if not 1.0e-7 <= h <= 1.0e-3:
        raise FlowDeconError(f"stencil width h={h:g} outside [1e-7, 1e-3]")
    x = np.asarray(x, dtype=float)
    w = np.asarray(W(x), dtype=float)
    return (complex(f(x + h * w)) - complex(f(x - h * w))) / (2.0 * h)


def flow_jacobian(sys: FlowSystem, x: np.ndarray, t: float, h: float = 1.0e-6) -> np.ndarray:
    """Finite-difference Jacobian of the time-t flow map."""
    x = np.asarray(x, dtype=float)
    n = x.size
    J = np.empty((n, n))
    for i in range(n):
        step = np.zeros(n)
        step[i] = h
        plus = sys.flow(x + step, t)
        minus = sys.flow(x - step, t)
        col = plus - minus
        for j, is_angle in enumerate(sys.angle_mask):
            if is_angle:
                col[j] = _wrap_pi(col[j])
        J[:, i] = col / (2.0 * h)
    return J
