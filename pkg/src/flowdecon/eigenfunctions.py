"""Circle-valued eigenfunctions, harmonic averages, and frequency certificates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .dynamics import TWO_PI, FlowSystem, PrototypeQPD
from .errors import DependentFrequenciesError, FlowDeconError


@dataclass(frozen=True)
class CircleEigenfunction:
    """An S^1-valued map with eigenfrequency omega (radians per unit time).

    ``grad_phase``, when available, returns the differential of the lifted
    phase arg(z) as a covector; analytic prototypes supply it exactly.
    """

    eval: Callable[[np.ndarray], complex]
    omega: float
    label: str
    grad_phase: Optional[Callable[[np.ndarray], np.ndarray]] = None
    phase_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x) -> complex:
        return self.eval(np.asarray(x, dtype=float))

    def phase(self, x) -> float:
        """arg z(x) in [0, 2*pi)."""
        return float(np.angle(self.eval(np.asarray(x, dtype=float)))) % TWO_PI


@dataclass(frozen=True)
class FrequencyModule:
    """Generating frequencies plus the certificate of their independence."""

    omegas: tuple
    independence_bound: int
    independence_margin: float

    @property
    def d(self) -> int:
        return len(self.omegas)


@dataclass(frozen=True)
class HarmonicAverageResult:
    value: complex
    T_used: float
    convergence_curve: tuple  # ((T_1, |v_1|), ...), T increasing


def analytic_eigenfunctions(p: PrototypeQPD) -> List[CircleEigenfunction]:
    """z_j = e^(i theta_j), composed with the warp inverse when warped."""
    from . import kernels

    out = []
    n = p.dimension
    for j in range(p.torus_dim):
        if p.warp is None:
            def ev(u, j=j):
                return complex(np.exp(1j * u[j]))

            def gp(u, j=j, n=n):
                row = np.zeros(n)
                row[j] = 1.0
                return row

            def pb(rows, j=j):
                return rows[:, j] % TWO_PI

        else:
            warp = p.warp

            def ev(u, j=j, warp=warp):
                return complex(np.exp(1j * warp.inverse(u)[j]))

            def gp(u, j=j, warp=warp):
                x = warp.inverse(u)
                Jinv = np.linalg.inv(warp.jacobian(x))
                return Jinv[j].copy()

            if warp.wid == kernels.WID_TWIST and j == 1:
                a = warp.params[0]

                def pb(rows, a=a):
                    return (rows[:, 1] - a * np.sin(rows[:, 0])) % TWO_PI

            elif warp.wid in (kernels.WID_SHEAR, kernels.WID_TWIST):
                # these warps leave the other driving angles untouched
                def pb(rows, j=j):
                    return rows[:, j] % TWO_PI

            else:
                pb = None

        out.append(
            CircleEigenfunction(
                eval=ev, omega=float(p.omega[j]), label=f"z{j+1}", grad_phase=gp, phase_batch=pb
            )
        )
    return out


def eigen_residual_max(
    sys: FlowSystem,
    z: CircleEigenfunction,
    points: Sequence[np.ndarray],
    times: Sequence[float],
) -> float:
    """max |z(Phi^t x) - e^(i omega t) z(x)| over the given (x, t) pairs."""
    worst = 0.0
    for x, t in zip(points, times):
        lhs = z(sys.flow(np.asarray(x, dtype=float), float(t)))
        rhs = np.exp(1j * z.omega * t) * z(x)
        worst = max(worst, abs(lhs - rhs))
    return worst


def _observable_values(f, traj: np.ndarray) -> np.ndarray:
    """Evaluate f on trajectory rows; vectorized call attempted first."""
    try:
        vals = np.asarray(f(traj))
        if vals.shape == (traj.shape[0],):
            return vals.astype(complex)
    except Exception:
        pass
    return np.array([f(row) for row in traj], dtype=complex)


def harmonic_average(
    sys,
    f,
    x: np.ndarray,
    omega_test: float,
    T: float,
    dt_sample: float,
    n_checkpoints: int = 16,
) -> HarmonicAverageResult:
    """(1/T) integral of e^(-i omega t) f(Phi^t x) dt by trapezoidal summation."""
    if omega_test != 0.0 and T < 100.0 * (TWO_PI / abs(omega_test)):
        raise FlowDeconError(
            f"T={T:g} shorter than 100 periods of omega={omega_test:g}"
        )
    step = getattr(sys, "step", None)
    if step is not None and dt_sample > step * 1.0e3:
        raise FlowDeconError(f"dt_sample={dt_sample:g} too coarse for dt={step:g}")
    n = int(np.floor(T / dt_sample)) + 1
    traj = sys.sample(np.asarray(x, dtype=float), n, dt_sample)
    t = np.arange(n) * dt_sample
    integrand = np.exp(-1j * omega_test * t) * _observable_values(f, traj)
    cumulative = np.cumsum(integrand)
    curve = []
    checkpoints = np.unique(np.linspace(max(2, n // n_checkpoints), n - 1, n_checkpoints).astype(int))
    for idx in checkpoints:
        Ti = idx * dt_sample
        vi = dt_sample * (cumulative[idx] - 0.5 * integrand[0] - 0.5 * integrand[idx]) / Ti
        curve.append((float(Ti), float(abs(vi))))
    T_used = (n - 1) * dt_sample
    value = dt_sample * (cumulative[n - 1] - 0.5 * integrand[0] - 0.5 * integrand[n - 1]) / T_used
    return HarmonicAverageResult(complex(value), float(T_used), tuple(curve))


def detect_frequencies(
    sys,
    f,
    x: np.ndarray,
    T: float,
    dt_sample: float,
    count: int,
) -> List[float]:
    """Candidate eigenfrequencies: peaks of the harmonic-average magnitude.

    A mean-subtracted zero-padded FFT supplies the grid (spacing <= pi/T);
    each surviving peak is refined by golden-section search to 1e-6 width.
    Peaks below the noise floor 5/sqrt(N) are discarded, so fewer than
    ``count`` frequencies may be returned.
    """
    n = int(np.floor(T / dt_sample)) + 1
    traj = sys.sample(np.asarray(x, dtype=float), n, dt_sample)
    vals = _observable_values(f, traj)
    vals = vals - vals.mean()
    t = np.arange(n) * dt_sample

    m = 1
    while m < 2 * n:
        m *= 2
    spectrum = np.abs(np.fft.fft(vals, m)) / n
    freqs = TWO_PI * np.arange(m) / (m * dt_sample)
    nyquist = np.pi / dt_sample
    lo = 2.0 * TWO_PI / T  # DC exclusion: first two Fourier bins
    usable = (freqs > lo) & (freqs < nyquist)

    floor = 5.0 / np.sqrt(n)
    idx = np.flatnonzero(
        usable
        & (spectrum >= floor)
        & (spectrum >= np.roll(spectrum, 1))
        & (spectrum >= np.roll(spectrum, -1))
    )
    if idx.size == 0:
        return []
    order = idx[np.argsort(spectrum[idx])[::-1]]

    def magnitude(w: float) -> float:
        return abs(np.exp(-1j * w * t) @ vals) / n

    found: List[float] = []
    binw = TWO_PI / (m * dt_sample)
    for j in order:
        w0 = freqs[j]
        if any(abs(w0 - g) < 4 * binw for g in found):
            continue
        res = minimize_scalar(
            lambda w: -magnitude(w),
            bracket=None,
            bounds=(w0 - 2 * binw, w0 + 2 * binw),
            method="bounded",
            options={"xatol": 1.0e-7},
        )
        found.append(float(res.x))
        if len(found) == count:
            break
    return sorted(found)


def check_independence(omegas, A: int, eps: float) -> FrequencyModule:
    """Exhaustive integer-relation scan over |a_j| <= A.

    Rejects both readings of dependence: sum(a*omega) close to 0 and close
    to a nonzero multiple 2*pi*k, |k| <= A. Raises DependentFrequenciesError
    carrying the (sign-normalized, minimal-l1) violating vector.
    """
    om = np.asarray(omegas, dtype=float)
    d = om.size
    if d == 0:
        raise FlowDeconError("empty frequency vector")
    grids = np.meshgrid(*([np.arange(-A, A + 1)] * d), indexing="ij")
    coeffs = np.stack([g.ravel() for g in grids], axis=1)
    coeffs = coeffs[np.any(coeffs != 0, axis=1)]
    s = coeffs @ om

    violations = []
    hit = np.abs(s) < eps
    for a, val in zip(coeffs[hit], s[hit]):
        violations.append((a, float(abs(val)), 0))
    for k in range(1, A + 1):
        for sign in (1, -1):
            hit = np.abs(s - sign * k * TWO_PI) < eps
            for a, val in zip(coeffs[hit], s[hit]):
                violations.append((a, float(abs(val - sign * k * TWO_PI)), sign * k))
    if violations:
        normed = []
        for a, resid, k in violations:
            a = np.array(a)
            first = a[np.flatnonzero(a)[0]]
            if first < 0:
                a, k = -a, -k
            normed.append((int(np.abs(a).sum()), tuple(int(v) for v in a), resid, k))
        normed.sort()
        _, a, resid, k = normed[0]
        raise DependentFrequenciesError(a, resid, k)
    return FrequencyModule(tuple(float(w) for w in om), int(A), float(eps))


def product_eigenfunction(zs: Sequence[CircleEigenfunction], a: Sequence[int]) -> CircleEigenfunction:
    """prod z_j^(a_j); frequency is exactly the integer combination a . omega."""
    if len(zs) != len(a):
        raise FlowDeconError("coefficient vector length must match eigenfunction count")
    a = [int(v) for v in a]
    if any(abs(v) > 100 for v in a):
        raise FlowDeconError("coefficients limited to |a_j| <= 100")
    if not any(a):
        return CircleEigenfunction(eval=lambda x: 1.0 + 0.0j, omega=0.0, label="1")
    omega = float(sum(v * z.omega for v, z in zip(a, zs)))

    def ev(x):
        out = 1.0 + 0.0j
        for v, z in zip(a, zs):
            if v != 0:
                out *= z.eval(x) ** v
        return out

    grad = None
    if all(z.grad_phase is not None for z in zs):
        def grad(x):
            return sum(v * z.grad_phase(x) for v, z in zip(a, zs) if v != 0)

    label = "*".join(f"{z.label}^{v}" for v, z in zip(a, zs) if v != 0)
    return CircleEigenfunction(eval=ev, omega=omega, label=label, grad_phase=grad)
