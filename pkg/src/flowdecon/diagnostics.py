"""Correlation sequences, mixing verdicts, rate fits, and spectrum probes.

All estimators work on precomputed orbit rows (maps, return maps, flows and
suspensions each know how to produce them), so every statistic is a pure
function of data plus documented thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FlowDeconError


def _observable_column(f, rows: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(f(rows))
        if vals.shape == (rows.shape[0],):
            return vals.astype(complex)
    except Exception:
        pass
    return np.array([f(r) for r in rows], dtype=complex)


@dataclass(frozen=True)
class CorrelationSequence:
    """Estimated correlations C(0..N) of a pair of observables along an orbit."""

    values: np.ndarray  # complex, length N+1
    f_label: str
    g_label: str
    centered: bool
    n_orbit: int
    norm_f: float  # empirical centered L2 norms
    norm_g: float

    @property
    def n_lags(self) -> int:
        return self.values.size - 1

    @property
    def n_pairs(self) -> int:
        """Sample count M backing the estimates (worst lag)."""
        return self.n_orbit - self.n_lags

    def normalized(self) -> np.ndarray:
        scale = self.norm_f * self.norm_g
        return np.abs(self.values) / scale if scale > 0 else np.abs(self.values) * 0.0


def correlation_sequence(
    rows: np.ndarray,
    f: Callable,
    g: Callable,
    n_lags: int,
    f_label: str = "f",
    g_label: str = "g",
    centered: bool = True,
) -> CorrelationSequence:
    """C(n) = mean_k f(x_(k+n)) conj(g(x_k)) - mean(f) conj(mean(g)).

    Lag sums are taken over all available pairs per lag via an FFT
    cross-correlation; requires n_lags <= n_orbit / 10.
    """
    rows = np.asarray(rows)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    m = rows.shape[0]
    if n_lags > m // 10:
        raise FlowDeconError(f"n_lags={n_lags} exceeds orbit_length/10 = {m // 10}")
    F = _observable_column(f, rows)
    G = _observable_column(g, rows)
    mf, mg = F.mean(), G.mean()

    L = 1
    while L < 2 * m:
        L *= 2
    cross = np.fft.ifft(np.fft.fft(F, L) * np.conj(np.fft.fft(G, L)))[: n_lags + 1]
    counts = m - np.arange(n_lags + 1)
    vals = cross / counts
    if centered:
        vals = vals - mf * np.conj(mg)
    norm_f = float(np.sqrt(np.mean(np.abs(F - mf) ** 2)))
    norm_g = float(np.sqrt(np.mean(np.abs(G - mg) ** 2)))
    return CorrelationSequence(
        values=vals, f_label=f_label, g_label=g_label, centered=centered,
        n_orbit=m, norm_f=norm_f, norm_g=norm_g,
    )


@dataclass(frozen=True)
class MixingRateFit:
    model: str  # "exponential" | "power" | "below-noise"
    rate: Optional[float]  # decay rate per lag (exp) or exponent (power)
    r2: Optional[float]
    n_points: int
    noise_floor: float


@dataclass(frozen=True)
class MixingVerdict:
    weak_mixing_statistic: float
    verdict: str  # "mixing-consistent" | "non-mixing" | "inconclusive"
    threshold_consistent: float
    threshold_non_mixing: float
    n_pairs: int
    fit: Optional[MixingRateFit] = None


def weak_mixing_test(seq: CorrelationSequence, n: Optional[int] = None) -> MixingVerdict:
    """Cesaro statistic W(N) = mean of |rho(k)|^2 over lags 1..N.

    mixing-consistent when W <= 4/sqrt(M) + 0.01, non-mixing when W >= 0.1
    (non-mixing wins if both hold), inconclusive otherwise. rho are the
    correlations normalized by the empirical norms.
    """
    n = n or seq.n_lags
    if n < 1:
        raise FlowDeconError("need at least one lag")
    rho = seq.normalized()[1 : n + 1]
    W = float(np.mean(rho**2))
    m = seq.n_pairs
    consistent_thr = 4.0 / np.sqrt(m) + 0.01
    if W >= 0.1:
        verdict = "non-mixing"
    elif W <= consistent_thr:
        verdict = "mixing-consistent"
    else:
        verdict = "inconclusive"
    return MixingVerdict(
        weak_mixing_statistic=W,
        verdict=verdict,
        threshold_consistent=consistent_thr,
        threshold_non_mixing=0.1,
        n_pairs=m,
    )


def _lsq_line(x: np.ndarray, y: np.ndarray):
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return coef, r2


def fit_mixing_rate(
    seq: CorrelationSequence, noise_floor: Optional[float] = None
) -> MixingRateFit:
    """Upper-envelope decay fit of |rho(n)|, exponential vs power law.

    The envelope uses local maxima of |rho| above the noise floor (all
    above-floor lags when the sequence is monotone); the better r^2 of
    log|rho| vs n (exponential) and vs log n (power) wins. When no lag
    clears the floor the model is "below-noise".
    """
    rho = seq.normalized()[1:]
    m = seq.n_pairs
    floor = noise_floor if noise_floor is not None else 4.0 / np.sqrt(m)
    lags = np.arange(1, rho.size + 1, dtype=float)

    above = rho > floor
    peak = np.zeros_like(above)
    if rho.size >= 3:
        interior = (rho[1:-1] >= rho[:-2]) & (rho[1:-1] >= rho[2:])
        peak[1:-1] = interior
    peak[0] = rho.size < 2 or rho[0] >= rho[1]
    sel = above & peak
    if sel.sum() < 3:
        sel = above
    if sel.sum() < 2:
        return MixingRateFit(
            model="below-noise", rate=None, r2=None, n_points=int(sel.sum()), noise_floor=floor
        )
    x_n = lags[sel]
    y = np.log(rho[sel])
    coef_e, r2_e = _lsq_line(x_n, y)
    coef_p, r2_p = _lsq_line(np.log(x_n), y)
    if r2_e >= r2_p:
        return MixingRateFit(
            model="exponential", rate=float(-coef_e[1]), r2=r2_e,
            n_points=int(sel.sum()), noise_floor=floor,
        )
    return MixingRateFit(
        model="power", rate=float(coef_p[1]), r2=r2_p,
        n_points=int(sel.sum()), noise_floor=floor,
    )


# ---------------------------------------------------------------------------
# observable bases and pairwise scans


@dataclass(frozen=True)
class ObservableBasis:
    """Labelled bounded observables with a declared uniform norm bound."""

    observables: tuple  # ((label, callable), ...)
    norm_bound: float

    @property
    def labels(self):
        return [lab for lab, _ in self.observables]

    def validate(self, rows: np.ndarray) -> float:
        worst = 0.0
        for lab, fn in self.observables:
            sup = float(np.max(np.abs(_observable_column(fn, rows))))
            if sup > self.norm_bound * (1 + 1e-9):
                raise FlowDeconError(
                    f"observable {lab} exceeds norm bound: {sup:.3g} > {self.norm_bound:g}"
                )
            worst = max(worst, sup)
        return worst


def fourier_basis(max_k: int, coord: int = 0, include_negative: bool = False,
                  include_constant: bool = False) -> ObservableBasis:
    obs = []
    if include_constant:
        obs.append(("one", lambda rows: np.ones(np.atleast_2d(rows).shape[0], dtype=complex)))
    ks = range(-max_k, max_k + 1) if include_negative else range(1, max_k + 1)
    for k in ks:
        if k == 0:
            continue
        obs.append((f"e(i{k}phi)", lambda rows, k=k, coord=coord: np.exp(1j * k * rows[:, coord])))
    return ObservableBasis(observables=tuple(obs), norm_bound=1.0)


def tent_bump(center: float, half_width: float, ramp: float, coord: int = 0):
    """Mollified angle-interval indicator: 1 on the core, linear ramps outside.

    The ramp width is the reported approximation width of the rectangle.
    """

    def fn(rows):
        rows = np.atleast_2d(rows)
        delta = np.abs((rows[:, coord] - center + np.pi) % (2 * np.pi) - np.pi)
        out = np.clip((half_width + ramp - delta) / ramp, 0.0, 1.0)
        return out if out.size > 1 else out[0]

    return fn


def basis_mixing_scan(
    rows: np.ndarray, basis: ObservableBasis, n_lags: int
):
    """Pairwise correlation verdicts; overall mixing-consistent iff all pairs are."""
    if len(basis.observables) > 50:
        raise FlowDeconError("basis size limited to 50")
    basis.validate(rows)
    pairs = {}
    overall = "mixing-consistent"
    for li, fi in basis.observables:
        for lj, fj in basis.observables:
            seq = correlation_sequence(rows, fi, fj, n_lags, f_label=li, g_label=lj)
            verdict = weak_mixing_test(seq)
            pairs[(li, lj)] = verdict
            if verdict.verdict == "non-mixing":
                overall = "non-mixing"
            elif verdict.verdict == "inconclusive" and overall != "non-mixing":
                overall = "inconclusive"
    return pairs, overall


# ---------------------------------------------------------------------------
# return-map spectrum probe


@dataclass(frozen=True)
class ProbeResult:
    betas: np.ndarray
    values: np.ndarray       # max over basis observables, averaged over starts
    threshold: float         # 4 / sqrt(n_lags)
    n_lags: int
    n_starts: int
    per_observable: dict = field(default_factory=dict)

    def peaks(self, merge_width: Optional[float] = None) -> List[float]:
        """Local maxima above threshold, merged within merge_width.

        Merging suppresses Dirichlet sidelobes of strong peaks without
        windowing the harmonic sums; default width is two mainlobes.
        """
        merge = merge_width if merge_width is not None else 4.0 * np.pi / self.n_lags
        v = self.values
        cand = [
            i
            for i in range(v.size)
            if v[i] >= self.threshold
            and v[i] >= v[i - 1]
            and v[i] >= v[(i + 1) % v.size]
        ]
        cand.sort(key=lambda i: -v[i])
        kept: List[float] = []
        for i in cand:
            b = self.betas[i]
            if all(
                min(abs(b - k) % (2 * np.pi), 2 * np.pi - abs(b - k) % (2 * np.pi)) >= merge
                for k in kept
            ):
                kept.append(float(b))
        return sorted(kept)


def return_map_spectrum_probe(
    orbits: Sequence[np.ndarray],
    basis: ObservableBasis,
    betas: Optional[np.ndarray] = None,
    rng=None,
    shuffle: bool = False,
) -> ProbeResult:
    """Harmonic point-spectrum probe over candidate unit-circle angles.

    For each start-orbit and observable the statistic is
    |(1/N) sum_n e^(-i beta n) f(R^n y)|; values are averaged over orbits
    and maximized over the basis. ``shuffle`` permutes each orbit (the
    i.i.d. null preserving marginals) to calibrate flatness.
    """
    orbits = [np.atleast_2d(np.asarray(o)) for o in orbits]
    n_lags = min(o.shape[0] for o in orbits)
    if betas is None:
        n_beta = 2 * n_lags
        betas = np.arange(n_beta) * (np.pi / n_lags)
    betas = np.asarray(betas, dtype=float)
    ns = np.arange(n_lags)
    E = np.exp(-1j * np.outer(betas, ns))  # (n_beta, N)

    per_obs = {}
    stack = []
    for label, fn in basis.observables:
        acc = np.zeros(betas.size)
        for orb in orbits:
            vals = _observable_column(fn, orb[:n_lags])
            if shuffle:
                if rng is None:
                    raise FlowDeconError("shuffled probe needs an rng")
                vals = rng.permutation(vals)
            acc += np.abs(E @ vals) / n_lags
        acc /= len(orbits)
        per_obs[label] = acc
        stack.append(acc)
    values = np.max(np.stack(stack), axis=0)
    return ProbeResult(
        betas=betas,
        values=values,
        threshold=4.0 / np.sqrt(n_lags),
        n_lags=n_lags,
        n_starts=len(orbits),
        per_observable=per_obs,
    )
