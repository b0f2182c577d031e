"""Compiled field evaluation and RK4 drivers for registry systems.

Registry vector fields are encoded in a flat float64 ``spec`` vector so a
single compiled kernel can serve every prototype variant (fiber law, warp,
projection level). Offsets below are the layout contract; builders live in
``dynamics``.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

TWO_PI = 2.0 * np.pi

# spec vector layout (fixed offsets, total length SPEC_LEN)
IDX_D = 0        # number of driving angles
IDX_M = 1        # fiber dimension
IDX_MASK = 2     # projection level: zero the first k driving-angle rates
IDX_GID = 3      # fiber field id
IDX_GP = 4       # fiber params, 4 slots
IDX_WID = 8      # warp id
IDX_WP = 9       # warp params, 3 slots
IDX_NANG = 12    # number of leading angular coordinates (drive + angular fiber)
IDX_OMEGA = 16   # d frequency slots
SPEC_LEN = 24
MAX_DIM = 8

GID_NONE = 0
GID_LINEAR_DAMPED = 1   # y' = -a*y + c * prod_j cos(theta_j)
GID_ROTATION = 2        # angular fiber, phi' = rate
GID_PENDULUM = 3        # (q, p): q' = p, p' = -sin q - gamma*p + amp*cos(theta_1)

WID_NONE = 0
WID_SHEAR = 1           # fiber0 sheared by a*sin(theta_1)
WID_TWIST = 2           # angle 2 twisted by a*sin(theta_1)

BLOWUP_BOUND = 1.0e12


@njit(cache=True)
def _unwarp(u, spec, x):
    """Write W^-1(u) into x."""
    n = int(spec[IDX_D]) + int(spec[IDX_M])
    for i in range(n):
        x[i] = u[i]
    wid = int(spec[IDX_WID])
    if wid == WID_SHEAR:
        a = spec[IDX_WP]
        f0 = int(spec[IDX_D])
        x[f0] = u[f0] - a * np.sin(u[0])
    elif wid == WID_TWIST:
        a = spec[IDX_WP]
        x[1] = u[1] - a * np.sin(u[0])


@njit(cache=True)
def _warp_forward(x, spec, u):
    """Write W(x) into u."""
    n = int(spec[IDX_D]) + int(spec[IDX_M])
    for i in range(n):
        u[i] = x[i]
    wid = int(spec[IDX_WID])
    if wid == WID_SHEAR:
        a = spec[IDX_WP]
        f0 = int(spec[IDX_D])
        u[f0] = x[f0] + a * np.sin(x[0])
    elif wid == WID_TWIST:
        a = spec[IDX_WP]
        u[1] = x[1] + a * np.sin(x[0])


@njit(cache=True)
def _eval_field(u, spec, x, du):
    """Field value at chart point u, using workspace x for the unwarped point."""
    d = int(spec[IDX_D])
    m = int(spec[IDX_M])
    n = d + m
    _unwarp(u, spec, x)

    # driving block
    for j in range(d):
        du[j] = spec[IDX_OMEGA + j]

    # fiber block
    gid = int(spec[IDX_GID])
    if gid == GID_LINEAR_DAMPED:
        a = spec[IDX_GP]
        c = spec[IDX_GP + 1]
        force = c
        for j in range(d):
            force *= np.cos(x[j])
        du[d] = -a * x[d] + force
    elif gid == GID_ROTATION:
        du[d] = spec[IDX_GP]
    elif gid == GID_PENDULUM:
        gamma = spec[IDX_GP]
        amp = spec[IDX_GP + 1]
        du[d] = x[d + 1]
        du[d + 1] = -np.sin(x[d]) - gamma * x[d + 1] + amp * np.cos(x[0])

    # projection: remove the first k driving-angle rates (unwarped chart)
    k = int(spec[IDX_MASK])
    for j in range(k):
        du[j] = 0.0

    # pushforward by the warp Jacobian at x
    wid = int(spec[IDX_WID])
    if wid == WID_SHEAR:
        a = spec[IDX_WP]
        f0 = d
        du[f0] = du[f0] + a * np.cos(x[0]) * du[0]
    elif wid == WID_TWIST:
        a = spec[IDX_WP]
        du[1] = du[1] + a * np.cos(x[0]) * du[0]
    return n


@njit(cache=True)
def _reduce_angles(u, nang):
    for j in range(nang):
        u[j] = u[j] - np.floor(u[j] / TWO_PI) * TWO_PI


@njit(cache=True)
def _rk4_steps(u, t_total, n_steps, spec):
    """In-place RK4 over n_steps uniform steps. Returns blowup time or NaN."""
    if n_steps <= 0:
        return np.nan
    h = t_total / n_steps
    n = int(spec[IDX_D]) + int(spec[IDX_M])
    nang = int(spec[IDX_NANG])
    x = np.empty(MAX_DIM)
    k1 = np.empty(MAX_DIM)
    k2 = np.empty(MAX_DIM)
    k3 = np.empty(MAX_DIM)
    k4 = np.empty(MAX_DIM)
    tmp = np.empty(MAX_DIM)
    for step in range(n_steps):
        _eval_field(u, spec, x, k1)
        for i in range(n):
            tmp[i] = u[i] + 0.5 * h * k1[i]
        _eval_field(tmp, spec, x, k2)
        for i in range(n):
            tmp[i] = u[i] + 0.5 * h * k2[i]
        _eval_field(tmp, spec, x, k3)
        for i in range(n):
            tmp[i] = u[i] + h * k3[i]
        _eval_field(tmp, spec, x, k4)
        for i in range(n):
            u[i] = u[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        _reduce_angles(u, nang)
        for i in range(n):
            if not np.isfinite(u[i]) or np.abs(u[i]) > BLOWUP_BOUND:
                return (step + 1) * h
    return np.nan


@njit(cache=True)
def rk4_final(u0, t, dt, spec):
    """Endpoint of the flow for signed time t. Returns (state, blowup_time)."""
    u = u0.copy()
    if t == 0.0:
        return u, np.nan
    n_steps = int(np.ceil(np.abs(t) / dt))
    fail = _rk4_steps(u, t, n_steps, spec)
    return u, fail


@njit(cache=True)
def rk4_sample(u0, n_samples, dt_sample, dt, spec):
    """Trajectory sampled at multiples of dt_sample, row 0 = u0.

    Returns (samples, blowup_time); samples has shape (n_samples, n).
    """
    n = int(spec[IDX_D]) + int(spec[IDX_M])
    out = np.empty((n_samples, n))
    u = u0.copy()
    for i in range(n):
        out[0, i] = u[i]
    sub = max(1, int(np.ceil(np.abs(dt_sample) / dt)))
    for s in range(1, n_samples):
        fail = _rk4_steps(u, dt_sample, sub, spec)
        if not np.isnan(fail):
            return out[:s], (s - 1) * dt_sample + fail
        for i in range(n):
            out[s, i] = u[i]
    return out, np.nan


@njit(cache=True, parallel=True)
def rk4_batch(us, t, dt, spec):
    """Common-time endpoint map over a batch of states."""
    npts = us.shape[0]
    n = us.shape[1]
    out = np.empty_like(us)
    fails = np.full(npts, np.nan)
    n_steps = int(np.ceil(np.abs(t) / dt)) if t != 0.0 else 0
    for p in prange(npts):
        u = us[p].copy()
        if n_steps > 0:
            fails[p] = _rk4_steps(u, t, n_steps, spec)
        for i in range(n):
            out[p, i] = u[i]
    return out, fails


@njit(cache=True, parallel=True)
def rk4_batch_times(us, ts, dt, spec):
    """Per-point integration times (signed)."""
    npts = us.shape[0]
    n = us.shape[1]
    out = np.empty_like(us)
    fails = np.full(npts, np.nan)
    for p in prange(npts):
        u = us[p].copy()
        t = ts[p]
        if t != 0.0:
            n_steps = int(np.ceil(np.abs(t) / dt))
            fails[p] = _rk4_steps(u, t, n_steps, spec)
        for i in range(n):
            out[p, i] = u[i]
    return out, fails


@njit(cache=True)
def doubling_backward_orbit(phi_end, bits):
    """Exact doubling-map orbit ending at phi_end, built by bit insertion."""
    n = bits.size + 1
    out = np.empty(n)
    out[n - 1] = phi_end
    phi = phi_end
    for i in range(n - 2, -1, -1):
        phi = 0.5 * phi + np.pi * bits[i]
        out[i] = phi
    return out


def empty_spec():
    return np.zeros(SPEC_LEN)
