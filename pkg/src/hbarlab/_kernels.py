"""Compiled O(N^2) pair kernels for the Gaussian potential.

The flow and variational integrators spend their time in pairwise sums; the
numba versions avoid the N^2 temporaries of the broadcasting route.  Every
entry point returns None when it cannot handle the arguments, and the caller
falls back to the generic numpy path, so results never depend on whether the
JIT is available (only speed does).
"""

from __future__ import annotations

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def _is_gaussian(phi) -> bool:
    from .phasespace import GaussianPotential

    # exact type: subclasses may override evaluators the kernels hard-code
    return type(phi) is GaussianPotential


if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _forces_1d(x, amp, sig2, out):
        n = x.shape[0]
        for i in prange(n):
            acc = 0.0
            xi = x[i]
            for j in range(n):
                dx = xi - x[j]
                # grad phi = -A dx/sig2 * exp(-dx^2/2sig2); force = -grad
                acc += dx * np.exp(-dx * dx / (2.0 * sig2))
            out[i] = acc * amp / (sig2 * n)

    @njit(cache=True, parallel=True)
    def _forces_nd(x, amp, sig2, out):
        n, d = x.shape
        for i in prange(n):
            for a in range(d):
                out[i, a] = 0.0
            for j in range(n):
                r2 = 0.0
                for a in range(d):
                    dd = x[i, a] - x[j, a]
                    r2 += dd * dd
                w = np.exp(-r2 / (2.0 * sig2))
                for a in range(d):
                    out[i, a] += (x[i, a] - x[j, a]) * w
            for a in range(d):
                out[i, a] *= amp / (sig2 * n)

    @njit(cache=True, parallel=True)
    def _energy_1d(x, amp, sig2):
        n = x.shape[0]
        total = 0.0
        for i in prange(n):
            acc = 0.0
            for j in range(i + 1, n):
                dx = x[i] - x[j]
                acc += np.exp(-dx * dx / (2.0 * sig2))
            total += acc
        return amp * total / n


if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _shift_gather(padded, base, frac, n, out):
        """4-tap periodic cubic B-spline gather with per-line uniform shift."""
        nl = padded.shape[0]
        for r in prange(nl):
            t = frac[r]
            omt = 1.0 - t
            w0 = omt * omt * omt / 6.0
            w1 = 2.0 / 3.0 - t * t + 0.5 * t * t * t
            w2 = 2.0 / 3.0 - omt * omt + 0.5 * omt * omt * omt
            w3 = t * t * t / 6.0
            s = (base[r] - 1) % n
            if s < 0:
                s += n
            row = padded[r]
            orow = out[r]
            for i in range(n):
                k = i + s
                if k >= n:
                    k -= n
                orow[i] = w0 * row[k] + w1 * row[k + 1] + w2 * row[k + 2] + w3 * row[k + 3]


def spline_shift_rows(coeff: np.ndarray, base: np.ndarray, frac: np.ndarray) -> np.ndarray | None:
    """Evaluate prefiltered rows at (i + base + frac) mod n; None without numba."""
    if not HAVE_NUMBA:
        return None
    nl, n = coeff.shape
    padded = np.empty((nl, n + 3))
    padded[:, :n] = coeff
    padded[:, n:] = coeff[:, :3]
    out = np.empty_like(coeff)
    _shift_gather(padded, base.astype(np.int64), frac.astype(np.float64), n, out)
    return out


def gaussian_forces(x: np.ndarray, phi) -> np.ndarray | None:
    """Mean-field forces for a Gaussian potential, or None if not applicable."""
    if not (HAVE_NUMBA and _is_gaussian(phi)):
        return None
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, d = x.shape
    sig2 = phi.sigma**2
    if d == 1:
        out = np.empty(n)
        _forces_1d(x[:, 0], phi.amplitude, sig2, out)
        return out[:, None]
    out = np.empty((n, d))
    _forces_nd(x, phi.amplitude, sig2, out)
    return out


def gaussian_pair_energy(x: np.ndarray, phi) -> float | None:
    """(1/N) sum_{i<j} phi(x_i - x_j), or None if not applicable."""
    if not (HAVE_NUMBA and _is_gaussian(phi) and x.shape[1] == 1):
        return None
    x = np.ascontiguousarray(x, dtype=np.float64)
    return float(_energy_1d(x[:, 0], phi.amplitude, phi.sigma**2))
