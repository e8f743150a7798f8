"""Split-step pseudospectral solver for the scaled quantum transport
equation on a periodic phase-space box (d=1).

The velocity part of the dynamics is the pseudodifferential operator

    T f (x, v) = (2 pi)^-1 i int_{-1/2}^{1/2} dlam int dk  phihat(k) rhohat(k)
                 e^{ikx} (k d_v) f(x, v + eps lam k).

Writing f through its velocity Fourier transform fhat(x, y) and carrying out
the lambda average turns each (k, y) mode into the factor
2 sin(k eps y / 2) / (eps y k) times (k d_v) -> (i y k), so the whole operator
collapses to multiplication by the symbol

    theta(x, y) = (i / eps) [ Phi(x + eps y/2) - Phi(x - eps y/2) ],

with Phi = phi * rho the self-consistent potential.  The bracket is computed
exactly per mode as 2i sin(k eps y / 2) Phihat(k); the symbol is an odd,
purely imaginary phase, so each velocity step is unitary in every x-column,
conserves the y=0 mode (the mass) identically, and preserves reality.  As
eps -> 0 the difference quotient recovers the classical force symbol
Phi'(x) y.

Strang splitting with exact spectral position advection makes the scheme
second order in dt with no stability constraint; the self-consistent
potential is evaluated at the split midpoint (the spatial density is
invariant under the velocity step, so this is genuinely second order).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .corrections import CorrectionStack
from .errors import ConfigError, DivergenceError, ResolutionError
from .phasespace import GaussianMixture, GridFunction, GridSpec, PairPotential
from .vlasov import boundary_fraction

__all__ = [
    "WignerState",
    "WignerSolver",
    "coherent_wigner_init",
    "step_wigner",
    "solve_wigner",
    "RemainderResult",
    "remainder_scaling",
]

_WORKERS = max(1, int(os.environ.get("HBARLAB_THREADS", os.cpu_count() or 1)))


@dataclass
class WignerState:
    f: GridFunction
    eps: float
    t: float


def coherent_wigner_init(g, eps: float, spec: GridSpec,
                         quad_points: int = 40) -> GridFunction:
    """Gaussian-smoothed initial data of width sqrt(eps).

    Closed form for Gaussian mixtures (per-axis variances grow by eps/2);
    generic densities fall back to Gauss-Hermite quadrature.  The grid must
    resolve the smoothing width (at least 6 cells per sqrt(eps)).
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    width = math.sqrt(eps)
    cells = width / max(spec.dx, spec.dv)
    if cells < 6.0:
        raise ResolutionError(
            f"sqrt(eps)={width:.4g} spans only {cells:.2f} cells; need >= 6")
    if isinstance(g, GaussianMixture):
        return g.smoothed(eps).on_grid(spec)
    nodes, weights = np.polynomial.hermite.hermgauss(quad_points)
    zg = spec.zgrid()
    vals = np.zeros((spec.nx, spec.nv))
    for zx, wx in zip(nodes, weights):
        shifted = zg.copy()
        shifted[..., 0] -= width * zx
        for zv, wv in zip(nodes, weights):
            pts = shifted.copy()
            pts[..., 1] -= width * zv
            vals += (wx * wv / math.pi) * g.value(pts)
    return GridFunction(spec, vals)


class WignerSolver:
    """Fused split-step integrator with reality/aliasing/mass monitors."""

    def __init__(self, f0: GridFunction, phi: PairPotential, eps: float, dt: float,
                 alias_tol: float = 1e-6, leak_guard: float = 1e-6,
                 reality_tol: float = 1e-10, monitor_every: int = 20):
        if dt <= 0:
            raise ConfigError("dt must be positive")
        if eps < 0:
            raise ConfigError("eps must be nonnegative (0 selects the classical symbol)")
        spec = f0.spec
        self.spec = spec
        self.phi = phi
        self.eps = eps
        self.dt = dt
        self.t = 0.0
        self.f = f0.values.copy()
        self.alias_tol = alias_tol
        self.leak_guard = leak_guard
        self.reality_tol = reality_tol
        self.monitor_every = monitor_every
        self.kx = 2.0 * math.pi * sfft.rfftfreq(spec.nx, spec.dx)
        self.y = 2.0 * math.pi * sfft.fftfreq(spec.nv, spec.dv)
        vs = spec.vs
        self._phase_half = np.exp(-1j * self.kx[:, None] * vs[None, :] * (0.5 * dt))
        self._phase_full = self._phase_half**2
        # potential kernel on circle offsets; rfft includes the quadrature dx
        offs = (np.arange(spec.nx) + spec.nx // 2) % spec.nx - spec.nx // 2
        xi = offs * spec.dx
        self._phi_hat = sfft.rfft(phi.value(xi[:, None])) * spec.dx
        if eps > 0:
            self._sin_ky = np.sin(self.kx[:, None] * (0.5 * eps) * self.y[None, :])
        self.mass0 = f0.mass()
        self.max_mass_drift = 0.0
        self.max_imag_residue = 0.0
        self.steps_done = 0

    # -- spectral pieces ----------------------------------------------------
    def _advect(self, phase):
        fx = sfft.rfft(self.f, axis=0, workers=_WORKERS)
        fx *= phase
        self.f = sfft.irfft(fx, n=self.spec.nx, axis=0, workers=_WORKERS)

    def _symbol_exponent(self):
        """(1/eps) [Phi(x + eps y/2) - Phi(x - eps y/2)] on the (x, y) grid."""
        rho = self.f.sum(axis=1) * self.spec.dv
        phi_hat = self._phi_hat * sfft.rfft(rho)
        if self.eps > 0:
            bracket_hat = phi_hat[:, None] * (2j / self.eps) * self._sin_ky
            return sfft.irfft(bracket_hat, n=self.spec.nx, axis=0, workers=_WORKERS)
        dphi = sfft.irfft(phi_hat * (1j * self.kx), n=self.spec.nx)
        return dphi[:, None] * self.y[None, :]

    def _v_step(self, monitor: bool):
        exponent = self._symbol_exponent()
        fv = sfft.fft(self.f, axis=1, workers=_WORKERS)
        if monitor:
            self._check_alias(fv)
        fv *= np.exp(1j * self.dt * exponent)
        fc = sfft.ifft(fv, axis=1, workers=_WORKERS)
        resid = float(np.abs(fc.imag).max())
        peak = float(np.abs(fc.real).max())
        self.max_imag_residue = max(self.max_imag_residue, resid / max(peak, 1e-300))
        if resid > self.reality_tol * max(peak, 1e-300) * 1e4:
            raise DivergenceError(f"imaginary residue {resid:.2e} at t={self.t:.4g}")
        self.f = np.ascontiguousarray(fc.real)

    def _check_alias(self, fv):
        power = np.abs(fv) ** 2
        total = power.sum()
        if total == 0:
            return
        band = np.abs(self.y) >= 0.875 * np.abs(self.y).max()
        frac = power[:, band].sum() / total
        if frac > self.alias_tol:
            raise ResolutionError(
                f"{frac:.2e} of the velocity spectrum sits in the top 1/8 band "
                f"(tolerance {self.alias_tol:.0e}); refine the grid")

    def _monitor(self):
        mass = self.f.sum() * self.spec.cell
        self.max_mass_drift = max(self.max_mass_drift, abs(mass - self.mass0))
        if boundary_fraction(self.f) > self.leak_guard:
            raise ConfigError(
                f"boundary mass fraction exceeds {self.leak_guard:.0e} at t={self.t:.4g}")
        if not np.isfinite(self.f).all():
            raise DivergenceError(f"non-finite values at t={self.t:.6g}", t=self.t)

    # -- public stepping ----------------------------------------------------
    def run(self, t_final: float) -> GridFunction:
        n_steps = int(round((t_final - self.t) / self.dt))
        if abs(self.t + n_steps * self.dt - t_final) > 1e-9 * max(1.0, t_final):
            raise ConfigError("t_final is not a step multiple")
        if n_steps == 0:
            return self.grid_function()
        self._advect(self._phase_half)
        for s in range(n_steps):
            monitor = (s % self.monitor_every == 0) or s == n_steps - 1
            self._v_step(monitor)
            self._advect(self._phase_full if s < n_steps - 1 else self._phase_half)
            self.t += self.dt
            if monitor:
                self._monitor()
            self.steps_done += 1
        return self.grid_function()

    def step(self):
        """One unfused Strang step (half advection, kick, half advection)."""
        self._advect(self._phase_half)
        self._v_step(monitor=True)
        self._advect(self._phase_half)
        self.t += self.dt
        self._monitor()
        self.steps_done += 1

    def grid_function(self) -> GridFunction:
        return GridFunction(self.spec, self.f.copy())

    def apply_generator(self, values: np.ndarray, rho: np.ndarray | None = None) -> np.ndarray:
        """The instantaneous velocity operator applied to given values.

        With ``rho`` supplied the background potential is frozen to
        phi * rho; used by quadrature cross-checks of the symbol reduction.
        """
        if rho is None:
            rho = values.sum(axis=1) * self.spec.dv
        phi_hat = self._phi_hat * sfft.rfft(rho)
        if self.eps > 0:
            bracket_hat = phi_hat[:, None] * (2j / self.eps) * self._sin_ky
            exponent = sfft.irfft(bracket_hat, n=self.spec.nx, axis=0)
        else:
            dphi = sfft.irfft(phi_hat * (1j * self.kx), n=self.spec.nx)
            exponent = dphi[:, None] * self.y[None, :]
        fv = sfft.fft(values, axis=1)
        out = sfft.ifft(1j * exponent * fv, axis=1)
        return out.real


def step_wigner(state: WignerState, phi: PairPotential, dt: float) -> WignerState:
    """Single Strang step of a state (one-shot API)."""
    solver = WignerSolver(state.f, phi, state.eps, dt)
    solver.t = state.t
    solver.step()
    return WignerState(solver.grid_function(), state.eps, solver.t)


def solve_wigner(f0: GridFunction, phi: PairPotential, eps: float, t_final: float,
                 dt: float, **kwargs) -> WignerState:
    solver = WignerSolver(f0, phi, eps, dt, **kwargs)
    f = solver.run(t_final)
    return WignerState(f, eps, solver.t)


# ---------------------------------------------------------------------------
# remainder scaling


@dataclass
class RemainderResult:
    """Residual norms of the truncated expansion over an eps sweep."""

    eps_list: list
    residuals: np.ndarray  # (n_eps, K+1): column k is R_k(eps)
    slopes: np.ndarray  # fitted d log R_k / d log eps

    def rows(self):
        for i, e in enumerate(self.eps_list):
            yield (e, *self.residuals[i])


def remainder_scaling(g, phi: PairPotential, t: float, K: int, eps_list,
                      stack: CorrectionStack, dt: float,
                      solver_kwargs: dict | None = None,
                      progress=None) -> RemainderResult:
    """L1 residuals of the order-K truncation against the full solution.

    For each eps, R_k(eps) = || f_eps(t) - sum_{k'<=k} eps^k' f^(k')(t) ||_L1
    for every k <= K, plus least-squares log-log slopes over the sweep.
    """
    spec = stack.spec
    refs = [stack.at(k, t).values for k in range(K + 1)]
    eps_list = list(eps_list)
    residuals = np.zeros((len(eps_list), K + 1))
    for i, eps in enumerate(eps_list):
        f0 = coherent_wigner_init(g, eps, spec)
        state = solve_wigner(f0, phi, eps, t, dt, **(solver_kwargs or {}))
        truncation = np.zeros_like(state.f.values)
        for k in range(K + 1):
            truncation += eps**k * refs[k]
            diff = state.f.values - truncation
            residuals[i, k] = np.abs(diff).sum() * spec.cell
        if progress is not None:
            progress(eps, residuals[i])
    log_eps = np.log(np.asarray(eps_list, dtype=float))
    slopes = np.array([
        np.polyfit(log_eps, np.log(residuals[:, k]), 1)[0] for k in range(K + 1)
    ])
    return RemainderResult(eps_list, residuals, slopes)
