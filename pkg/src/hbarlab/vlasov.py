"""Semi-Lagrangian solver for the self-consistent transport equation (d=1).

Strang-split update: half position advection, velocity kick with the force
frozen at the split midpoint, half position advection.  Both advections are
per-line uniform shifts evaluated through the periodic cubic B-spline
interpolant, which conserves the discrete mass exactly (partition of unity
plus a prefilter that preserves constants), so mass drift is pure round-off.

The same advection and convolution primitives drive the correction-hierarchy
solver, which keeps the zero-order solution and its linearization in the same
discretization family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DivergenceError, DomainError, TimeRangeError
from .phasespace import GridFunction, GridSpec, PairPotential

__all__ = [
    "VlasovState",
    "VlasovTrajectory",
    "VlasovStepper",
    "shift_periodic",
    "convolve_x",
    "self_consistent_force",
    "step_vlasov",
    "solve_vlasov",
    "characteristic_map",
    "fd_stencil",
    "v_derivative",
    "boundary_fraction",
]


# ---------------------------------------------------------------------------
# advection primitive


def _bspline3(t: np.ndarray) -> tuple:
    """Cubic B-spline weights for fractional offset t in [0, 1)."""
    omt = 1.0 - t
    w_m1 = omt**3 / 6.0
    w_0 = 2.0 / 3.0 - t**2 + 0.5 * t**3
    w_1 = 2.0 / 3.0 - omt**2 + 0.5 * omt**3
    w_2 = t**3 / 6.0
    return w_m1, w_0, w_1, w_2


def shift_periodic(values: np.ndarray, delta_cells: np.ndarray, move_axis: int) -> np.ndarray:
    """Backward semi-Lagrangian shift: out[i] = f(i - delta) along one axis.

    ``delta_cells`` is one displacement per line (the other axis), in cell
    units; interpolation is the exact periodic cubic B-spline.
    """
    work = np.ascontiguousarray(np.moveaxis(values, move_axis, -1))
    n = work.shape[-1]
    coeff = ndimage.spline_filter1d(work, order=3, axis=-1, mode="grid-wrap")
    delta = np.asarray(delta_cells, dtype=float)
    pos = -delta  # evaluation offset relative to each node
    base = np.floor(pos).astype(np.int64)
    frac = pos - base

    from . import _kernels

    lead = coeff.shape[:-1]
    fast = _kernels.spline_shift_rows(
        coeff.reshape(-1, n), np.broadcast_to(base, lead).ravel(),
        np.broadcast_to(frac, lead).ravel())
    if fast is not None:
        return np.moveaxis(fast.reshape(work.shape), -1, move_axis)

    w = _bspline3(frac)
    idx0 = np.arange(n, dtype=np.int64)
    out = np.zeros_like(work)
    for m, wm in zip((-1, 0, 1, 2), w):
        idx = (idx0[None, :] + (base[:, None] + m)) % n
        out += wm[:, None] * np.take_along_axis(coeff, idx, axis=-1)
    return np.moveaxis(out, -1, move_axis)


def advect_x(values: np.ndarray, spec: GridSpec, dt: float) -> np.ndarray:
    """f(x, v) <- f(x - v dt, v)."""
    delta = spec.vs * dt / spec.dx
    # lines indexed by v, motion along x: transpose so lines lead
    return shift_periodic(values.T, delta, move_axis=-1).T


def advect_v(values: np.ndarray, spec: GridSpec, force: np.ndarray, dt: float) -> np.ndarray:
    """f(x, v) <- f(x, v - F(x) dt)."""
    delta = force * dt / spec.dv
    return shift_periodic(values, delta, move_axis=-1)


# ---------------------------------------------------------------------------
# self-consistent force (trapezoidal convolution on the periodic box)


def _conv_kernel_hat(spec: GridSpec, phi: PairPotential, order: int) -> np.ndarray:
    """rfft of the order-th derivative of phi sampled on signed circle offsets."""
    cache = phi.__dict__.setdefault("_conv_cache", {})
    key = (spec, order)
    if key not in cache:
        n = spec.nx
        offs = (np.arange(n) + n // 2) % n - n // 2
        xi = offs * spec.dx
        vals = phi.derivative((order,), xi[:, None])
        cache[key] = np.fft.rfft(vals) * spec.dx
    return cache[key]


def convolve_x(spec: GridSpec, phi: PairPotential, order: int, rho: np.ndarray) -> np.ndarray:
    """(d^order phi / dx^order * rho)(x_i), trapezoidal on the periodic grid."""
    if phi.is_zero:
        return np.zeros(spec.nx)
    khat = _conv_kernel_hat(spec, phi, order)
    return np.fft.irfft(khat * np.fft.rfft(rho), n=spec.nx)


def boundary_fraction(values: np.ndarray, frame: int = 2) -> float:
    """|f| mass in the outer frame relative to the total |f| mass."""
    total = np.abs(values).sum()
    if total == 0.0:
        return 0.0
    inner = np.abs(values[frame:-frame, frame:-frame]).sum()
    return float((total - inner) / total)


def self_consistent_force(f: GridFunction, phi: PairPotential,
                          tail_tol: float = 1e-8) -> np.ndarray:
    """F(x) = -(phi' * rho_f)(x) with a tail-coverage check."""
    if boundary_fraction(f.values) > tail_tol:
        raise DomainError(
            f"boundary tail fraction {boundary_fraction(f.values):.2e} exceeds {tail_tol:.0e}; "
            "enlarge the grid domain")
    rho = f.density_x()
    return -convolve_x(f.spec, phi, 1, rho)


# ---------------------------------------------------------------------------
# stepping


@dataclass
class VlasovState:
    f: GridFunction
    t: float
    force: np.ndarray | None = None


@dataclass
class VlasovTrajectory:
    """Stored states plus the per-step midpoint force history."""

    spec: GridSpec
    dt: float = 0.0
    states: list = field(default_factory=list)
    force_times: list = field(default_factory=list)
    force_profiles: list = field(default_factory=list)
    max_mass_drift: float = 0.0
    min_value: float = 0.0

    def at(self, t: float, tol: float = 1e-9) -> VlasovState:
        for s in self.states:
            if abs(s.t - t) <= tol:
                return s
        raise TimeRangeError(f"no stored state at t={t}")

    @property
    def final(self) -> VlasovState:
        return self.states[-1]


class VlasovStepper:
    """Strang-split stepper exposing the midpoint state for co-transport."""

    def __init__(self, f0: GridFunction, phi: PairPotential, dt: float,
                 leak_guard: float = 1e-6, tail_tol: float = 1e-8):
        if dt <= 0:
            raise ConfigError("dt must be positive")
        spec = f0.spec
        vmax = max(abs(spec.v_min), abs(spec.v_max))
        if vmax * dt > 4.0 * spec.dx:
            raise ConfigError(
                f"x-displacement per step {vmax * dt:.3g} exceeds 4 cells "
                f"({4 * spec.dx:.3g}); shrink dt")
        self.spec = spec
        self.phi = phi
        self.dt = dt
        self.t = 0.0
        self.f = f0.values.copy()
        self.leak_guard = leak_guard
        self.tail_tol = tail_tol
        self.mass0 = f0.mass()
        self.max_mass_drift = 0.0
        self.min_value = float(self.f.min())
        self._mid = None
        self._force = None

    # -- split sub-steps ---------------------------------------------------
    def begin_step(self):
        """Half x-advection; compute and cache the midpoint force."""
        self.f = advect_x(self.f, self.spec, 0.5 * self.dt)
        if boundary_fraction(self.f) > self.leak_guard:
            raise DomainError(
                f"mass fraction {boundary_fraction(self.f):.2e} at the domain edge "
                f"exceeds {self.leak_guard:.0e} at t={self.t:.4g}")
        rho = self.f.sum(axis=1) * self.spec.dv
        self._force = -convolve_x(self.spec, self.phi, 1, rho)
        if np.abs(self._force).max() * self.dt > 4.0 * self.spec.dv:
            raise ConfigError("v-displacement per step exceeds 4 cells; shrink dt")
        self._mid = self.f
        return self._mid, self._force

    def end_step(self):
        """Velocity kick with the midpoint force, then half x-advection."""
        self.f = advect_v(self.f, self.spec, self._force, self.dt)
        self.f = advect_x(self.f, self.spec, 0.5 * self.dt)
        self.t += self.dt
        if not np.isfinite(self.f).all():
            raise DivergenceError(f"non-finite grid values at t={self.t:.6g}", t=self.t)
        mass = self.f.sum() * self.spec.cell
        self.max_mass_drift = max(self.max_mass_drift, abs(mass - self.mass0))
        self.min_value = min(self.min_value, float(self.f.min()))
        self._mid = None
        self._force = None

    def step(self):
        self.begin_step()
        self.end_step()

    def grid_function(self) -> GridFunction:
        return GridFunction(self.spec, self.f.copy())


def step_vlasov(state: VlasovState, phi: PairPotential, dt: float) -> VlasovState:
    """Single Strang-split update of a state (one-shot API)."""
    stepper = VlasovStepper(state.f, phi, dt)
    stepper.t = state.t
    _, force = stepper.begin_step()
    stepper.end_step()
    return VlasovState(stepper.grid_function(), stepper.t, force)


def solve_vlasov(f0: GridFunction, phi: PairPotential, t_final: float, dt: float,
                 store_every: int = 0, leak_guard: float = 1e-6) -> VlasovTrajectory:
    """Integrate to t_final, recording states and midpoint force profiles."""
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigError(f"t_final={t_final} is not a multiple of dt={dt}")
    stepper = VlasovStepper(f0, phi, dt, leak_guard=leak_guard)
    traj = VlasovTrajectory(f0.spec, dt)
    traj.states.append(VlasovState(f0.copy(), 0.0))
    for step in range(1, n_steps + 1):
        _, force = stepper.begin_step()
        traj.force_times.append(stepper.t + 0.5 * dt)
        traj.force_profiles.append(force.copy())
        stepper.end_step()
        if (store_every and step % store_every == 0) or step == n_steps:
            traj.states.append(VlasovState(stepper.grid_function(), stepper.t))
    traj.max_mass_drift = stepper.max_mass_drift
    traj.min_value = stepper.min_value
    return traj


# ---------------------------------------------------------------------------
# characteristics of a stored force field


def characteristic_map(traj: VlasovTrajectory, z, t_from: float, t_to: float,
                       n_substeps: int = 0) -> np.ndarray:
    """Integrate dx/dt = v, dv/dt = F(x, t) through the stored force history.

    Works forward or backward; the force field is linear in time between the
    stored midpoint profiles and cubic (periodic spline) in x.  ``z`` is one
    phase point (2,) or an array (..., 2) of them.
    """
    if not traj.force_times:
        raise TimeRangeError("trajectory holds no force history")
    times = np.asarray(traj.force_times)
    t0 = traj.states[0].t
    t1 = t0 + len(times) * traj.dt
    if min(t_from, t_to) < t0 - 1e-9 or max(t_from, t_to) > t1 + 1e-9:
        raise TimeRangeError(
            f"[{min(t_from, t_to)}, {max(t_from, t_to)}] outside stored "
            f"range [{t0}, {t1}]")

    spec = traj.spec
    profiles = np.asarray(traj.force_profiles)
    coeffs = ndimage.spline_filter1d(profiles, order=3, axis=1, mode="grid-wrap")

    def force_at(x, t):
        # linear interpolation in time between midpoint profiles
        if len(times) == 1:
            c = coeffs[0]
        else:
            j = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2))
            w = (t - times[j]) / (times[j + 1] - times[j])
            w = min(max(w, 0.0), 1.0)
            c = (1 - w) * coeffs[j] + w * coeffs[j + 1]
        pos = (x - spec.x_min) / spec.dx
        return ndimage.map_coordinates(c, pos[None], order=3, mode="grid-wrap",
                                       prefilter=False)

    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z).copy()
    x, v = pts[:, 0].copy(), pts[:, 1].copy()
    if n_substeps <= 0:
        n_substeps = max(1, int(round(abs(t_to - t_from) / traj.dt)))
    h = (t_to - t_from) / n_substeps
    t = t_from
    for _ in range(n_substeps):
        # classical RK4 on (x, v)
        k1x, k1v = v, force_at(x, t)
        k2x, k2v = v + 0.5 * h * k1v, force_at(x + 0.5 * h * k1x, t + 0.5 * h)
        k3x, k3v = v + 0.5 * h * k2v, force_at(x + 0.5 * h * k2x, t + 0.5 * h)
        k4x, k4v = v + h * k3v, force_at(x + h * k3x, t + h)
        x = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        t += h
    out = np.stack([x, v], axis=-1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# high-order finite-difference derivatives on the grid (wrap boundary)


def fd_stencil(deriv: int, halfwidth: int | None = None) -> np.ndarray:
    """Central stencil coefficients (in cell units) of 4th-order accuracy."""
    if halfwidth is None:
        halfwidth = (deriv + 3) // 2
    nodes = np.arange(-halfwidth, halfwidth + 1, dtype=float)
    size = nodes.size
    vander = np.vander(nodes, size, increasing=True).T  # row q: nodes**q
    rhs = np.zeros(size)
    rhs[deriv] = math.factorial(deriv)
    return np.linalg.solve(vander, rhs)


def v_derivative(values: np.ndarray, spec: GridSpec, order: int) -> np.ndarray:
    """order-th derivative along v with 4th-order wrap stencils."""
    w = fd_stencil(order)
    out = ndimage.correlate1d(values, w, axis=1, mode="wrap")
    return out / spec.dv**order
