"""Semiclassical correction hierarchy on the phase-space grid (d=1).

Order zero is the self-consistent transport equation; each higher order k
solves a linear problem driven by the zero-order characteristics plus a
source assembled from lower orders.  The integral (variation-of-constants)
form is realized per step as: transport along the frozen zero-order
characteristics, with the source added in a half/half split around the
velocity kick, which is second order in dt and conserves the discrete
integral exactly (every source term is a velocity divergence with an
x-dependent coefficient, and wrap stencils sum to zero along v).

All orders advance in lockstep so that sources always see midpoint states;
the per-order entry point replays the lower orders from their initial data.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .empirical import gaussian_coefficients
from .errors import ConfigError, DivergenceError, TimeRangeError, UnsupportedOrderError
from .phasespace import (GaussianMixture, GridFunction, GridSpec, PairPotential,
                         load_snapshot, save_snapshot)
from .vlasov import advect_v, advect_x, boundary_fraction, convolve_x, v_derivative

__all__ = [
    "CorrectionStack",
    "GridSeries",
    "expansion_coefficient",
    "coherent_initial_stack",
    "apply_Tn",
    "source_terms",
    "assemble_source",
    "solve_stack",
    "solve_correction",
    "solve_linear",
    "l1_growth_bound",
]


def expansion_coefficient(n: int) -> float:
    """c_n = 1 / (2^n (n+1)!)."""
    return 1.0 / (2.0**n * math.factorial(n + 1))


def coherent_initial_stack(g: GaussianMixture, K: int, spec: GridSpec) -> list:
    """Initial expansion coefficients of a coherent-state mixture on the grid.

    Order k is the order-2k Gaussian derivation of the base density; order 0
    is the density itself.  Needs analytic derivatives of g to order 2K.
    """
    if g.dim != 2:
        raise ConfigError("grid stacks require d=1")
    zg = spec.zgrid()
    out = [GridFunction(spec, g.value(zg))]
    for k in range(1, K + 1):
        deriv = gaussian_coefficients(2 * k, 1)
        vals = np.zeros((spec.nx, spec.nv))
        for mult, w in deriv.items():
            vals += w * g.derivative(mult, zg)
        out.append(GridFunction(spec, vals))
    return out


def apply_Tn(n: int, h: GridFunction, gamma: GridFunction, phi: PairPotential) -> GridFunction:
    """Order-n expansion operator applied to gamma with background h.

    Odd n gives the exact zero grid (the odd expansion operators vanish
    identically); even n yields
        (-1)^{n/2} c_n (d^{n+1}phi/dx^{n+1} * rho_h)(x) d^{n+1}gamma/dv^{n+1}.
    """
    if h.spec != gamma.spec:
        raise ConfigError("background and argument live on different grids")
    spec = gamma.spec
    if n % 2 == 1:
        return GridFunction(spec, np.zeros((spec.nx, spec.nv)))
    if n + 1 > phi.max_order:
        raise UnsupportedOrderError(
            f"operator order {n} needs potential derivatives of order {n + 1} "
            f"(max {phi.max_order})")
    vals = _tn_values(n, h.density_x(), gamma.values, spec, phi)
    return GridFunction(spec, vals)


def _tn_values(n: int, rho_h: np.ndarray, gamma: np.ndarray, spec: GridSpec,
               phi: PairPotential) -> np.ndarray:
    conv = convolve_x(spec, phi, n + 1, rho_h)
    dv = v_derivative(gamma, spec, n + 1)
    sign = -1.0 if (n // 2) % 2 else 1.0
    return sign * expansion_coefficient(n) * conv[:, None] * dv


def source_terms(k: int) -> list:
    """(s, r, l) triples entering the order-k source.

    Constraint set: s + r + l = k with l < k and r < k; odd s dropped since
    those operators vanish identically.
    """
    out = []
    for s in range(0, k + 1, 2):
        for r in range(0, k - s + 1):
            l = k - s - r
            if l < k and r < k:
                out.append((s, r, l))
    return out


def assemble_source(k: int, slices: list, phi: PairPotential) -> GridFunction:
    """Order-k source from same-time lower-order slices (list indexed by order)."""
    if len(slices) < k:
        raise ConfigError(f"need orders 0..{k - 1} to assemble the order-{k} source")
    spec = slices[0].spec
    vals = np.zeros((spec.nx, spec.nv))
    for s, r, l in source_terms(k):
        vals += _tn_values(s, slices[r].density_x(), slices[l].values, spec, phi)
    return GridFunction(spec, vals)


@dataclass
class GridSeries:
    """Time-indexed grid functions."""

    times: list
    grids: list

    def at(self, t: float, tol: float = 1e-9) -> GridFunction:
        for tt, gg in zip(self.times, self.grids):
            if abs(tt - t) <= tol:
                return gg
        raise TimeRangeError(f"no stored slice at t={t}")

    @property
    def final(self) -> GridFunction:
        return self.grids[-1]


@dataclass
class CorrectionStack:
    """The family of expansion coefficients on a shared grid."""

    spec: GridSpec
    k_max: int
    times: list
    orders: list  # orders[k] is a GridSeries
    mass_drift: list = field(default_factory=list)

    def at(self, k: int, t: float) -> GridFunction:
        if not 0 <= k <= self.k_max:
            raise UnsupportedOrderError(f"stack holds orders 0..{self.k_max}")
        return self.orders[k].at(t)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        manifest = {"k_max": self.k_max, "times": list(map(float, self.times)),
                    "orders": []}
        for k in range(self.k_max + 1):
            files = []
            for i, t in enumerate(self.times):
                name = f"order{k}_slice{i}.grid"
                save_snapshot(os.path.join(directory, name), self.orders[k].grids[i], t)
                files.append(name)
            manifest["orders"].append(files)
        with open(os.path.join(directory, "stack.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)

    @staticmethod
    def load(directory) -> "CorrectionStack":
        with open(os.path.join(directory, "stack.json")) as fh:
            manifest = json.load(fh)
        times = manifest["times"]
        orders = []
        spec = None
        for files in manifest["orders"]:
            grids = []
            for name in files:
                gf, _ = load_snapshot(os.path.join(directory, name))
                spec = gf.spec
                grids.append(gf)
            orders.append(GridSeries(list(times), grids))
        return CorrectionStack(spec, manifest["k_max"], times, orders)


class _StackEngine:
    """Lockstep integrator for the zero order plus corrections."""

    def __init__(self, fields: list, spec: GridSpec, phi: PairPotential, dt: float,
                 hierarchy: bool = True, extra_sources: dict | None = None,
                 leak_guard: float = 1e-6):
        vmax = max(abs(spec.v_min), abs(spec.v_max))
        if vmax * dt > 4.0 * spec.dx:
            raise ConfigError("x-displacement per step exceeds 4 cells; shrink dt")
        self.fields = [np.array(f, dtype=float) for f in fields]
        self.spec = spec
        self.phi = phi
        self.dt = dt
        self.t = 0.0
        self.hierarchy = hierarchy
        self.extra_sources = extra_sources or {}
        self.leak_guard = leak_guard
        self.mass0 = [f.sum() * spec.cell for f in self.fields]
        self.mass_drift = [0.0] * len(self.fields)

    def step(self):
        spec, phi, dt = self.spec, self.phi, self.dt
        half = 0.5 * dt
        fs = self.fields
        fs[:] = [advect_x(f, spec, half) for f in fs]
        if boundary_fraction(fs[0]) > self.leak_guard:
            raise ConfigError(
                f"zero-order mass fraction at the edge exceeds {self.leak_guard:.0e} "
                f"at t={self.t:.4g}; enlarge the domain")
        rho0 = fs[0].sum(axis=1) * spec.dv
        force0 = -convolve_x(spec, phi, 1, rho0)
        dvf0 = v_derivative(fs[0], spec, 1)
        t_mid = self.t + half

        sources = [None]
        for k in range(1, len(fs)):
            rho_k = fs[k].sum(axis=1) * spec.dv
            src = convolve_x(spec, phi, 1, rho_k)[:, None] * dvf0
            if self.hierarchy:
                for s, r, l in source_terms(k):
                    rho_r = fs[r].sum(axis=1) * spec.dv
                    src += _tn_values(s, rho_r, fs[l], spec, phi)
            extra = self.extra_sources.get(k)
            if extra is not None:
                add = extra(t_mid, spec)
                if add is not None:
                    src = src + add
            sources.append(src)

        for k in range(1, len(fs)):
            fs[k] += half * sources[k]
        fs[:] = [advect_v(f, spec, force0, dt) for f in fs]
        for k in range(1, len(fs)):
            fs[k] += half * sources[k]
        fs[:] = [advect_x(f, spec, half) for f in fs]
        self.t += dt
        for k, f in enumerate(fs):
            if not np.isfinite(f).all():
                raise DivergenceError(
                    f"non-finite order-{k} values at t={self.t:.6g}", t=self.t)
            self.mass_drift[k] = max(self.mass_drift[k],
                                     abs(f.sum() * spec.cell - self.mass0[k]))

    def run(self, n_steps: int, collect_steps: set) -> dict:
        collected = {}
        if 0 in collect_steps:
            collected[0] = [f.copy() for f in self.fields]
        for s in range(1, n_steps + 1):
            self.step()
            if s in collect_steps:
                collected[s] = [f.copy() for f in self.fields]
        return collected


def _steps_for(times, t_final, dt):
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigError(f"t_final={t_final} is not a multiple of dt={dt}")
    if times is None:
        times = [0.0, t_final]
    steps = {}
    for t in times:
        s = int(round(t / dt))
        if abs(s * dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= s <= n_steps:
            raise ConfigError(f"store time {t} is not a step multiple within range")
        steps[s] = float(t)
    return n_steps, steps


def solve_stack(phi: PairPotential, spec: GridSpec, K: int, t_final: float, dt: float,
                g: GaussianMixture | None = None, initial: list | None = None,
                store_times: list | None = None, k_cap: int = 3,
                leak_guard: float = 1e-6) -> CorrectionStack:
    """Solve orders 0..K in lockstep from coherent initial data (or override)."""
    if K > k_cap:
        raise ConfigError(f"order K={K} beyond the configured cap {k_cap}")
    if initial is None:
        if g is None:
            raise ConfigError("either g or explicit initial data is required")
        initial = coherent_initial_stack(g, K, spec)
    if len(initial) != K + 1:
        raise ConfigError(f"initial stack has {len(initial)} orders, expected {K + 1}")
    engine = _StackEngine([f.values for f in initial], spec, phi, dt,
                          leak_guard=leak_guard)
    n_steps, step_map = _steps_for(store_times, t_final, dt)
    collected = engine.run(n_steps, set(step_map))
    times = sorted(step_map, key=lambda s: s)
    tvals = [step_map[s] for s in times]
    orders = []
    for k in range(K + 1):
        grids = [GridFunction(spec, collected[s][k]) for s in times]
        orders.append(GridSeries(list(tvals), grids))
    return CorrectionStack(spec, K, tvals, orders, mass_drift=list(engine.mass_drift))


def solve_correction(k: int, stack: CorrectionStack, f0k: GridFunction, t_final: float,
                     dt: float, phi: PairPotential, store_times: list | None = None,
                     leak_guard: float = 1e-6) -> GridSeries:
    """Solve the single order-k problem given lower orders at t=0.

    The lower orders are replayed in lockstep from the stack's initial
    slices; ``f0k`` is the order-k initial datum.
    """
    if k < 1:
        raise ConfigError("orders k >= 1 only; order 0 is the base solver")
    lower = [stack.at(l, 0.0) for l in range(k)]
    fields = [f.values for f in lower] + [f0k.values]
    engine = _StackEngine(fields, stack.spec, phi, dt, leak_guard=leak_guard)
    n_steps, step_map = _steps_for(store_times, t_final, dt)
    collected = engine.run(n_steps, set(step_map))
    steps = sorted(step_map)
    return GridSeries([step_map[s] for s in steps],
                      [GridFunction(stack.spec, collected[s][k]) for s in steps])


def solve_linear(gamma0: GridFunction, theta_fn, f0: GridFunction, phi: PairPotential,
                 t_final: float, dt: float, store_times: list | None = None,
                 leak_guard: float = 1e-6) -> GridSeries:
    """Solve the linearized transport problem around the zero-order flow.

    ``theta_fn(t_mid, spec) -> array | None`` injects the inhomogeneity; the
    solver is linear in (gamma0, theta), which superposition tests exercise.
    """
    engine = _StackEngine([f0.values, gamma0.values], gamma0.spec, phi, dt,
                          hierarchy=False,
                          extra_sources={1: theta_fn} if theta_fn is not None else {},
                          leak_guard=leak_guard)
    n_steps, step_map = _steps_for(store_times, t_final, dt)
    collected = engine.run(n_steps, set(step_map))
    steps = sorted(step_map)
    return GridSeries([step_map[s] for s in steps],
                      [GridFunction(gamma0.spec, collected[s][1]) for s in steps])


def l1_growth_bound(stack: CorrectionStack, k: int, phi: PairPotential) -> float:
    """A-posteriori uniqueness-series bound on the order-k L1 norm at t_final.

    exp(t sup_tau ||d_v f0(tau)||_1 ||phi'||_inf) ||f0k||_1 plus the same
    factor applied to the time-integrated source norm (rectangle rule over
    the stored slices).
    """
    t_final = stack.times[-1]
    sup_dv = 0.0
    for gf in stack.orders[0].grids:
        dv = v_derivative(gf.values, stack.spec, 1)
        sup_dv = max(sup_dv, float(np.abs(dv).sum() * stack.spec.cell))
    gamma0_l1 = stack.orders[k].grids[0].l1()
    rate = sup_dv * phi.derivative_bound(1)
    growth = math.exp(rate * t_final)
    source_l1 = 0.0
    if len(stack.times) > 1:
        for i, t in enumerate(stack.times):
            slices = [stack.at(l, t) for l in range(k)]
            theta = assemble_source(k, slices, phi)
            # (nabla phi * gamma) d_v f0 part of the source budget
            coupling = stack.at(k, t).l1() * phi.derivative_bound(1) * sup_dv
            source_l1 = max(source_l1, theta.l1() + coupling)
    return growth * (gamma0_l1 + t_final * source_l1)
