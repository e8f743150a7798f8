"""Mean-field Newton flow and its variational (tangent) flows.

The velocity-Verlet map is differentiated exactly: the first-order tangent
``J`` and the same-index second-order tangent ``K`` are advanced with the
derivative of the discrete update itself, so they agree with finite
differences of the integrated flow up to the difference scheme's own error,
with no extra splitting mismatch.

Component conventions: initial-condition component ``alpha`` and evolved
component ``gamma`` run over (x_1..x_d, v_1..v_d).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import CapacityError, ConfigError, DivergenceError
from .phasespace import Configuration, PairPotential, pair_forces

__all__ = [
    "FlowState",
    "Trajectory",
    "VariationalFirst",
    "VariationalSecondSame",
    "integrate_flow",
    "integrate_variational",
    "fd_flow_derivative",
    "total_energy",
    "force_jacobian",
]


@dataclass(frozen=True)
class FlowState:
    """Flow snapshot: time, configuration, step size and scheme name."""

    t: float
    config: Configuration
    dt: float
    integrator: str = "velocity-verlet"


@dataclass
class Trajectory:
    """States stored during integration (always includes both endpoints)."""

    states: list = field(default_factory=list)

    def append(self, state: FlowState):
        self.states.append(state)

    @property
    def initial(self) -> FlowState:
        return self.states[0]

    @property
    def final(self) -> FlowState:
        return self.states[-1]

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def to_csv(self, path) -> None:
        """Dump as rows (t, particle, x..., v...)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            d = self.states[0].config.d
            writer.writerow(["t", "particle"] + [f"x{a}" for a in range(d)]
                            + [f"v{a}" for a in range(d)])
            for s in self.states:
                for i in range(s.config.n):
                    writer.writerow([s.t, i, *s.config.x[i], *s.config.v[i]])


def total_energy(config: Configuration, phi: PairPotential) -> float:
    """H = sum v_i^2/2 + (1/N) sum_{l<j} phi(x_l - x_j)."""
    kinetic = 0.5 * float(np.sum(config.v**2))
    if phi.is_zero:
        return kinetic
    fast = _kernels.gaussian_pair_energy(config.x, phi)
    if fast is not None:
        return kinetic + fast
    diff = config.x[:, None, :] - config.x[None, :, :]
    vals = phi.value(diff)
    iu = np.triu_indices(config.n, k=1)
    return kinetic + float(vals[iu].sum()) / config.n


def _check_finite(x, v, step, t):
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise DivergenceError(f"non-finite state at step {step} (t={t:.6g})", step=step, t=t)


def integrate_flow(config: Configuration, phi: PairPotential, t_final: float,
                   dt: float, store_every: int = 0, check_every: int = 50) -> Trajectory:
    """Velocity-Verlet integration of the mean-field Newton flow.

    ``store_every=0`` keeps only the two endpoints; ``store_every=k`` keeps
    every k-th step as well.  Deterministic for fixed inputs.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if t_final < 0:
        raise ConfigError("t_final must be nonnegative")
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigError(f"t_final={t_final} is not a multiple of dt={dt}")

    x = config.x.copy()
    v = config.v.copy()
    traj = Trajectory()
    traj.append(FlowState(0.0, Configuration(x.copy(), v.copy()), dt))

    forces = pair_forces(x, phi)
    for step in range(1, n_steps + 1):
        v += 0.5 * dt * forces
        x += dt * v
        forces = pair_forces(x, phi)
        v += 0.5 * dt * forces
        if step % check_every == 0 or step == n_steps:
            _check_finite(x, v, step, step * dt)
        if (store_every and step % store_every == 0) or step == n_steps:
            traj.append(FlowState(step * dt, Configuration(x.copy(), v.copy()), dt))
    if n_steps == 0 and len(traj.states) == 1:
        traj.append(FlowState(0.0, Configuration(x.copy(), v.copy()), dt))
    return traj


def force_jacobian(x: np.ndarray, phi: PairPotential) -> np.ndarray:
    """d(mean-field force)/d(positions) as an (N*d, N*d) matrix."""
    n, d = x.shape
    m = n * d
    if phi.is_zero:
        return np.zeros((m, m))
    diff = x[:, None, :] - x[None, :, :]
    p = -phi.hessian(diff)  # (N, N, d, d)
    idx = np.arange(n)
    p[idx, idx] = 0.0  # self term excluded from the pair sum
    rows = p.sum(axis=1)  # (N, d, d)
    g = -p / n
    g[idx, idx] += rows / n
    return g.transpose(0, 2, 1, 3).reshape(m, m)


def _pair_index(two_d: int):
    """Symmetric (alpha, beta) pair list and lookup for packed storage."""
    pairs = [(a, b) for a in range(two_d) for b in range(a, two_d)]
    lookup = {}
    for p, (a, b) in enumerate(pairs):
        lookup[(a, b)] = p
        lookup[(b, a)] = p
    return pairs, lookup


@dataclass(frozen=True)
class VariationalFirst:
    """First-order flow derivatives J[i, j, gamma, alpha] = dz_i^gamma(t)/dz_j^alpha."""

    J: np.ndarray

    @property
    def n(self):
        return self.J.shape[0]

    def max_offdiagonal(self) -> float:
        j = self.J
        idx = np.arange(self.n)
        mask = np.ones(j.shape[:2], dtype=bool)
        mask[idx, idx] = False
        return float(np.abs(j[mask]).max())

    def max_diagonal(self) -> float:
        idx = np.arange(self.n)
        return float(np.abs(self.J[idx, idx]).max())


@dataclass(frozen=True)
class VariationalSecondSame:
    """Same-index second derivatives K[i, j, gamma, alpha, beta]."""

    K: np.ndarray

    @property
    def n(self):
        return self.K.shape[0]

    def max_offdiagonal(self) -> float:
        idx = np.arange(self.n)
        mask = np.ones(self.K.shape[:2], dtype=bool)
        mask[idx, idx] = False
        return float(np.abs(self.K[mask]).max())

    def max_diagonal(self) -> float:
        idx = np.arange(self.n)
        return float(np.abs(self.K[idx, idx]).max())


def _third_tensor(x: np.ndarray, phi: PairPotential) -> np.ndarray:
    """W[a,b,c][i,l] = -(1/N) d^3 phi / dx_a dx_b dx_c at x_i - x_l."""
    n, d = x.shape
    diff = x[:, None, :] - x[None, :, :]
    t3 = -phi.third_derivative(diff) / n  # (N, N, d, d, d)
    return t3


def _q_same_index(x, phi, jx_r, pairs):
    """Curvature source for the same-index second tangent.

    jx_r is the position tangent reshaped to (l, b, alpha, j); returns the
    packed (N*d, N, npairs) array of
        sum_{bc} (1/N) sum_l f''_{abc}(x_i-x_l) (Jx_i - Jx_l)_b^(j,alpha)
                                                 (Jx_i - Jx_l)_c^(j,beta).
    The l = i contribution cancels identically, so no masking is needed.
    """
    n, d = x.shape
    two_d = 2 * d
    npairs = len(pairs)
    w_all = _third_tensor(x, phi)  # (N, N, a, b, c)
    if d == 1:
        # hot path: one blocked product W @ [slices | pair products]
        w = w_all[:, :, 0, 0, 0]
        r = w.sum(axis=1)
        slices = [np.ascontiguousarray(jx_r[:, 0, al, :]) for al in range(two_d)]
        blocks = slices + [slices[al] * slices[be] for al, be in pairs]
        wb = w @ np.concatenate(blocks, axis=1)
        wsl = [wb[:, al * n:(al + 1) * n] for al in range(two_d)]
        out = np.empty((n, n, npairs))
        for p, (al, be) in enumerate(pairs):
            u, vv = slices[al], slices[be]
            wuv = wb[:, (two_d + p) * n:(two_d + p + 1) * n]
            out[:, :, p] = r[:, None] * u * vv - u * wsl[be] - wsl[al] * vv + wuv
        return out.reshape(n, n, npairs)
    out = np.zeros((n, d, n, npairs))
    for a in range(d):
        for b in range(d):
            for c in range(d):
                w = w_all[:, :, a, b, c]
                r = w.sum(axis=1)  # (N,)
                wsl = {}
                for e in {al for al, _ in pairs} | {be for _, be in pairs}:
                    wsl[(b, e)] = w @ jx_r[:, b, e, :]
                    wsl[(c, e)] = w @ jx_r[:, c, e, :]
                for p, (al, be) in enumerate(pairs):
                    u = jx_r[:, b, al, :]  # (l, j)
                    vv = jx_r[:, c, be, :]
                    wuv = w @ (u * vv)
                    out[:, a, :, p] += (
                        r[:, None] * u * vv - u * wsl[(c, be)] - wsl[(b, al)] * vv + wuv
                    )
    return out.reshape(n * d, n, npairs)


def integrate_variational(config: Configuration, phi: PairPotential, t_final: float,
                          dt: float, order: int = 1, cap: int = 512,
                          check_every: int = 50):
    """Integrate the flow together with its first (and same-index second)
    variational equations, differentiating the discrete update exactly.

    Returns (Trajectory with endpoints, VariationalFirst, VariationalSecondSame
    or None).
    """
    if order not in (1, 2):
        raise ConfigError("order must be 1 or 2")
    n, d = config.x.shape
    two_d = 2 * d
    m = n * d
    if order == 2 and n > cap:
        need = 2 * m * n * (two_d * (two_d + 1) // 2) * 8
        raise CapacityError(
            f"N={n} exceeds the order-2 cap {cap}; second tangent needs "
            f"~{need/1e6:.0f} MB", required_bytes=need)
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigError(f"t_final={t_final} is not a multiple of dt={dt}")

    x = config.x.copy()
    v = config.v.copy()
    # one position-like and one velocity-like buffer holding [J | K] so the
    # kick is a single matrix product and the drift a single fused update;
    # J columns ordered (alpha, j): block alpha*N + j, alpha over 2d components
    p_cols = two_d * n
    pairs, _ = _pair_index(two_d)
    npairs = len(pairs)
    k_cols = n * npairs if order == 2 else 0
    bx = np.zeros((m, p_cols + k_cols))
    bv = np.zeros((m, p_cols + k_cols))
    jx = bx[:, :p_cols]
    jv = bv[:, :p_cols]
    for a in range(d):
        rows = np.arange(n) * d + a
        jx[rows, a * n + np.arange(n)] = 1.0
        jv[rows, (d + a) * n + np.arange(n)] = 1.0
    if order == 2:
        kx = bx[:, p_cols:]
        kv = bv[:, p_cols:]

    def kick(h):
        g = force_jacobian(x, phi)
        bv_inc = g @ bx
        if order == 2 and not phi.is_zero:
            jx_r = jx.reshape(n, d, two_d, n)
            q = _q_same_index(x, phi, jx_r, pairs)
            bv_inc[:, p_cols:] += q.reshape(m, k_cols)
        bv[:, :] += h * bv_inc

    traj = Trajectory()
    traj.append(FlowState(0.0, Configuration(x.copy(), v.copy()), dt))
    forces = pair_forces(x, phi)
    for step in range(1, n_steps + 1):
        kick(0.5 * dt)
        v += 0.5 * dt * forces
        x += dt * v
        bx += dt * bv
        forces = pair_forces(x, phi)
        kick(0.5 * dt)
        v += 0.5 * dt * forces
        if step % check_every == 0 or step == n_steps:
            _check_finite(x, v, step, step * dt)
            if not np.isfinite(bx).all():
                raise DivergenceError(f"non-finite tangent at step {step}", step=step)
    traj.append(FlowState(n_steps * dt, Configuration(x.copy(), v.copy()), dt))

    jfull = np.empty((n, n, two_d, two_d))
    jfull[:, :, :d, :] = jx.reshape(n, d, two_d, n).transpose(0, 3, 1, 2)
    jfull[:, :, d:, :] = jv.reshape(n, d, two_d, n).transpose(0, 3, 1, 2)
    first = VariationalFirst(jfull)
    second = None
    if order == 2:
        kfull = np.empty((n, n, two_d, two_d, two_d))
        kx_r = np.ascontiguousarray(kx).reshape(n, d, n, npairs)
        kv_r = np.ascontiguousarray(kv).reshape(n, d, n, npairs)
        for p, (a, b) in enumerate(pairs):
            kfull[:, :, :d, a, b] = kx_r[:, :, :, p].transpose(0, 2, 1)
            kfull[:, :, d:, a, b] = kv_r[:, :, :, p].transpose(0, 2, 1)
            if a != b:
                kfull[:, :, :, b, a] = kfull[:, :, :, a, b]
        second = VariationalSecondSame(kfull)
    return traj, first, second


def _perturbed(config: Configuration, j: int, comp: int, delta: float) -> Configuration:
    x = config.x.copy()
    v = config.v.copy()
    d = config.d
    if comp < d:
        x[j, comp] += delta
    else:
        v[j, comp - d] += delta
    return Configuration(x, v)


def _flow_component(config, phi, t, dt, i, gamma):
    final = integrate_flow(config, phi, t, dt).final.config
    d = config.d
    return final.x[i, gamma] if gamma < d else final.v[i, gamma - d]


def fd_flow_derivative(config: Configuration, phi: PairPotential, t: float, dt: float,
                       i: int, gamma: int, j: int, directions: tuple, h: float) -> float:
    """Central-difference flow derivative oracle.

    ``directions`` holds one component index (first derivative) or two
    (same-index second derivative), both acting on particle j's initial data;
    re-runs the flow integrator with perturbed initial conditions.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    if len(directions) == 1:
        (a,) = directions
        up = _flow_component(_perturbed(config, j, a, +h), phi, t, dt, i, gamma)
        dn = _flow_component(_perturbed(config, j, a, -h), phi, t, dt, i, gamma)
        return (up - dn) / (2.0 * h)
    if len(directions) == 2:
        a, b = directions
        if a == b:
            up = _flow_component(_perturbed(config, j, a, +h), phi, t, dt, i, gamma)
            mid = _flow_component(config, phi, t, dt, i, gamma)
            dn = _flow_component(_perturbed(config, j, a, -h), phi, t, dt, i, gamma)
            return (up - 2.0 * mid + dn) / h**2
        pp = _flow_component(_perturbed(_perturbed(config, j, a, +h), j, b, +h), phi, t, dt, i, gamma)
        pm = _flow_component(_perturbed(_perturbed(config, j, a, +h), j, b, -h), phi, t, dt, i, gamma)
        mp = _flow_component(_perturbed(_perturbed(config, j, a, -h), j, b, +h), phi, t, dt, i, gamma)
        mm = _flow_component(_perturbed(_perturbed(config, j, a, -h), j, b, -h), phi, t, dt, i, gamma)
        return (pp - pm - mp + mm) / (4.0 * h**2)
    raise ConfigError("directions must contain one or two component indices")
