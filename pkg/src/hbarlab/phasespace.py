"""Shared phase-space domain types.

Conventions used across the package:

* a phase point is ``z = (x_1..x_d, v_1..v_d)``; arrays of points have the
  component axis last, shape ``(..., 2d)``;
* particle configurations store positions and velocities separately as
  ``(N, d)`` arrays;
* grids are d=1 only (positions on the first axis, velocities on the second)
  and are treated as periodic boxes with negligible-tail truncation, so that
  uniform-shift interpolation and spectral transforms conserve mass exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UnsupportedOrderError

__all__ = [
    "Configuration",
    "PairPotential",
    "GaussianPotential",
    "ZeroPotential",
    "GaussianMixture",
    "GridSpec",
    "GridFunction",
    "TestFunction",
    "GaussianBump",
    "TanhWindow",
    "TestBank",
    "default_bank",
    "potential_derivative",
    "mean_field_force",
    "mean_field_forces",
    "hermite_values",
    "save_snapshot",
    "load_snapshot",
]


def hermite_values(m: int, u: np.ndarray) -> np.ndarray:
    """Physicists' Hermite polynomial H_m evaluated by the upward recurrence."""
    u = np.asarray(u, dtype=float)
    if m == 0:
        return np.ones_like(u)
    h_prev = np.ones_like(u)
    h = 2.0 * u
    for n in range(1, m):
        h, h_prev = 2.0 * u * h - 2.0 * n * h_prev, h
    return h


def _hermite_gauss_max(m: int) -> float:
    """sup over the real line of |H_m(u) exp(-u^2)|, by dense scan."""
    u = np.linspace(-12.0, 12.0, 200001)
    vals = np.abs(hermite_values(m, u) * np.exp(-(u**2)))
    return float(vals.max()) * (1.0 + 1e-9)


def double_factorial(n: int) -> int:
    """(n)!! with the convention (-1)!! = 1."""
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


# ---------------------------------------------------------------------------
# configurations


@dataclass(frozen=True)
class Configuration:
    """An N-particle phase-space configuration: positions and velocities."""

    x: np.ndarray  # (N, d)
    v: np.ndarray  # (N, d)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if x.shape != v.shape or x.ndim != 2:
            raise ConfigError(f"position/velocity shape mismatch: {x.shape} vs {v.shape}")
        if x.shape[0] < 1:
            raise ConfigError("a configuration needs at least one particle")
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            raise ConfigError("non-finite phase point in configuration")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def points(self) -> np.ndarray:
        """All phase points as an (N, 2d) array."""
        return np.concatenate([self.x, self.v], axis=1)

    @staticmethod
    def from_points(z: np.ndarray) -> "Configuration":
        z = np.atleast_2d(np.asarray(z, dtype=float))
        d = z.shape[1] // 2
        return Configuration(z[:, :d], z[:, d:])


# ---------------------------------------------------------------------------
# pair potentials


class PairPotential:
    """Spherically symmetric smooth pair interaction with closed-form partials.

    Subclasses provide every partial derivative up to order ``max_order`` as
    analytic evaluators together with a uniform bound for each total order.
    """

    d: int
    max_order: int

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, alpha: tuple, x: np.ndarray) -> np.ndarray:
        """Partial derivative with per-axis orders ``alpha`` (len d)."""
        raise NotImplementedError

    def derivative_bound(self, order: int) -> float:
        """Uniform bound on all partials of the given total order."""
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape, dtype=float)
        for a in range(self.d):
            alpha = tuple(1 if b == a else 0 for b in range(self.d))
            out[..., a] = self.derivative(alpha, x)
        return out

    def hessian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (self.d,), dtype=float)
        for a in range(self.d):
            for b in range(a, self.d):
                alpha = tuple((1 if c == a else 0) + (1 if c == b else 0) for c in range(self.d))
                val = self.derivative(alpha, x)
                out[..., a, b] = val
                out[..., b, a] = val
        return out

    def third_derivative(self, x: np.ndarray) -> np.ndarray:
        """All third partials as an (..., d, d, d) symmetric tensor."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (self.d, self.d), dtype=float)
        for a in range(self.d):
            for b in range(self.d):
                for c in range(self.d):
                    alpha = [0] * self.d
                    alpha[a] += 1
                    alpha[b] += 1
                    alpha[c] += 1
                    out[..., a, b, c] = self.derivative(tuple(alpha), x)
        return out

    @property
    def is_zero(self) -> bool:
        return False


class GaussianPotential(PairPotential):
    """phi(x) = A exp(-|x|^2 / 2 sigma^2); every derivative closed form.

    The partial of per-axis orders (m_1..m_d) factorizes into 1-D Gaussian
    derivatives, each a Hermite polynomial times the Gaussian.
    """

    def __init__(self, amplitude: float = 1.0, sigma: float = 1.0, d: int = 1, max_order: int = 6):
        if sigma <= 0:
            raise ConfigError("sigma must be positive")
        if d not in (1, 2, 3):
            raise ConfigError("dimension must be 1, 2 or 3")
        self.amplitude = float(amplitude)
        self.sigma = float(sigma)
        self.d = d
        self.max_order = int(max_order)
        self._scale = 1.0 / (self.sigma * math.sqrt(2.0))
        self._herm_max = [_hermite_gauss_max(m) for m in range(self.max_order + 1)]
        self._bounds = [self._compute_bound(m) for m in range(self.max_order + 1)]

    def _compute_bound(self, order: int) -> float:
        # max over per-axis splittings of the product of 1-D suprema
        best = 0.0
        for alpha in _compositions(order, self.d):
            val = abs(self.amplitude)
            for m in alpha:
                val *= self._herm_max[m] * self._scale**m
            best = max(best, val)
        return best

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x2 = np.sum(x * x, axis=-1)
        return self.amplitude * np.exp(-x2 / (2.0 * self.sigma**2))

    def derivative(self, alpha: tuple, x: np.ndarray) -> np.ndarray:
        if len(alpha) != self.d:
            raise UnsupportedOrderError(f"multi-index length {len(alpha)} != d={self.d}")
        order = int(sum(alpha))
        if order > self.max_order:
            raise UnsupportedOrderError(
                f"derivative order {order} exceeds the configured maximum {self.max_order}"
            )
        x = np.asarray(x, dtype=float)
        u = x * self._scale
        out = np.full(x.shape[:-1], self.amplitude, dtype=float)
        for a, m in enumerate(alpha):
            ua = u[..., a]
            fac = np.exp(-(ua**2))
            if m > 0:
                fac = fac * hermite_values(m, ua) * ((-self._scale) ** m)
            out = out * fac
        return out

    def derivative_bound(self, order: int) -> float:
        if order > self.max_order:
            raise UnsupportedOrderError(f"no declared bound beyond order {self.max_order}")
        return self._bounds[order]


class ZeroPotential(PairPotential):
    """Free flow: phi identically zero."""

    def __init__(self, d: int = 1, max_order: int = 6):
        self.d = d
        self.max_order = max_order

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1], dtype=float)

    def derivative(self, alpha: tuple, x: np.ndarray) -> np.ndarray:
        if sum(alpha) > self.max_order:
            raise UnsupportedOrderError("order exceeds configured maximum")
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1], dtype=float)

    def derivative_bound(self, order: int) -> float:
        return 0.0

    @property
    def is_zero(self) -> bool:
        return True


def _compositions(total: int, parts: int):
    """All tuples of `parts` nonnegative ints summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def potential_derivative(phi: PairPotential, alpha: tuple, x: np.ndarray):
    """Exact partial derivative of the pair potential; validates the order."""
    if sum(alpha) > phi.max_order:
        raise UnsupportedOrderError(
            f"requested order {sum(alpha)} exceeds potential maximum {phi.max_order}"
        )
    return phi.derivative(tuple(int(a) for a in alpha), x)


def pair_forces(x: np.ndarray, phi: PairPotential) -> np.ndarray:
    """Mean-field force array from raw positions (no validation).

    The self term vanishes because grad phi(0) = 0 for any smooth even
    potential, so the full double sum equals the j != i sum.
    """
    if phi.is_zero:
        return np.zeros_like(x)
    n = x.shape[0]
    from . import _kernels

    fast = _kernels.gaussian_forces(x, phi)
    if fast is not None:
        return fast
    diff = x[:, None, :] - x[None, :, :]
    grad = phi.gradient(diff)
    return -grad.sum(axis=1) / n


def mean_field_forces(config: Configuration, phi: PairPotential) -> np.ndarray:
    """Mean-field force on every particle: -(1/N) sum_j grad phi(x_i - x_j)."""
    return pair_forces(config.x, phi)


def mean_field_force(config: Configuration, phi: PairPotential, i: int) -> np.ndarray:
    """Force on particle i (bounds-checked single-particle view)."""
    if not 0 <= i < config.n:
        raise IndexError(f"particle index {i} out of range for N={config.n}")
    if phi.is_zero or config.n == 1:
        return np.zeros(config.d)
    diff = config.x[i][None, :] - config.x
    grad = phi.gradient(diff)
    return -grad.sum(axis=0) / config.n


# ---------------------------------------------------------------------------
# smooth densities (Gaussian mixtures)


@dataclass(frozen=True)
class GaussianMixture:
    """Probability density on phase space: weighted diagonal Gaussians.

    ``means`` has shape (n_comp, 2d), ``variances`` (n_comp, 2d) per-axis,
    ``weights`` (n_comp,) summing to one.  All partial derivatives are closed
    form (Hermite products), which the expansion operators rely on.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if m.shape != s.shape or m.shape[0] != w.shape[0]:
            raise ConfigError("mixture parameter shapes inconsistent")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights sum to {w.sum()}, expected 1")
        if (s <= 0).any():
            raise ConfigError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", s)

    @property
    def dim(self) -> int:
        """Phase-space dimension 2d."""
        return self.means.shape[1]

    @property
    def d(self) -> int:
        return self.dim // 2

    @staticmethod
    def standard(d: int = 1) -> "GaussianMixture":
        return GaussianMixture(np.array([1.0]), np.zeros((1, 2 * d)), np.ones((1, 2 * d)))

    def value(self, z: np.ndarray) -> np.ndarray:
        return self.derivative((0,) * self.dim, z)

    def derivative(self, alpha: tuple, z: np.ndarray) -> np.ndarray:
        if len(alpha) != self.dim:
            raise UnsupportedOrderError(f"multi-index length {len(alpha)} != {self.dim}")
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1], dtype=float)
        for w, mu, var in zip(self.weights, self.means, self.variances):
            term = np.full(z.shape[:-1], w, dtype=float)
            for a, m in enumerate(alpha):
                s = math.sqrt(var[a])
                scale = 1.0 / (s * math.sqrt(2.0))
                ua = (z[..., a] - mu[a]) * scale
                fac = np.exp(-(ua**2)) / (s * math.sqrt(2.0 * math.pi))
                if m > 0:
                    fac = fac * hermite_values(m, ua) * ((-scale) ** m)
                term = term * fac
            out += term
        return out

    def smoothed(self, eps: float) -> "GaussianMixture":
        """Convolution with the Gaussian kernel of variance eps/2 per axis."""
        return GaussianMixture(self.weights, self.means, self.variances + 0.5 * eps)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def on_grid(self, spec: "GridSpec") -> "GridFunction":
        if self.dim != 2:
            raise ConfigError("grid sampling requires d=1 (phase space R^2)")
        return GridFunction(spec, self.value(spec.zgrid()))


# ---------------------------------------------------------------------------
# grids (d = 1)


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular phase-space grid (d=1), periodic-truncated box.

    Nodes sit at ``x_min + i*dx`` with ``dx = (x_max-x_min)/nx`` (the right
    edge is the periodic image of the left one); quadrature weight per node
    is ``dx*dv``, which equals the trapezoidal rule for decaying tails.
    """

    x_min: float
    x_max: float
    v_min: float
    v_max: float
    nx: int
    nv: int

    def __post_init__(self):
        if self.nx < 8 or self.nv < 8:
            raise ConfigError("node counts must be at least 8")
        if not (self.x_max > self.x_min and self.v_max > self.v_min):
            raise ConfigError("empty grid extents")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.nv

    @property
    def cell(self) -> float:
        return self.dx * self.dv

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.nx)

    @property
    def vs(self) -> np.ndarray:
        return self.v_min + self.dv * np.arange(self.nv)

    def zgrid(self) -> np.ndarray:
        """All nodes as an (nx, nv, 2) array of phase points."""
        xg, vg = np.meshgrid(self.xs, self.vs, indexing="ij")
        return np.stack([xg, vg], axis=-1)

    def refine(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, self.v_min, self.v_max,
                        self.nx * factor, self.nv * factor)


@dataclass
class GridFunction:
    """Real values sampled on a GridSpec."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.spec.nx, self.spec.nv):
            raise ConfigError(
                f"value array {self.values.shape} does not match grid "
                f"({self.spec.nx}, {self.spec.nv})"
            )
        if not np.isfinite(self.values).all():
            raise ConfigError("non-finite grid values")

    def mass(self) -> float:
        return float(self.values.sum() * self.spec.cell)

    def l1(self) -> float:
        return float(np.abs(self.values).sum() * self.spec.cell)

    def density_x(self) -> np.ndarray:
        """Spatial density: integrate out the velocity axis."""
        return self.values.sum(axis=1) * self.spec.dv

    def inner(self, u_values: np.ndarray) -> float:
        """Quadrature of u * f over the box."""
        return float((u_values * self.values).sum() * self.spec.cell)

    def copy(self) -> "GridFunction":
        return GridFunction(self.spec, self.values.copy())


_SNAP_MAGIC = b"HBGR"
_SNAP_VERSION = 1


def save_snapshot(path, grid: GridFunction, t: float) -> None:
    """Flat binary grid snapshot: small header record plus float64 block."""
    s = grid.spec
    header = struct.pack(
        "<4sIII4dd", _SNAP_MAGIC, _SNAP_VERSION, s.nx, s.nv,
        s.x_min, s.x_max, s.v_min, s.v_max, float(t),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_snapshot(path):
    """Read a snapshot back; returns (GridFunction, t)."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIII4dd"))
        magic, version, nx, nv, x0, x1, v0, v1, t = struct.unpack("<4sIII4dd", head)
        if magic != _SNAP_MAGIC or version != _SNAP_VERSION:
            raise ConfigError(f"not a grid snapshot: {path}")
        data = np.frombuffer(fh.read(nx * nv * 8), dtype="<f8").reshape(nx, nv)
    return GridFunction(GridSpec(x0, x1, v0, v1, nx, nv), data.copy()), t


# ---------------------------------------------------------------------------
# test functions (the C_b-infinity weak-testing interface)


class TestFunction:
    """Smooth bounded observable with analytic partials up to order 4."""

    name: str
    dim: int
    max_order: int = 4

    def value(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, alpha: tuple, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bound(self, order: int = 0) -> float:
        """Uniform bound on all partials of the given total order."""
        raise NotImplementedError

    def _check_order(self, alpha):
        if sum(alpha) > self.max_order:
            raise UnsupportedOrderError(
                f"test-function derivatives available to order {self.max_order} only"
            )

    def grad(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.empty(z.shape, dtype=float)
        for a in range(self.dim):
            alpha = tuple(1 if b == a else 0 for b in range(self.dim))
            out[..., a] = self.derivative(alpha, z)
        return out

    def hess(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.empty(z.shape + (self.dim,), dtype=float)
        for a in range(self.dim):
            for b in range(a, self.dim):
                alpha = tuple(
                    (1 if c == a else 0) + (1 if c == b else 0) for c in range(self.dim)
                )
                val = self.derivative(alpha, z)
                out[..., a, b] = val
                out[..., b, a] = val
        return out


class GaussianBump(TestFunction):
    """u(z) = exp(-|z - z0|^2 / 2 s^2)."""

    def __init__(self, center, width: float, name: str | None = None):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.width = float(width)
        self.dim = self.center.shape[0]
        self.name = name or f"bump(c={np.round(self.center, 2).tolist()},s={width})"
        self._scale = 1.0 / (self.width * math.sqrt(2.0))
        self._herm_max = [_hermite_gauss_max(m) for m in range(self.max_order + 1)]

    def value(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        r2 = np.sum((z - self.center) ** 2, axis=-1)
        return np.exp(-r2 / (2.0 * self.width**2))

    def derivative(self, alpha: tuple, z: np.ndarray) -> np.ndarray:
        self._check_order(alpha)
        z = np.asarray(z, dtype=float)
        u = (z - self.center) * self._scale
        out = np.ones(z.shape[:-1], dtype=float)
        for a, m in enumerate(alpha):
            ua = u[..., a]
            fac = np.exp(-(ua**2))
            if m > 0:
                fac = fac * hermite_values(m, ua) * ((-self._scale) ** m)
            out = out * fac
        return out

    def bound(self, order: int = 0) -> float:
        best = 0.0
        for alpha in _compositions(order, self.dim):
            val = 1.0
            for m in alpha:
                val *= self._herm_max[m] * self._scale**m
            best = max(best, val)
        return best * (1.0 + 1e-12)


# derivatives of tanh in terms of t = tanh(s); index = derivative order
_TANH_DERIVS = (
    lambda t: t,
    lambda t: 1.0 - t**2,
    lambda t: -2.0 * t * (1.0 - t**2),
    lambda t: (1.0 - t**2) * (6.0 * t**2 - 2.0),
    lambda t: (1.0 - t**2) * (16.0 * t - 24.0 * t**3),
)


def _tanh_deriv_max(m: int) -> float:
    t = np.linspace(-1.0, 1.0, 400001)
    return float(np.abs(_TANH_DERIVS[m](t)).max()) * (1.0 + 1e-9)


class TanhWindow(TestFunction):
    """Damped coordinate window u(z) = a tanh((z_axis - c)/a).

    Near the origin it is the coordinate function itself to cubic accuracy,
    while staying uniformly bounded by a.
    """

    def __init__(self, dim: int, axis: int, scale: float = 4.0, shift: float = 0.0,
                 name: str | None = None):
        self.dim = dim
        self.axis = int(axis)
        self.scale = float(scale)
        self.shift = float(shift)
        self.name = name or f"window(axis={axis},a={scale},c={shift})"

    def _s(self, z):
        return (np.asarray(z, dtype=float)[..., self.axis] - self.shift) / self.scale

    def value(self, z: np.ndarray) -> np.ndarray:
        return self.scale * np.tanh(self._s(z))

    def derivative(self, alpha: tuple, z: np.ndarray) -> np.ndarray:
        self._check_order(alpha)
        z = np.asarray(z, dtype=float)
        m = alpha[self.axis]
        if sum(alpha) != m:
            return np.zeros(z.shape[:-1], dtype=float)
        t = np.tanh(self._s(z))
        return self.scale ** (1 - m) * _TANH_DERIVS[m](t)

    def bound(self, order: int = 0) -> float:
        return self.scale ** (1 - order) * _tanh_deriv_max(order)


@dataclass
class TestBank:
    """Finite bank of smooth bounded observables."""

    functions: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.functions)

    def __len__(self):
        return len(self.functions)

    def __getitem__(self, i):
        return self.functions[i]

    @property
    def names(self):
        return [u.name for u in self.functions]


_BUMP_PATTERN = [
    ((0.0, 0.0), 1.0),
    ((1.0, 0.0), 1.0),
    ((-1.0, 0.0), 1.0),
    ((0.0, 1.0), 1.0),
    ((0.0, -1.0), 1.0),
    ((1.0, 1.0), 0.8),
    ((-1.0, -1.0), 0.8),
    ((1.5, -0.5), 1.2),
    ((-0.5, 1.5), 1.2),
    ((2.0, 0.0), 1.5),
    ((0.0, 2.0), 1.5),
    ((-1.0, 1.0), 2.0),
]


def default_bank(d: int = 1) -> TestBank:
    """12 Gaussian bumps with varied centers/widths plus 4 tanh windows.

    For d > 1 the planar pattern is embedded in the (x_1, v_1) plane.
    """
    dim = 2 * d
    funcs = []
    for (cx, cv), s in _BUMP_PATTERN:
        center = np.zeros(dim)
        center[0] = cx
        center[d] = cv
        funcs.append(GaussianBump(center, s))
    funcs.append(TanhWindow(dim, axis=0, scale=4.0))
    funcs.append(TanhWindow(dim, axis=d, scale=4.0))
    funcs.append(TanhWindow(dim, axis=0, scale=2.0, shift=1.0))
    funcs.append(TanhWindow(dim, axis=d, scale=2.0, shift=-1.0))
    return TestBank(funcs)
