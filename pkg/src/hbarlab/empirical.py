"""Empirical measures, Gaussian derivation operators and tested observables.

The coherent-state expansion turns initial-data derivatives into operators
whose coefficients are normalized Gaussian moments; on the particle side the
same operators act through the chain rule on the flow map, which is where the
variational tensors from :mod:`hbarlab.nbody` enter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, UnsupportedOrderError
from .phasespace import Configuration, TestFunction, double_factorial

__all__ = [
    "EmpiricalMeasure",
    "GaussianDerivation",
    "gaussian_coefficients",
    "apply_DG_to_test",
    "test_empirical",
    "FlowDerivatives",
    "tested_D2_mu",
    "tested_D2_mu_pair",
    "grad_tested_mean",
    "tested_product",
]


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform point masses 1/N on a configuration; total mass exactly one."""

    config: Configuration

    @property
    def weight(self) -> float:
        return 1.0 / self.config.n

    def points(self) -> np.ndarray:
        return self.config.points()

    def weights(self) -> np.ndarray:
        return np.full(self.config.n, self.weight)


def test_empirical(u: TestFunction, config: Configuration) -> float:
    """(1/N) sum_l u(z_l)."""
    return float(np.mean(u.value(config.points())))


def _normalized_moment(m: int) -> float:
    """Normalized even Gaussian moment: (2q-1)!!/2^q for m = 2q."""
    q = m // 2
    return double_factorial(2 * q - 1) / 2.0**q


@dataclass(frozen=True)
class GaussianDerivation:
    """Order-k Gaussian derivation operator.

    ``table`` maps per-component multiplicity tuples (length 2d, all even,
    summing to k) to the per-sequence coefficient; sequences with an
    odd-multiplicity index are absent, i.e. exactly zero by construction.
    ``weight`` aggregates permutations into the multi-index coefficient used
    when applying the operator.
    """

    order: int
    dim: int
    table: dict

    def coefficient(self, sequence: tuple) -> float:
        """Per-sequence coefficient C(alpha_1..alpha_k)."""
        if len(sequence) != self.order:
            raise UnsupportedOrderError("sequence length must equal the order")
        mult = [0] * self.dim
        for a in sequence:
            mult[a] += 1
        return self.table.get(tuple(mult), 0.0)

    def weight(self, mult: tuple) -> float:
        """Aggregated coefficient of the partial derivative d^mult."""
        c = self.table.get(tuple(mult), 0.0)
        if c == 0.0:
            return 0.0
        perms = math.factorial(self.order)
        for m in mult:
            perms //= math.factorial(m)
        return perms * c

    def items(self):
        """(multiplicity tuple, aggregated weight) pairs."""
        for mult in self.table:
            yield mult, self.weight(mult)


def gaussian_coefficients(k: int, d: int) -> GaussianDerivation:
    """Coefficient table of the order-k Gaussian derivation operator.

    Closed form from factorized normalized moments; the normalization makes
    the order-0 operator the identity with coefficient exactly 1.
    """
    dim = 2 * d
    table: dict = {}
    if k == 0:
        table[(0,) * dim] = 1.0
        return GaussianDerivation(0, dim, table)
    if k % 2 == 1:
        return GaussianDerivation(k, dim, table)  # all sequences vanish
    inv_kfact = 1.0 / math.factorial(k)
    for mult in _even_multiplicities(k, dim):
        coeff = inv_kfact
        for m in mult:
            if m:
                coeff *= _normalized_moment(m)
        table[mult] = coeff
    return GaussianDerivation(k, dim, table)


def _even_multiplicities(total: int, parts: int):
    """Tuples of `parts` even nonnegative ints summing to even `total`."""
    if parts == 1:
        yield (total,)
        return
    for first in range(0, total + 1, 2):
        for rest in _even_multiplicities(total - first, parts - 1):
            yield (first,) + rest


class _DerivedTestFunction(TestFunction):
    """Result of applying a Gaussian derivation to a test function."""

    def __init__(self, base: TestFunction, derivation: GaussianDerivation):
        self.base = base
        self.derivation = derivation
        self.dim = base.dim
        self.name = f"DG{derivation.order}[{base.name}]"
        self.max_order = 0

    def value(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1], dtype=float)
        for mult, w in self.derivation.items():
            out += w * self.base.derivative(mult, z)
        return out

    def derivative(self, alpha, z):
        if sum(alpha) == 0:
            return self.value(z)
        raise UnsupportedOrderError("derived test functions expose values only")

    def bound(self, order: int = 0) -> float:
        if order > 0:
            raise UnsupportedOrderError("derived test functions expose values only")
        k = self.derivation.order
        return sum(abs(w) for _, w in self.derivation.items()) * self.base.bound(k)


def apply_DG_to_test(u: TestFunction, k: int) -> TestFunction:
    """The function z -> (D_G^{2k} u)(z); needs u-derivatives to order 2k."""
    if 2 * k > u.max_order:
        raise UnsupportedOrderError(
            f"order-{2 * k} derivatives of {u.name} unavailable (max {u.max_order})"
        )
    if k == 0:
        return u
    return _DerivedTestFunction(u, gaussian_coefficients(2 * k, u.dim // 2))


# ---------------------------------------------------------------------------
# tested quantities along the flow


@dataclass
class FlowDerivatives:
    """Evolved points plus flow-derivative tensors for the chain rule.

    ``z`` is the evolved configuration as (N, 2d); ``J`` the first tangent
    (N, N, 2d, 2d); ``K`` the same-index second tangent (N, N, 2d, 2d, 2d)
    when second-order data was integrated.
    """

    z: np.ndarray
    J: np.ndarray
    K: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @cached_property
    def quad_contraction(self) -> np.ndarray:
        """A[l, g, d] = sum_{j, a} J[l,j,g,a] J[l,j,d,a]."""
        return np.einsum("ljga,ljda->lgd", self.J, self.J, optimize=True)

    @cached_property
    def curv_contraction(self) -> np.ndarray:
        """B[l, g] = sum_{j, a} K[l,j,g,a,a]."""
        if self.K is None:
            raise ConfigError("second-order variational data missing")
        return np.einsum("ljgaa->lg", self.K)


def tested_D2_mu(u: TestFunction, fd: FlowDerivatives) -> float:
    """The first-correction tested quantity along the particle flow.

    Differentiating (1/N) sum_l u(z_l(t)) twice in each particle's initial
    data and contracting with the order-2 Gaussian coefficients (identity/4)
    gives
        (1/4N) sum_l [ tr(Hess u(z_l) A_l) + grad u(z_l) . B_l ].
    At t=0 this collapses to the empirical average of the quarter-Laplacian.
    """
    if fd.K is None:
        raise ConfigError("tested_D2_mu needs order-2 variational data")
    hess = u.hess(fd.z)
    grad = u.grad(fd.z)
    term1 = float(np.einsum("lgd,lgd->", hess, fd.quad_contraction, optimize=True))
    term2 = float(np.einsum("lg,lg->", grad, fd.curv_contraction))
    return (term1 + term2) / (4.0 * fd.n)


def grad_tested_mean(u: TestFunction, fd: FlowDerivatives) -> np.ndarray:
    """d/dz_j^alpha of (1/N) sum_l u(z_l(t)), shape (N, 2d)."""
    grad = u.grad(fd.z)
    return np.einsum("lg,ljga->ja", grad, fd.J, optimize=True) / fd.n


def tested_D2_mu_pair(u1: TestFunction, u2: TestFunction, fd: FlowDerivatives):
    """Two-particle first-correction tested value and its Leibniz parts.

    Expanding the second derivatives of the product of two tested means gives
    the one-particle product terms plus a cross term built from first
    derivatives only; the cross term is the finite-N residual of the product
    structure.  Returns (value, product_part, cross_term).
    """
    z = fd.z
    mean1 = float(np.mean(u1.value(z)))
    mean2 = float(np.mean(u2.value(z)))
    d2_1 = tested_D2_mu(u1, fd)
    d2_2 = tested_D2_mu(u2, fd)
    g1 = grad_tested_mean(u1, fd)
    g2 = grad_tested_mean(u2, fd)
    cross = 0.5 * float(np.sum(g1 * g2))
    product = d2_1 * mean2 + mean1 * d2_2
    return product + cross, product, cross


def tested_product(factor_values, j: int, k: int) -> float:
    """Sum over compositions (s_1..s_j) of k of products of one-particle values.

    ``factor_values[m][s]`` is the order-s tested value of factor m; a missing
    order raises, matching the implemented k <= 1 particle-side range.
    """
    factor_values = [np.asarray(row, dtype=float) for row in factor_values]
    if len(factor_values) != j:
        raise ConfigError(f"expected {j} factor rows, got {len(factor_values)}")
    for row in factor_values:
        if row.shape[0] < k + 1:
            raise UnsupportedOrderError(
                f"factor orders up to {row.shape[0] - 1} available, need {k}"
            )
    total = 0.0
    for comp in itertools.product(range(k + 1), repeat=j):
        if sum(comp) != k:
            continue
        prod = 1.0
        for m, s in enumerate(comp):
            prod *= float(factor_values[m][s])
        total += prod
    return total
