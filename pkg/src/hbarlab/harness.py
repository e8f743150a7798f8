"""Experiment runner and CLI.

A single declarative JSON config drives every experiment kind.  Runs are
deterministic for fixed (config, seeds, thread count): sampling uses
counter-based Philox streams keyed by the seed, sweeps execute in sorted
order, and result rows are emitted in a canonical order.  Environment
overrides are limited to the output directory (HBARLAB_OUTPUT_DIR) and the
thread count (HBARLAB_THREADS).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, corrections, empirical, metrics, nbody, vlasov, wigner
from .empirical import FlowDerivatives, grad_tested_mean, test_empirical, tested_D2_mu
from .errors import (CapacityError, ConfigError, DivergenceError, HbarlabError,
                     UnsupportedOrderError)
from .phasespace import (Configuration, GaussianMixture, GaussianPotential, GridSpec,
                         PairPotential, TestBank, ZeroPotential, default_bank)

__all__ = [
    "ExperimentConfig",
    "ResultTable",
    "RunRecord",
    "sample_typical",
    "nu_1",
    "flow_derivatives",
    "run_convergence",
    "run_estimates",
    "run_remainder",
    "run_dobrushin",
    "run_vlasov_check",
    "cli_main",
    "cli_main_entry",
    "CONFIG_SCHEMA",
]

KINDS = ("converge", "estimates", "remainder", "dobrushin", "vlasov-check")

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "d": {"type": "integer", "minimum": 1, "maximum": 3},
        "potential": {
            "type": "object",
            "properties": {
                "type": {"enum": ["gaussian", "zero"]},
                "amplitude": {"type": "number"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "max_order": {"type": "integer", "minimum": 1},
            },
        },
        "density": {
            "type": "object",
            "properties": {
                "components": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["weight", "mean", "variance"],
                        "properties": {
                            "weight": {"type": "number", "exclusiveMinimum": 0},
                            "mean": {"type": "array", "items": {"type": "number"}},
                            "variance": {"type": "array",
                                         "items": {"type": "number",
                                                   "exclusiveMinimum": 0}},
                        },
                    },
                }
            },
        },
        "N_list": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "t_final": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "flow_dt": {"type": "number", "exclusiveMinimum": 0},
        "wigner_dt": {"type": "number", "exclusiveMinimum": 0},
        "grid": {
            "type": "object",
            "required": ["x_min", "x_max", "v_min", "v_max", "nx", "nv"],
            "properties": {k: {"type": "number"} for k in
                           ("x_min", "x_max", "v_min", "v_max")}
            | {"nx": {"type": "integer", "minimum": 8},
               "nv": {"type": "integer", "minimum": 8}},
        },
        "K": {"type": "integer", "minimum": 0},
        "k_order": {"type": "integer", "minimum": 0, "maximum": 1},
        "k_cap": {"type": "integer", "minimum": 0},
        "order2_cap": {"type": "integer", "minimum": 1},
        "eps_list": {"type": "array", "items": {"type": "number",
                                                "exclusiveMinimum": 0}},
        "bank": {"type": "object"},
        "times": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "ensemble_size": {"type": "integer", "minimum": 100},
        "clamp": {"type": "number", "exclusiveMinimum": 0},
        "output_dir": {"type": "string"},
        "dump_trajectory": {"type": "boolean"},
        "initial_data": {"enum": ["expanded", "bare"]},
        "bare_eps": {"type": "number", "exclusiveMinimum": 0},
        "estimate_seeds": {"type": "array", "items": {"type": "integer"}},
    },
    "additionalProperties": False,
}

_DEFAULTS = {
    "d": 1,
    "potential": {"type": "gaussian", "amplitude": 1.0, "sigma": 1.0, "max_order": 6},
    "density": {"components": [{"weight": 1.0, "mean": [0.0, 0.0],
                                "variance": [1.0, 1.0]}]},
    "N_list": [128, 256, 512, 1024, 2048],
    "seeds": [0, 1, 2, 3, 4, 5, 6, 7],
    "t_final": 1.0,
    "dt": 1e-3,
    "grid": {"x_min": -10.0, "x_max": 10.0, "v_min": -8.0, "v_max": 8.0,
             "nx": 256, "nv": 256},
    "K": 1,
    "k_order": 0,
    "k_cap": 3,
    "order2_cap": 512,
    "eps_list": [0.1, 0.05, 0.02, 0.01, 0.005],
    "bank": {"kind": "default"},
    "times": [0.0, 0.25, 0.5, 0.75, 1.0],
    "delta": 0.1,
    "ensemble_size": 100_000,
    "clamp": 1.0,
    "output_dir": "hbarlab_out",
    "dump_trajectory": False,
    "initial_data": "expanded",
}


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration plus derived objects."""

    raw: dict

    def __post_init__(self):
        import jsonschema

        merged = dict(_DEFAULTS)
        for key, val in self.raw.items():
            if isinstance(val, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **val}
            else:
                merged[key] = val
        try:
            jsonschema.validate(merged, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config schema violation at "
                              f"{'/'.join(map(str, exc.path)) or '<root>'}: "
                              f"{exc.message}") from exc
        self.data = merged
        self._semantic_checks()

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    # -- builders ------------------------------------------------------------
    def potential(self) -> PairPotential:
        p = self.data["potential"]
        if p["type"] == "zero":
            return ZeroPotential(d=self.data["d"])
        return GaussianPotential(p.get("amplitude", 1.0), p.get("sigma", 1.0),
                                 d=self.data["d"], max_order=p.get("max_order", 6))

    def density(self) -> GaussianMixture:
        comps = self.data["density"]["components"]
        w = np.array([c["weight"] for c in comps])
        return GaussianMixture(w / w.sum(),
                               np.array([c["mean"] for c in comps]),
                               np.array([c["variance"] for c in comps]))

    def grid(self) -> GridSpec:
        gcfg = self.data["grid"]
        return GridSpec(gcfg["x_min"], gcfg["x_max"], gcfg["v_min"], gcfg["v_max"],
                        int(gcfg["nx"]), int(gcfg["nv"]))

    def test_bank(self) -> TestBank:
        return default_bank(self.data["d"])

    def flow_dt(self) -> float:
        return self.data.get("flow_dt", self.data["dt"])

    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- validation ----------------------------------------------------------
    def _semantic_checks(self):
        data = self.data
        kind = data["kind"]
        uses_grid = kind in ("converge", "remainder", "vlasov-check")
        if uses_grid:
            if data["d"] != 1:
                raise ConfigError("grid-based experiments require d=1")
            spec = self.grid()
            g = self.density()
            cell = max(spec.dx, spec.dv)
            min_width = float(np.sqrt(self.density().variances.min()))
            if min_width < 8.0 * cell:
                raise ConfigError(
                    f"narrowest density width {min_width:.3g} spans fewer than 8 "
                    f"cells ({cell:.3g} each); refine the grid")
            self._tail_check(spec, g)
            vmax = max(abs(spec.v_min), abs(spec.v_max))
            if vmax * data["dt"] > 4 * spec.dx:
                raise ConfigError("dt violates the 4-cell displacement budget")
        if kind == "remainder":
            spec = self.grid()
            cell = max(spec.dx, spec.dv)
            eps_min = min(data["eps_list"])
            if math.sqrt(eps_min) < 6.0 * cell:
                raise ConfigError(
                    f"sqrt(min eps)={math.sqrt(eps_min):.4g} spans fewer than 6 "
                    f"cells; refine the grid or drop small eps values")
            if data["K"] > data["k_cap"]:
                raise ConfigError(f"K={data['K']} beyond cap {data['k_cap']}")
        if kind == "converge" and data["k_order"] == 1:
            over = [n for n in data["N_list"] if n > data["order2_cap"]]
            if over:
                raise ConfigError(
                    f"k=1 sweeps need second-order tangents: N={over} exceed the "
                    f"cap {data['order2_cap']}; subsample the sweep")
        if kind == "dobrushin":
            times = data["times"]
            if times[0] != 0.0 or any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
                raise ConfigError("dobrushin times must start at 0 and increase")
        if data["initial_data"] == "bare" and "bare_eps" not in data:
            raise ConfigError("initial_data='bare' requires bare_eps")

    def _tail_check(self, spec: GridSpec, g: GaussianMixture, budget: float = 1e-10):
        from scipy.special import erfc

        tail = 0.0
        for w, mu, var in zip(g.weights, g.means, g.variances):
            sx, sv = math.sqrt(var[0]), math.sqrt(var[1])
            tail += w * 0.5 * (erfc((spec.x_max - mu[0]) / (sx * math.sqrt(2)))
                               + erfc((mu[0] - spec.x_min) / (sx * math.sqrt(2)))
                               + erfc((spec.v_max - mu[1]) / (sv * math.sqrt(2)))
                               + erfc((mu[1] - spec.v_min) / (sv * math.sqrt(2))))
        if tail > budget:
            raise ConfigError(f"initial tail mass {tail:.2e} outside the grid "
                              f"exceeds {budget:.0e}; enlarge the domain")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return ExperimentConfig(raw)


# ---------------------------------------------------------------------------
# result containers


@dataclass
class ResultTable:
    columns: list
    rows: list = field(default_factory=list)

    def append(self, **kw):
        missing = set(self.columns) - set(kw)
        if missing:
            raise ConfigError(f"row missing columns {missing}")
        self.rows.append({c: kw[c] for c in self.columns})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            writer.writeheader()
            writer.writerows(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]


@dataclass
class RunRecord:
    kind: str
    config: dict
    config_hash: str
    version: str
    elapsed_seconds: float
    summary: dict
    outputs: list

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=1, default=float)


# ---------------------------------------------------------------------------
# sampling and tested quantities


def sample_typical(g: GaussianMixture, n: int, seed: int) -> Configuration:
    """First N points of the seed's i.i.d. stream from the mixture.

    Counter-based Philox streams with fixed per-point consumption make the
    draw prefix-stable: the N-point configuration is the beginning of the
    2N-point one, realizing a single typical sequence per seed across the
    whole N sweep.
    """
    ru = np.random.Generator(np.random.Philox(key=[seed, 0]))
    rz = np.random.Generator(np.random.Philox(key=[seed, 1]))
    comp = np.searchsorted(np.cumsum(g.weights), ru.random(n), side="right")
    comp = np.minimum(comp, len(g.weights) - 1)
    eta = rz.standard_normal(n * g.dim).reshape(n, g.dim)
    pts = g.means[comp] + np.sqrt(g.variances[comp]) * eta
    return Configuration.from_points(pts)


def flow_derivatives(config: Configuration, phi: PairPotential, t: float, dt: float,
                     order: int = 2, cap: int = 512) -> FlowDerivatives:
    """Integrate the flow with tangents and package for the chain rule."""
    traj, first, second = nbody.integrate_variational(config, phi, t, dt,
                                                      order=order, cap=cap)
    z = traj.final.config.points()
    return FlowDerivatives(z, first.J, second.K if second is not None else None)


def nu_1(k: int, u, config: Configuration, phi: PairPotential, t: float,
         dt: float = 1e-3, cap: int = 512) -> float:
    """One-particle tested quantity of expansion order k along the flow.

    k=0 tests the empirical measure itself; k=1 applies the second-order
    Gaussian derivation through the flow map.  Higher k needs flow
    derivatives of order 2k, outside the particle-side scope.
    """
    if k == 0:
        final = nbody.integrate_flow(config, phi, t, dt).final.config
        return test_empirical(u, final)
    if k == 1:
        fd = flow_derivatives(config, phi, t, dt, order=2, cap=cap)
        return tested_D2_mu(u, fd)
    raise UnsupportedOrderError(
        "particle-side tested quantities are implemented for k <= 1 "
        "(higher orders need flow derivatives beyond second order)")


# ---------------------------------------------------------------------------
# experiment: convergence (Theorem-style N sweep)


def _reference_stack(cfg: ExperimentConfig, k_max: int) -> corrections.CorrectionStack:
    phi = cfg.potential()
    spec = cfg.grid()
    g = cfg.density()
    t = cfg["t_final"]
    if cfg["initial_data"] == "bare":
        initial = [wigner.coherent_wigner_init(g, cfg["bare_eps"], spec)]
        initial += [corrections.GridFunction(spec, np.zeros((spec.nx, spec.nv)))
                    for _ in range(k_max)]
        return corrections.solve_stack(phi, spec, k_max, t, cfg["dt"],
                                       initial=initial, store_times=[0.0, t],
                                       k_cap=cfg["k_cap"])
    return corrections.solve_stack(phi, spec, k_max, t, cfg["dt"], g=g,
                                   store_times=[0.0, t], k_cap=cfg["k_cap"])


def run_convergence(cfg: ExperimentConfig):
    """N sweep of the tested quantities against the grid references."""
    phi = cfg.potential()
    g = cfg.density()
    bank = cfg.test_bank()
    t = cfg["t_final"]
    k_order = cfg["k_order"]
    names = bank.names

    stack = _reference_stack(cfg, k_order)
    zg = stack.spec.zgrid()
    refs = [{u.name: stack.at(k, t).inner(u.value(zg)) for u in bank}
            for k in range(k_order + 1)]

    cols = ["N", "seed", "u", "nu0", "ref0", "err0"]
    if k_order == 1:
        cols += ["nu1", "ref1", "err1"]
    values = ResultTable(cols)
    pairs = ResultTable(["N", "seed", "pair_residual_max", "prefactor_j2"])

    per_n_values = {k: {} for k in range(k_order + 1)}
    dumped = False
    for n in sorted(cfg["N_list"]):
        acc = {k: {name: [] for name in names} for k in range(k_order + 1)}
        for seed in cfg["seeds"]:
            config = sample_typical(g, n, seed)
            if cfg["dump_trajectory"] and not dumped:
                out_dir = os.environ.get("HBARLAB_OUTPUT_DIR", cfg["output_dir"])
                os.makedirs(out_dir, exist_ok=True)
                traj = nbody.integrate_flow(config, phi, t, cfg.flow_dt(),
                                            store_every=max(1, int(0.1 / cfg.flow_dt())))
                traj.to_csv(os.path.join(out_dir, f"trajectory_N{n}_seed{seed}.csv"))
                dumped = True
            if k_order == 0:
                final = nbody.integrate_flow(config, phi, t, cfg.flow_dt()).final.config
                nu0 = {u.name: test_empirical(u, final) for u in bank}
                for u in bank:
                    values.append(N=n, seed=seed, u=u.name, nu0=nu0[u.name],
                                  ref0=refs[0][u.name],
                                  err0=abs(nu0[u.name] - refs[0][u.name]))
                    acc[0][u.name].append(nu0[u.name])
                pairs.append(N=n, seed=seed,
                             pair_residual_max=0.0, prefactor_j2=(n - 1) / n)
            else:
                fd = flow_derivatives(config, phi, t, cfg.flow_dt(),
                                      order=2, cap=cfg["order2_cap"])
                nu0, nu1, grads = {}, {}, {}
                for u in bank:
                    nu0[u.name] = float(np.mean(u.value(fd.z)))
                    nu1[u.name] = tested_D2_mu(u, fd)
                    grads[u.name] = grad_tested_mean(u, fd)
                    values.append(N=n, seed=seed, u=u.name, nu0=nu0[u.name],
                                  ref0=refs[0][u.name],
                                  err0=abs(nu0[u.name] - refs[0][u.name]),
                                  nu1=nu1[u.name], ref1=refs[1][u.name],
                                  err1=abs(nu1[u.name] - refs[1][u.name]))
                    acc[0][u.name].append(nu0[u.name])
                    acc[1][u.name].append(nu1[u.name])
                # two-particle product-structure residual: the cross term of
                # the Leibniz expansion, maximized over bank pairs
                gmat = np.stack([grads[name].ravel() for name in names])
                cross = 0.5 * gmat @ gmat.T
                pairs.append(N=n, seed=seed,
                             pair_residual_max=float(np.abs(cross).max()),
                             prefactor_j2=(n - 1) / n)
        for k in range(k_order + 1):
            per_n_values[k][n] = {name: float(np.mean(acc[k][name])) for name in names}

    summary = {"refs": refs, "per_N_error": {}, "per_N_mean_distance": {}}
    ns_sorted = sorted(cfg["N_list"])
    per_n_table = ResultTable(
        ["N"] + [c for k in range(k_order + 1)
                 for c in (f"err{k}", f"mean_distance{k}")] + ["pair_residual_mean"])
    per_n_cols = {n: {} for n in ns_sorted}
    for k in range(k_order + 1):
        errs = {}
        for n, means in per_n_values[k].items():
            errs[n] = max(abs(means[name] - refs[k][name]) for name in names)
        ns = sorted(errs)
        summary["per_N_error"][f"k{k}"] = {str(n): errs[n] for n in ns}
        summary[f"k{k}_monotone"] = all(errs[a] > errs[b] for a, b in zip(ns, ns[1:]))
        summary[f"k{k}_final_over_initial"] = errs[ns[-1]] / errs[ns[0]]
        # single-typical-configuration view: per-seed testbank distance, averaged
        err_col = f"err{k}"
        dist = {}
        for n in ns:
            per_seed = []
            for seed in cfg["seeds"]:
                rows = [r[err_col] for r in values.rows
                        if r["N"] == n and r["seed"] == seed]
                per_seed.append(max(rows))
            dist[str(n)] = float(np.mean(per_seed))
            per_n_cols[n][f"err{k}"] = errs[n]
            per_n_cols[n][f"mean_distance{k}"] = dist[str(n)]
        summary["per_N_mean_distance"][f"k{k}"] = dist
    res = {}
    for n in ns_sorted:
        vals = [r["pair_residual_max"] for r in pairs.rows if r["N"] == n]
        res[str(n)] = float(np.mean(vals))
        per_n_table.append(N=n, pair_residual_mean=res[str(n)], **per_n_cols[n])
    if k_order == 1:
        summary["pair_residual_per_N"] = res
    return values, pairs, per_n_table, summary


# ---------------------------------------------------------------------------
# experiment: derivative-decay estimates


def _d2_tested_mean(u, fd: FlowDerivatives) -> np.ndarray:
    """Same-index second derivatives of the tested mean, shape (N, 2d, 2d)."""
    hess = u.hess(fd.z)
    grad = u.grad(fd.z)
    out = np.einsum("lgd,ljga,ljdb->jab", hess, fd.J, fd.J, optimize=True)
    out += np.einsum("lg,ljgab->jab", grad, fd.K, optimize=True)
    return out / fd.n


def run_estimates(cfg: ExperimentConfig):
    phi = cfg.potential()
    g = cfg.density()
    bank = cfg.test_bank()
    t = cfg["t_final"]
    seeds = cfg.get("estimate_seeds", cfg["seeds"][:2])
    table = ResultTable(["N", "seed", "J_offdiag_scaled", "J_diag", "K_offdiag_scaled",
                         "K_diag", "D2_tested_max", "gradU_scaled", "d2U_scaled"])
    for n in sorted(cfg["N_list"]):
        for seed in seeds:
            config = sample_typical(g, n, seed)
            traj, first, second = nbody.integrate_variational(
                config, phi, t, cfg.flow_dt(), order=2, cap=cfg["order2_cap"])
            fd = FlowDerivatives(traj.final.config.points(), first.J, second.K)
            d2max = max(abs(tested_D2_mu(u, fd)) for u in bank)
            gmax = max(float(np.abs(grad_tested_mean(u, fd)).max()) for u in bank)
            d2u = max(float(np.abs(_d2_tested_mean(u, fd)).max()) for u in bank)
            table.append(N=n, seed=seed,
                         J_offdiag_scaled=n * first.max_offdiagonal(),
                         J_diag=first.max_diagonal(),
                         K_offdiag_scaled=n * second.max_offdiagonal(),
                         K_diag=second.max_diagonal(),
                         D2_tested_max=d2max,
                         gradU_scaled=n * gmax,
                         d2U_scaled=n * d2u)
    summary = {}
    for col in ("J_offdiag_scaled", "K_offdiag_scaled", "J_diag", "K_diag",
                "D2_tested_max", "gradU_scaled", "d2U_scaled"):
        per_n = {}
        for n in sorted(cfg["N_list"]):
            vals = [r[col] for r in table.rows if r["N"] == n]
            per_n[str(n)] = float(np.mean(vals))
        vals = list(per_n.values())
        summary[col] = {"per_N": per_n, "ratio": max(vals) / min(vals)}
    return table, summary


# ---------------------------------------------------------------------------
# experiment: remainder scaling


def run_remainder(cfg: ExperimentConfig):
    phi = cfg.potential()
    g = cfg.density()
    t = cfg["t_final"]
    K = cfg["K"]
    stack = _reference_stack(cfg, K)
    result = wigner.remainder_scaling(
        g, phi, t, K, cfg["eps_list"], stack, cfg.get("wigner_dt", cfg["dt"]))
    table = ResultTable(["eps"] + [f"R{k}" for k in range(K + 1)])
    for row in result.rows():
        table.append(**{"eps": row[0], **{f"R{k}": row[k + 1] for k in range(K + 1)}})
    summary = {"slopes": {f"K{k}": float(result.slopes[k]) for k in range(K + 1)},
               "stack_mass_drift": [float(x) for x in stack.mass_drift]}
    return table, summary, result


# ---------------------------------------------------------------------------
# experiment: stability fit


def run_dobrushin(cfg: ExperimentConfig):
    phi = cfg.potential()
    g = cfg.density()
    t_list = cfg["times"]
    dt = cfg.flow_dt()
    delta = cfg["delta"]
    table = ResultTable(["N", "seed", "t", "W"])
    rates = {}
    for n in sorted(cfg["N_list"]):
        pair_trajs = []
        for seed in cfg["seeds"]:
            base = sample_typical(g, n, seed)
            pert = Configuration(base.x.copy(), base.v + delta)
            clouds = []
            for tt in t_list:
                a = nbody.integrate_flow(base, phi, tt, dt).final.config
                b = nbody.integrate_flow(pert, phi, tt, dt).final.config
                clouds.append((metrics.PointCloud.from_configuration(a),
                               metrics.PointCloud.from_configuration(b)))
            pair_trajs.append(clouds)
            for tt, (ca, cb) in zip(t_list, clouds):
                w = (metrics.wasserstein_bounded(ca, cb, clamp=cfg["clamp"])
                     if n <= metrics.EXACT_CAP else
                     metrics.sliced_wasserstein(ca, cb, clamp=cfg["clamp"]))
                table.append(N=n, seed=seed, t=tt, W=w)
        fit = metrics.dobrushin_fit(pair_trajs, t_list, clamp=cfg["clamp"])
        rates[str(n)] = fit.rate
    ns = sorted(int(k) for k in rates)
    doubling = {f"{a}->{b}": rates[str(b)] / rates[str(a)]
                for a, b in zip(ns, ns[1:]) if b == 2 * a and rates[str(a)] != 0}
    summary = {"rate_per_N": rates, "doubling_ratio": doubling}
    return table, summary


# ---------------------------------------------------------------------------
# experiment: grid solver vs particle ensemble


def particle_flow(points: np.ndarray, phi: PairPotential, spec: GridSpec,
                  t_final: float, dt: float) -> np.ndarray:
    """Self-consistent particle ensemble: leapfrog with a deposited density.

    Cloud-in-cell deposit onto the x-grid, trapezoidal convolution for the
    force, linear interpolation back to the particles.  Independent of the
    grid solver's interpolation machinery.
    """
    x = points[:, 0].copy()
    v = points[:, 1].copy()
    m = x.size
    nx, dx, x_min = spec.nx, spec.dx, spec.x_min

    def force_at(pos):
        rel = (pos - x_min) / dx
        idx = np.floor(rel).astype(np.int64)
        frac = rel - idx
        rho = np.zeros(nx)
        np.add.at(rho, idx % nx, (1.0 - frac))
        np.add.at(rho, (idx + 1) % nx, frac)
        rho /= m * dx
        force = -vlasov.convolve_x(spec, phi, 1, rho)
        fpad = np.concatenate([force, force[:1]])
        return (1.0 - frac) * fpad[idx % nx] + frac * fpad[(idx % nx) + 1]

    n_steps = int(round(t_final / dt))
    f = force_at(x)
    for _ in range(n_steps):
        v += 0.5 * dt * f
        x += dt * v
        f = force_at(x)
        v += 0.5 * dt * f
    return np.stack([x, v], axis=1)


def run_vlasov_check(cfg: ExperimentConfig):
    phi = cfg.potential()
    g = cfg.density()
    bank = cfg.test_bank()
    spec = cfg.grid()
    t = cfg["t_final"]
    traj = vlasov.solve_vlasov(g.on_grid(spec), phi, t, cfg["dt"])
    f_final = traj.final.f
    zg = spec.zgrid()

    rng = np.random.Generator(np.random.Philox(key=cfg["seeds"][0]))
    pts0 = g.sample(cfg["ensemble_size"], rng)
    pts = particle_flow(pts0, phi, spec, t, cfg.flow_dt())

    table = ResultTable(["u", "ensemble", "grid", "diff", "mc_se", "within_4se"])
    all_ok = True
    for u in bank:
        uvals = u.value(pts)
        emp = float(uvals.mean())
        se = float(uvals.std(ddof=1) / math.sqrt(uvals.size))
        gval = f_final.inner(u.value(zg))
        ok = abs(emp - gval) <= 4.0 * se
        all_ok = all_ok and ok
        table.append(u=u.name, ensemble=emp, grid=gval, diff=abs(emp - gval),
                     mc_se=se, within_4se=ok)
    summary = {"all_within_4se": all_ok,
               "mass_drift": float(traj.max_mass_drift),
               "min_value": float(traj.min_value)}
    return table, summary


# ---------------------------------------------------------------------------
# CLI


def _emit(cfg: ExperimentConfig, out_dir: str, tables: dict, summary: dict,
          elapsed: float) -> RunRecord:
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for name, table in tables.items():
        path = os.path.join(out_dir, f"{cfg['kind']}_{name}.csv")
        table.write_csv(path)
        outputs.append(path)
    record = RunRecord(cfg["kind"], cfg.data, cfg.hash(), __version__,
                       elapsed, summary, outputs)
    rec_path = os.path.join(out_dir, f"{cfg['kind']}_run.json")
    record.write_json(rec_path)
    outputs.append(rec_path)
    return record


def _diag(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def cli_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hbarlab",
        description="mean-field semiclassical expansion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS + ("validate-config",):
        p = sub.add_parser(kind)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--output-dir", default=None)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    threads = os.environ.get("HBARLAB_THREADS")
    if threads:
        try:
            import numba

            numba.set_num_threads(max(1, int(threads)))
        except Exception:
            pass

    try:
        cfg = load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        _diag("config", f"cannot read config: {exc}")
        return 2
    except ConfigError as exc:
        _diag("config", str(exc))
        return 2

    if args.command != "validate-config" and cfg["kind"] != args.command:
        _diag("config", f"config kind {cfg['kind']!r} does not match "
                        f"subcommand {args.command!r}")
        return 2

    out_dir = (args.output_dir or os.environ.get("HBARLAB_OUTPUT_DIR")
               or cfg["output_dir"])

    if args.command == "validate-config":
        print(json.dumps({"valid": True, "hash": cfg.hash(),
                          "resolved": cfg.data}, indent=1))
        return 0

    start = time.time()
    try:
        if cfg["kind"] == "converge":
            values, pairs, per_n, summary = run_convergence(cfg)
            record = _emit(cfg, out_dir,
                           {"values": values, "pairs": pairs, "per_N": per_n},
                           summary, time.time() - start)
        elif cfg["kind"] == "estimates":
            table, summary = run_estimates(cfg)
            record = _emit(cfg, out_dir, {"table": table}, summary,
                           time.time() - start)
        elif cfg["kind"] == "remainder":
            table, summary, _ = run_remainder(cfg)
            record = _emit(cfg, out_dir, {"table": table}, summary,
                           time.time() - start)
        elif cfg["kind"] == "dobrushin":
            table, summary = run_dobrushin(cfg)
            record = _emit(cfg, out_dir, {"table": table}, summary,
                           time.time() - start)
        else:
            table, summary = run_vlasov_check(cfg)
            record = _emit(cfg, out_dir, {"table": table}, summary,
                           time.time() - start)
    except DivergenceError as exc:
        _diag("divergence", str(exc))
        return 3
    except (ConfigError, CapacityError) as exc:
        _diag("config", str(exc))
        return 2
    except HbarlabError as exc:
        _diag("runtime", str(exc))
        return 3

    print(json.dumps({"kind": cfg["kind"], "hash": record.config_hash,
                      "elapsed_seconds": round(record.elapsed_seconds, 3),
                      "summary": record.summary}, indent=1, default=float))
    return 0


def cli_main_entry():
    sys.exit(cli_main())


if __name__ == "__main__":
    cli_main_entry()
