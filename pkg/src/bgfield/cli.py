"""Experiment runner: config parsing, commands and report emission.

Every command reads a JSON config, applies the documented defaults, runs
its module calls and writes deterministic JSON reports (sorted keys, config
hash and toolkit version embedded) plus CSV tables and fields.

Exit codes: 0 success, 2 config error, 3 check failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import __version__
from .background import (QuarticKernel, action_gradient, action_value, background_residual,
                         conjugation_gap, derivative_field, solve_background, third_order_part)
from .bounds import bounds_report, fit_exponent
from .critical import CriticalSetup, critical_conjugation_gap, critical_field, next_ops, verify_resolvent_identity
from .field import (Field, diff_adjoint, forward_diff, inner_product, product_rule_rhs, to_csv,
                    triple_rule_rhs)
from .fixedpoint import ConvergenceError, HypothesisError, linear_part
from .lattice import ConfigError, LatticeParams, make_lattice, pullback_dilation, scale_field
from .operator import KernelOperator, SingularOperatorError, a_n, model_operators, ModelOperators
from .variation import FluctuationSetup, delta_phi, delta_phi_hat, delta_phi_mu_V

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


class CheckFailure(RuntimeError):
    """A numerical check of a command did not pass."""


DEFAULTS = {
    "lattice": {"L": 3, "L_tp": 81, "L_sp": 9, "n_steps": 2, "spatial_dims": 3, "metric": "euclidean",
                "step": 1},
    "model": {"a": 1.0, "p": 1, "h0": 0.0, "mu": 0.01, "r_v": 0.01, "kernel_file": None, "fq_file": None},
    "norm": {"m": 0.5, "m_bar": 1.0, "wf": 1.0, "wf_prime": 1.0, "wf_fl": 1.0},
    "solver": {"tol": 1e-12, "max_iter": 200, "d_max": 5, "contraction": 0.5},
    "fields": {"kind": "random", "value": 0.5, "value_s": None, "scale": 0.5, "real": False},
    "sweeps": {"amplitudes": [0.05, 0.1, 0.2], "perturbations": [1e-2, 5e-3, 2.5e-3], "dmu": [1e-2, 5e-3, 2.5e-3],
               "dV_frac": 0.1, "samples": 2, "bounds_rvs": [1e-3, 2e-3, 4e-3], "bounds_wfs": [1.0, 1.5, 2.0],
               "bounds_mu": 0.01},
    "seed": 0,
    "out": None,
}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _merge(defaults: dict, given: dict, text: str, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        where = f"{path}{k}"
        if k not in defaults:
            line = _line_of(text, k)
            raise ConfigError(f"unknown config key {where!r}" + (f" (line {line})" if line else ""))
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                line = _line_of(text, k)
                raise ConfigError(f"config key {where!r} must be an object" + (f" (line {line})" if line else ""))
            out[k] = _merge(defaults[k], v, text, where + ".")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration.

    ``raw`` is the config exactly as given; ``values`` has every default applied.
    """

    raw: dict
    values: dict
    source: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_text(cls, text: str, source: str | None = None, base_dir=None) -> "ExperimentConfig":
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(raw, _merge(DEFAULTS, raw, text), source, Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text, str(path), path.parent)

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls.from_text("{}")

    def __getitem__(self, k):
        return self.values[k]

    def validate(self):
        v = self.values
        self.params  # constructs and checks the lattice
        n = v["lattice"]["step"]
        if not isinstance(n, int) or not 0 <= n <= v["lattice"]["n_steps"]:
            raise ConfigError(f"lattice.step must be an integer in [0, n_steps], got {n!r}")
        if v["fields"]["kind"] not in ("constant", "random"):
            raise ConfigError("fields.kind must be 'constant' or 'random'")
        s = v["solver"]
        if not s["tol"] > 0 or not 0 < s["contraction"] < 1:
            raise ConfigError("solver.tol must be positive and solver.contraction in (0, 1)")
        nm = v["norm"]
        if not nm["m"] > 0 or not nm["m_bar"] > nm["m"]:
            raise ConfigError("norm.m must be positive and norm.m_bar > norm.m")
        if not v["model"]["a"] > 0:
            raise ConfigError("model.a must be positive")

    @property
    def params(self) -> LatticeParams:
        lp = {k: w for k, w in self.values["lattice"].items() if k != "step"}
        try:
            return LatticeParams(**lp)
        except TypeError as e:
            raise ConfigError(f"lattice parameters: {e}") from None

    @property
    def n(self) -> int:
        return self.values["lattice"]["step"]

    @property
    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical.encode()).hexdigest()

    def _path(self, name):
        p = Path(name)
        return p if p.is_absolute() else self.base_dir / p

    def kernel(self) -> QuarticKernel:
        m = self.values["model"]
        if m["kernel_file"]:
            try:
                return QuarticKernel.from_dict(json.loads(self._path(m["kernel_file"]).read_text()))
            except (OSError, ValueError, KeyError) as e:
                raise ConfigError(f"cannot read kernel file {m['kernel_file']}: {e}") from None
        return QuarticKernel.on_site(float(m["r_v"]))

    def fq_kernel(self) -> KernelOperator | None:
        m = self.values["model"]
        if not m["fq_file"]:
            return None
        unit = make_lattice(self.params, 0, self.n)
        try:
            return KernelOperator.from_csv(unit, unit, self._path(m["fq_file"]))
        except (OSError, ValueError, IndexError) as e:
            raise ConfigError(f"cannot read fQ kernel {m['fq_file']}: {e}") from None

    def operators(self, fq: KernelOperator | None = None) -> ModelOperators:
        m = self.values["model"]
        if fq is None and not m["fq_file"]:
            return model_operators(self.params, self.n, float(m["a"]), int(m["p"]), float(m["h0"]))
        return ModelOperators(self.params, self.n, float(m["a"]), int(m["p"]), float(m["h0"]),
                              fq=fq if fq is not None else self.fq_kernel())

    def input_fields(self, lattice, seed_offset: int = 0):
        f = self.values["fields"]
        if f["kind"] == "constant":
            c = complex(f["value"])
            cs = complex(f["value_s"]) if f["value_s"] is not None else c.conjugate()
            return Field.constant(lattice, cs), Field.constant(lattice, c)
        seed = int(self.values["seed"]) + seed_offset
        real = bool(f["real"])
        psi = Field.random(lattice, seed, 0, real=real, scale=float(f["scale"]))
        psi_s = psi.conj() if real else Field.random(lattice, seed, 1, scale=float(f["scale"]))
        return psi_s, psi


# report writing

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (complex, np.complexfloating)):
        return [float(np.real(x)), float(np.imag(x))]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


class Reporter:
    """Writes the files of one command run into ``out``."""

    def __init__(self, cfg: ExperimentConfig, out: Path, command: str):
        self.cfg, self.out, self.command = cfg, Path(out), command
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []

    def header(self) -> dict:
        return {"command": self.command, "version": __version__, "config_hash": self.cfg.hash,
                "config": self.cfg.raw, "resolved_config": self.cfg.values}

    def json(self, name: str, body: dict) -> Path:
        doc = dict(self.header())
        doc.update(body)
        p = self.out / name
        p.write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n")
        self.files.append(p.name)
        return p

    def csv(self, name: str, header, rows) -> Path:
        p = self.out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# config_hash", self.cfg.hash, "version", __version__])
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        self.files.append(p.name)
        return p

    def field(self, name: str, f: Field) -> Path:
        p = self.out / name
        to_csv(f, p)
        self.files.append(p.name)
        return p


def _check(name, value, threshold, op="<"):
    ok = bool(value < threshold) if op == "<" else bool(threshold[0] <= value <= threshold[1])
    return {"name": name, "value": float(value), "threshold": threshold, "ok": ok}


# commands

def _solve(cfg: ExperimentConfig, ops, psi_s, psi, mu=None, V=None):
    s = cfg["solver"]
    return solve_background(psi_s, psi, cfg["model"]["mu"] if mu is None else mu, V or cfg.kernel(), ops,
                            tol=s["tol"], contraction=s["contraction"], m=cfg["norm"]["m"], wf=cfg["norm"]["wf"])


def constant_oracle(an: float, mu: float, r_v: float, psi: float) -> float:
    """Real root of (a_n - mu) x + r_v x^3 = a_n psi continuing x = a_n psi / (a_n - mu), by Newton."""
    from scipy.optimize import newton

    x0 = an * psi / (an - mu)
    return float(newton(lambda x: (an - mu) * x + r_v * x**3 - an * psi, x0,
                        fprime=lambda x: (an - mu) + 3 * r_v * x**2, tol=1e-15, maxiter=100))


def cmd_solve_background(cfg: ExperimentConfig, rep: Reporter) -> list:
    ops = cfg.operators()
    psi_s, psi = cfg.input_fields(ops.unit)
    V = cfg.kernel()
    mu = float(cfg["model"]["mu"])
    sol = _solve(cfg, ops, psi_s, psi)
    tol = cfg["solver"]["tol"]
    checks = []
    rs, r = background_residual(sol)
    checks.append(_check("residual", max(rs, r), 10 * tol))
    if sol.certificate is not None:
        checks.append(_check("certificate_ok", 0.0 if sol.certificate.ok else 1.0, 0.5))
    if V.is_zero:
        gap = max((sol.phi - sol.lin).sup(), (sol.phi_s - sol.lin_s).sup())
        checks.append(_check("linear_gap", gap, 1e-11))
    # amplitude scaling of phi^(>=3) and of the remainder beyond third order
    amps = cfg["sweeps"]["amplitudes"]
    hi, rem = [], []
    for t in amps:
        st = _solve(cfg, ops, t * psi_s, t * psi)
        ts, tt = third_order_part(st)
        hi.append(max(st.higher.sup(), st.higher_s.sup()))
        rem.append(max((st.higher - tt).sup(), (st.higher_s - ts).sup()))
    fits = {}
    if not V.is_zero:
        fits = {"higher": fit_exponent(amps, hi), "remainder": fit_exponent(amps, rem)}
    summary = {"solution": sol.to_dict(), "residual": [rs, r], "degree_fits": fits,
               "amplitude_sweep": {"amplitudes": amps, "sup_higher": hi, "sup_remainder": rem}}
    f = cfg["fields"]
    if f["kind"] == "constant" and V.is_on_site and f["value_s"] is None and complex(f["value"]).imag == 0:
        c = float(complex(f["value"]).real)
        x = constant_oracle(ops.an, mu, float(np.real(V.r_v)), c)
        gap = float(np.max(np.abs(sol.phi.values - x)))
        summary["constant_oracle"] = {"a_n": ops.an, "mu": mu, "r_v": float(np.real(V.r_v)), "psi": c,
                                      "oracle": x, "gap": gap}
        checks.append(_check("constant_oracle", gap, 1e-10))
    summary["checks"] = checks
    rep.json("solve_background.json", summary)
    rep.field("phi.csv", sol.phi)
    rep.field("phi_s.csv", sol.phi_s)
    rep.csv("summary.csv", ["quantity", "value"],
            [["residual", max(rs, r)], ["sup_phi", sol.phi.sup()], ["sup_higher", sol.higher.sup()]]
            + [[f"fit_{k}", v] for k, v in sorted(fits.items())])
    return checks


def cmd_derivative(cfg: ExperimentConfig, rep: Reporter) -> list:
    ops = cfg.operators()
    rows, checks = [], []
    axes = [0] + [1 + i for i in range(cfg.params.spatial_dims)]
    for k in range(int(cfg["sweeps"]["samples"])):
        psi_s, psi = cfg.input_fields(ops.unit, seed_offset=k)
        sol = _solve(cfg, ops, psi_s, psi)
        for nu in axes:
            d = derivative_field(sol, nu)
            rows.append([k, nu, d.gap, d.direct.sup()])
    gap = max(r[2] for r in rows)
    checks.append(_check("derivative_pathways", gap, 1e-9))
    rep.json("derivative.json", {"rows": [dict(zip(("sample", "nu", "gap", "sup_direct"), r)) for r in rows],
                                 "checks": checks})
    rep.csv("derivative.csv", ["sample", "nu", "gap", "sup_direct"], rows)
    return checks


def _first_order(r, S, tol):
    """Solution of the variation system with its nonlinear part dropped, as (d, d_s)."""
    p = r.info.get("problem")
    if p is None:
        return r.d, r.d_s
    g, _ = linear_part(p, tol=tol)
    return Field(r.d.lattice, S.matvec(g[1])), Field(r.d.lattice, S.rmatvec(g[0]))


def variation_sweep(cfg: ExperimentConfig, ops=None) -> dict:
    """delta_phi and Dphi against re-solve finite differences, with log-log slopes of the first-order error."""
    ops = ops or cfg.operators()
    V, mu = cfg.kernel(), float(cfg["model"]["mu"])
    tol = cfg["solver"]["tol"]
    psi_s, psi = cfg.input_fields(ops.unit)
    sol = _solve(cfg, ops, psi_s, psi)
    seed = int(cfg["seed"])
    dphi = []
    for eps in cfg["sweeps"]["perturbations"]:
        ds = Field.random(ops.unit, seed + 7, 0, scale=eps)
        d = Field.random(ops.unit, seed + 7, 1, scale=eps)
        r = delta_phi(sol.phi_s, sol.phi, ds, d, mu, V, ops, tol=tol)
        s2 = _solve(cfg, ops, psi_s + ds, psi + d)
        exact = (s2.phi - sol.phi, s2.phi_s - sol.phi_s)
        one = _first_order(r, ops.resolvent(0.0), tol)
        dphi.append({"eps": eps, "solver_gap": max((exact[0] - r.d).sup(), (exact[1] - r.d_s).sup()),
                     "first_order_error": max((exact[0] - one[0]).sup(), (exact[1] - one[1]).sup()),
                     "residual": r.residual})
    dmv = []
    dV = V * float(cfg["sweeps"]["dV_frac"])
    for k, dmu in enumerate(cfg["sweeps"]["dmu"]):
        frac = dmu / cfg["sweeps"]["dmu"][0]
        dVk = dV * frac
        r = delta_phi_mu_V(psi_s, psi, mu, dmu, V, dVk, ops, tol=tol, base=sol)
        s2 = _solve(cfg, ops, psi_s, psi, mu=mu + dmu, V=V + dVk)
        exact = (s2.phi - sol.phi, s2.phi_s - sol.phi_s)
        one = _first_order(r, ops.resolvent(mu + dmu), tol)
        dmv.append({"dmu": dmu, "solver_gap": max((exact[0] - r.d).sup(), (exact[1] - r.d_s).sup()),
                    "first_order_error": max((exact[0] - one[0]).sup(), (exact[1] - one[1]).sup()),
                    "residual": r.residual})
    out = {"delta_phi": dphi, "delta_mu_V": dmv}
    if all(r["first_order_error"] > 0 for r in dphi) and len(dphi) > 1:
        out["slope_delta_phi"] = fit_exponent([r["eps"] for r in dphi], [r["first_order_error"] for r in dphi])
    if all(r["first_order_error"] > 0 for r in dmv) and len(dmv) > 1:
        out["slope_delta_mu_V"] = fit_exponent([r["dmu"] for r in dmv], [r["first_order_error"] for r in dmv])
    return out


def cmd_variation(cfg: ExperimentConfig, rep: Reporter) -> list:
    res = variation_sweep(cfg)
    tol = cfg["solver"]["tol"]
    checks = [_check("delta_phi_solver_gap", max(r["solver_gap"] for r in res["delta_phi"]), 1e-9),
              _check("delta_mu_V_solver_gap", max(r["solver_gap"] for r in res["delta_mu_V"]), 1e-9),
              _check("delta_phi_residual", max(r["residual"] for r in res["delta_phi"]), 10 * tol),
              _check("delta_mu_V_residual", max(r["residual"] for r in res["delta_mu_V"]), 10 * tol)]
    for key in ("slope_delta_phi", "slope_delta_mu_V"):
        if key in res:
            checks.append(_check(key, res[key], (1.9, 2.1), op="in"))
    rows = [["delta_phi", r["eps"], r["first_order_error"], res.get("slope_delta_phi", "")] for r in res["delta_phi"]]
    rows += [["delta_mu_V", r["dmu"], r["first_order_error"], res.get("slope_delta_mu_V", "")]
             for r in res["delta_mu_V"]]
    res["checks"] = checks
    rep.json("variation.json", res)
    rep.csv("variation.csv", ["kind", "perturbation", "gap", "fitted_exponent"], rows)
    return checks


def cmd_critical(cfg: ExperimentConfig, rep: Reporter) -> list:
    ops = cfg.operators()
    if ops.n == 0:
        raise ConfigError("the critical field needs lattice.step >= 1")
    mu = float(cfg["model"]["mu"])
    V = cfg.kernel()
    setup = CriticalSetup(ops, mu)
    ops1 = next_ops(ops)
    psi_s, psi = cfg.input_fields(ops1.unit)
    tol = cfg["solver"]["tol"]
    cf = critical_field(psi_s, psi, mu, V, setup, tol=tol)
    gaps = {"plain": verify_resolvent_identity(ops, mu, False, setup),
            "starred": verify_resolvent_identity(ops, mu, True, setup)}
    c = float(np.real(complex(cfg["fields"]["value"])))
    theta = Field.constant(setup.coarse, c)
    conj = critical_conjugation_gap(theta, mu, V, setup, tol=tol)
    checks = [_check("resolvent_identity", max(gaps.values()), 1e-9), _check("route_gap", cf.route_gap, 1e-9),
              _check("constant_conjugation_gap", conj, 1e-11)]
    rep.json("critical.json", {"critical": cf.to_dict(), "identity_gaps": gaps, "constant_conjugation_gap": conj,
                               "condition": setup.condition, "constant_eigenvalue": setup.constant_eigenvalue(),
                               "checks": checks})
    rep.field("psi_hat.csv", cf.hat)
    rep.field("psi_hat_s.csv", cf.hat_s)
    return checks


def cmd_bounds_report(cfg: ExperimentConfig, rep: Reporter) -> list:
    sw, nm = cfg["sweeps"], cfg["norm"]
    r = bounds_report(seed=int(cfg["seed"]), m=float(nm["m"]), m_bar=float(nm["m_bar"]), mu=float(sw["bounds_mu"]),
                      rvs=tuple(sw["bounds_rvs"]), wfs=tuple(sw["bounds_wfs"]))
    checks = [_check("gamma_1_stable", r["background"]["gamma_1"]["max_rel_dev"], 0.2 + 1e-12)]
    table = []
    shapes = {"background": ("ratio_higher", "|||phi^(>=3)||| / (||V|| wf^3)"),
              "delta_psi": ("ratio_ge2", "|||dphi^(>=2)||| / (||V|| (wf + wf_d) wf_d^2)"),
              "delta_mu_V": ("ratio", "|||Dphi||| / ((|dmu| + ||dV|| wf^2) wf)"),
              "critical": ("ratio", "|||psi_hat^(>=3)||| / (||V|| wf^3 / L)")}
    for name, (key, shape) in shapes.items():
        for row in r[name]["rows"]:
            table.append([name, shape, row["r_v"], row["wf"], row[key]])
    for row in r["delta_psi"]["rows"]:
        table.append(["delta_psi", "|||dphi^(+)||| / ({||V|| (wf + wf_d)^2 + |mu|} wf_d)", row["r_v"], row["wf"],
                      row["ratio_plus"]])
    r["checks"] = checks
    rep.json("bounds.json", r)
    rep.csv("bounds.csv", ["map", "shape", "r_v", "wf", "ratio"], table)
    return checks


def verify_suite(cfg: ExperimentConfig) -> list:
    """Exact identities and consistency checks; a list of check records."""
    params, n = cfg.params, cfg.n
    m = cfg["model"]
    mu, tol = float(m["mu"]), cfg["solver"]["tol"]
    checks = []
    seed = int(cfg["seed"])
    unit = make_lattice(params, 0, n)
    an = a_n(float(m["a"]), params.L, n)
    one = np.ones(unit.size)
    fq = cfg.fq_kernel()
    if fq is not None:
        checks.append(_check("eigen_fQ", float(np.max(np.abs(fq.matvec(one) - an))), 1e-12))
        if not checks[-1]["ok"]:
            return checks
    ops = cfg.operators(fq)
    fine = ops.fine
    f, g = Field.random(fine, seed, 2), Field.random(fine, seed, 3)
    h = Field.random(fine, seed, 4)
    axes = [0] + [1 + i for i in range(params.spatial_dims)]
    # gaps relative to the size of the differences (divided differences carry 1/spacing)
    rel = lambda a, b: (a - b).sup() / max(1.0, a.sup())
    checks.append(_check("product_rule", max(rel(forward_diff(f * g, nu), product_rule_rhs(f, g, nu))
                                             for nu in axes), 1e-12))
    checks.append(_check("triple_rule", max(rel(forward_diff(f * g * h, nu), triple_rule_rhs(f, g, h, nu))
                                            for nu in axes), 1e-12))
    adj = []
    for nu in axes:
        lhs = inner_product(forward_diff(f, nu), g)
        adj.append(abs(lhs - inner_product(f, diff_adjoint(g, nu))) / max(1.0, abs(lhs)))
    checks.append(_check("diff_adjoint", max(adj), 1e-12))
    u = Field.random(ops.unit, seed, 5)
    checks.append(_check("Q_adjoint", abs(inner_product(ops.Qn.apply(f), u) - inner_product(f, ops.Qn_adj.apply(u))),
                         1e-12 * max(1.0, abs(inner_product(ops.Qn.apply(f), u)))))
    checks.append(_check("eigen_Q", float(np.max(np.abs(ops.Qn.matvec(np.ones(fine.size)) - 1))), 1e-12))
    checks.append(_check("eigen_fQ", float(np.max(np.abs(ops.fq.matvec(np.ones(ops.unit.size)) - ops.an))), 1e-12))
    checks.append(_check("eigen_D", float(np.max(np.abs(ops.Dn.matvec(np.ones(fine.size))))), 1e-12))
    if n < params.n_steps:
        sf = Field.random(unit, seed, 6)
        back = scale_field(scale_field(sf, "finer"), "coarser")
        c = float(params.L) ** params.scaling_power
        lstar = pullback_dilation(scale_field(sf, "finer")) - c * sf
        checks.append(_check("scaling_inverse", (back - sf).sup(), 1e-12))
        checks.append(_check("pullback_scaling", lstar.sup(), 1e-12 * c))
    # resolvent margin, then the covariance identity
    try:
        ops.resolvent(mu)
        checks.append(_check("resolvent_margin", 0.0, 0.5))
    except SingularOperatorError as e:
        rec = _check("resolvent_margin", 1.0, 0.5)
        rec["message"] = str(e)
        rec["margin"] = e.margin
        checks.append(rec)
        return checks
    if 1 <= n < params.n_steps:
        setup = CriticalSetup(ops, mu)
        gap = max(verify_resolvent_identity(ops, mu, s, setup) for s in (False, True))
        checks.append(_check("resolvent_identity", gap, 1e-9))
        theta = Field.constant(setup.coarse, 0.3)
        checks.append(_check("critical_conjugation_constant",
                             critical_conjugation_gap(theta, mu, cfg.kernel(), setup, tol=tol), 1e-11))
    V = cfg.kernel()
    checks.append(_check("conjugation_constant", conjugation_gap(Field.constant(ops.unit, 0.3), mu, V, ops, tol=tol),
                         1e-11))
    psi_s, psi = cfg.input_fields(ops.unit)
    sol = _solve(cfg, ops, psi_s, psi)
    gs, gg = action_gradient(psi_s, psi, sol.phi_s, sol.phi, mu, V, ops)
    checks.append(_check("action_gradient", max(gs.sup(), gg.sup()), 10 * tol))
    # directional derivative of the action in phi
    d_s, d = Field.random(fine, seed, 8), Field.random(fine, seed, 9)
    eps = 1e-4
    fd = (action_value(psi_s, psi, sol.phi_s + eps * d_s, sol.phi + eps * d, mu, V, ops)
          - action_value(psi_s, psi, sol.phi_s - eps * d_s, sol.phi - eps * d, mu, V, ops)) / (2 * eps)
    scale = abs(action_value(psi_s, psi, sol.phi_s + d_s, sol.phi + d, mu, V, ops)) + 1.0
    checks.append(_check("action_stationary", abs(fd) / scale, 1e-6))
    checks.append(_check("derivative_pathways", max(derivative_field(sol, nu).gap for nu in axes), 1e-9))
    var = variation_sweep(cfg, ops)
    checks.append(_check("delta_phi_solver_gap", max(r["solver_gap"] for r in var["delta_phi"]), 1e-9))
    checks.append(_check("delta_mu_V_solver_gap", max(r["solver_gap"] for r in var["delta_mu_V"]), 1e-9))
    if "slope_delta_phi" in var:
        checks.append(_check("slope_delta_phi", var["slope_delta_phi"], (1.9, 2.1), op="in"))
    if 1 <= n < params.n_steps:
        fl = FluctuationSetup(ops)
        ops1 = next_ops(ops)
        zl = make_lattice(params, 1, n)
        p1 = Field.random(ops1.unit, seed, 10, scale=0.3)
        z = Field.random(zl, seed, 11, scale=0.1)
        a = delta_phi_hat(p1.conj(), p1, z.conj(), z, mu, V, fl, tol=tol)
        b = delta_phi_hat(p1.conj(), p1, z.conj(), z, mu, V, fl, route="scaled", tol=tol)
        checks.append(_check("delta_phi_hat_routes", max((a.d - b.d).sup(), (a.d_s - b.d_s).sup()), 1e-11))
    return checks


def cmd_verify(cfg: ExperimentConfig, rep: Reporter) -> list:
    checks = verify_suite(cfg)
    rep.json("verify.json", {"checks": checks, "ok": all(c["ok"] for c in checks)})
    rep.csv("verify.csv", ["check", "value", "ok"], [[c["name"], c["value"], c["ok"]] for c in checks])
    for c in checks:
        print(f"{'PASS' if c['ok'] else 'FAIL'} {c['name']} {c['value']:.3e}" + (f" {c['message']}" if "message" in c
                                                                                 else ""))
    return checks


COMMANDS = {"solve-background": cmd_solve_background, "derivative": cmd_derivative, "variation": cmd_variation,
            "critical": cmd_critical, "bounds-report": cmd_bounds_report, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bgfield", description="background-field experiments")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        sp.add_argument("--out", help="output directory (default: config 'out' or ./bgfield-<command>)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for FFTs")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, cfg: ExperimentConfig, out, threads: int = 1) -> int:
    """Run one command; returns the exit code."""
    rep = Reporter(cfg, Path(out), command)
    try:
        with sfft.set_workers(max(1, int(threads))):
            checks = COMMANDS[command](cfg, rep)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (HypothesisError, ConvergenceError, SingularOperatorError, CheckFailure) as e:
        print(f"check failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CHECK
    bad = [c for c in checks if not c["ok"]]
    for c in bad:
        print(f"check failure: {c['name']} = {c['value']:.3e} (threshold {c['threshold']})", file=sys.stderr)
    return EXIT_CHECK if bad else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg["out"] or f"bgfield-{args.command}"
    return run(args.command, cfg, out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
