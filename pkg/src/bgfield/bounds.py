"""Tiny-lattice measurements of the field-map norm bounds.

Every bound of the form  |||F||| <= Gamma * (shape in ||V||, wf, ...)  is
measured by extracting the power series of F on a lattice small enough for
exhaustive kernels, evaluating |||F||| with normkit, and reporting the ratio
|||F||| / shape as the empirical constant.
"""

from __future__ import annotations

import logging
import time

import numpy as np

from .background import QuarticKernel, background_map, solve_background
from .critical import CriticalSetup, critical_map, next_ops
from .field import Field
from .fixedpoint import HypothesisError
from .lattice import LatticeParams, scaled_lattice
from .normkit import FieldMapSeries, NormContext, extract_series, field_map_norm
from .operator import ProductOp, model_operators

log = logging.getLogger(__name__)

# 27 fine points and 3 unit points at step 1; temporal axis only
TINY = LatticeParams(L=3, L_tp=27, L_sp=1, n_steps=1, spatial_dims=0)
# one more step, for the critical field (81 fine points at step 2)
TINY_CRITICAL = LatticeParams(L=3, L_tp=81, L_sp=1, n_steps=2, spatial_dims=0)


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of log y against log x."""
    x, y = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def _series_norm(series, ctx, weights, degrees=None):
    """max over the outputs of the field-map norm."""
    vals = [field_map_norm(s, ctx, weights, degrees)[0] for s in series]
    return max(vals)


def _stability(ratios, band=0.2):
    r = np.asarray(ratios, dtype=float)
    mean = float(np.mean(r))
    spread = float(np.max(np.abs(r / mean - 1.0))) if mean > 0 else float("inf")
    return {"mean": mean, "max_rel_dev": spread, "stable": bool(np.all(np.isfinite(r)) and spread <= band)}


def gamma_background(rvs=(1e-3, 2e-3, 4e-3), wfs=(1.0, 1.5, 2.0), mu=0.01, m=0.5, m_bar=1.0,
                     params=TINY, n=1, seed=0):
    """|||phi^(>=3)||| / (||V||_m wf^3) and |||phi||| / wf over an (r_v, wf) grid.

    The series depends on V only, so one extraction per r_v serves every wf.
    """
    ops = model_operators(params, n)
    rows = []
    for rv in rvs:
        V = QuarticKernel.on_site(rv)
        vn = V.norm(ops.fine, m)
        series = extract_series(background_map(ops, mu, V), [ops.unit, ops.unit], [ops.fine, ops.fine],
                                degrees=range(1, 6), slots=("psi_s", "psi"), seed=seed)
        for wf in wfs:
            ctx = NormContext(m=m, m_bar=m_bar, weights={"psi_s": wf, "psi": wf})
            hi = _series_norm(series, ctx, None, degrees=(3, 4, 5))
            full = _series_norm(series, ctx, None)
            lin = _series_norm(series, ctx, None, degrees=(1,))
            rows.append({"r_v": rv, "wf": wf, "norm_V": vn, "norm_higher": hi, "norm_phi": full,
                         "norm_linear": lin, "ratio_higher": hi / (vn * wf**3), "ratio_phi": full / wf,
                         "ratio_linear": lin / wf})
    return {"rows": rows, "gamma_1": _stability([r["ratio_higher"] for r in rows]),
            "gamma_phi": _stability([r["ratio_phi"] for r in rows])}


def gamma_delta_psi(rvs=(1e-3, 2e-3, 4e-3), wfs=(1.0, 1.5, 2.0), wf_dpsi=1.0, mu=0.01, m=0.5, m_bar=1.0,
                    params=TINY, n=1, seed=0):
    """Variation in psi: dphi(psi, dpsi) = phi(psi + dpsi) - phi(psi), degrees at most three.

    Ratios: |||dphi^(+)||| / ({||V||(wf + wf_dpsi)^2 + |mu|} wf_dpsi) and
    |||dphi^(>=2)||| / (||V|| (wf + wf_dpsi) wf_dpsi^2).
    """
    ops = model_operators(params, n)
    S0 = ops.resolvent(0.0)
    QFt = ProductOp(ops.Qn_adj, ops.fq.T)
    rows = []
    for rv in rvs:
        V = QuarticKernel.on_site(rv)
        vn = V.norm(ops.fine, m)
        bm = background_map(ops, mu, V)

        def plus_map(x):
            ps, p, ds, d = x
            a = bm([ps + ds, p + d])
            b = bm([ps, p])
            return [a[0] - b[0] - S0.rmatvec(QFt.matvec(ds)), a[1] - b[1] - S0.matvec(ops.QadjF.matvec(d))]

        u = ops.unit
        series = extract_series(plus_map, [u, u, u, u], [ops.fine, ops.fine], degrees=range(1, 4),
                                slots=("psi_s", "psi", "dpsi_s", "dpsi"), seed=seed)
        for wf in wfs:
            ctx = NormContext(m=m, m_bar=m_bar, weights={"psi_s": wf, "psi": wf, "dpsi_s": wf_dpsi, "dpsi": wf_dpsi})
            plus = _series_norm(series, ctx, None)
            ge2 = []
            for s in series:
                ks = [k for k in s.kernels if k.degree[2] + k.degree[3] >= 2]
                ge2.append(field_map_norm(FieldMapSeries(ks, s.slots, s.d_max), ctx)[0])
            ge2 = max(ge2)
            rows.append({"r_v": rv, "wf": wf, "wf_dpsi": wf_dpsi, "norm_plus": plus, "norm_ge2": ge2,
                         "ratio_plus": plus / ((vn * (wf + wf_dpsi) ** 2 + abs(mu)) * wf_dpsi),
                         "ratio_ge2": ge2 / (vn * (wf + wf_dpsi) * wf_dpsi**2)})
    return {"rows": rows, "gamma_4_plus": _stability([r["ratio_plus"] for r in rows]),
            "gamma_4_ge2": _stability([r["ratio_ge2"] for r in rows]), "truncation": 3}


def gamma_delta_mu_V(rvs=(1e-3, 2e-3, 4e-3), wfs=(1.0, 1.5, 2.0), dmu=1e-3, dV_frac=0.1, mu=0.01, m=0.5,
                     m_bar=1.0, params=TINY, n=1, seed=0):
    """Variation in (mu, V): |||Dphi||| / ((|dmu| + ||dV|| wf^2) wf)."""
    ops = model_operators(params, n)
    rows = []
    for rv in rvs:
        V = QuarticKernel.on_site(rv)
        dV = V * dV_frac
        a, b = background_map(ops, mu + dmu, V + dV), background_map(ops, mu, V)

        def dmap(x):
            p1, p0 = a(x), b(x)
            return [p1[0] - p0[0], p1[1] - p0[1]]

        series = extract_series(dmap, [ops.unit, ops.unit], [ops.fine, ops.fine], degrees=range(1, 6),
                                slots=("psi_s", "psi"), seed=seed)
        dvn = dV.norm(ops.fine, m)
        for wf in wfs:
            ctx = NormContext(m=m, m_bar=m_bar, weights={"psi_s": wf, "psi": wf})
            val = _series_norm(series, ctx, None)
            rows.append({"r_v": rv, "wf": wf, "dmu": dmu, "norm_dV": dvn, "norm_Dphi": val,
                         "ratio": val / ((abs(dmu) + dvn * wf**2) * wf)})
    return {"rows": rows, "gamma_5": _stability([r["ratio"] for r in rows])}


def gamma_critical(rvs=(1e-3, 2e-3, 4e-3), wfs=(1.0, 1.5, 2.0), mu=0.01, m=0.5, m_bar=1.0,
                   params=TINY_CRITICAL, n=1, seed=0):
    """Critical field: |||psi_hat^(>=3)||| / (||V||_m wf^3 / L)."""
    ops = model_operators(params, n)
    setup = CriticalSetup(ops, mu)
    ops1 = next_ops(ops)
    out_lat = scaled_lattice(ops.unit, "finer")  # X_1^(n)
    L = params.L
    rows = []
    for rv in rvs:
        V = QuarticKernel.on_site(rv)
        vn = V.norm(ops.fine, m)
        series = extract_series(critical_map(setup, mu, V, part="higher"), [ops1.unit, ops1.unit],
                                [out_lat, out_lat], degrees=range(1, 6), slots=("psi_s", "psi"), seed=seed)
        for wf in wfs:
            ctx = NormContext(m=m, m_bar=m_bar, weights={"psi_s": wf, "psi": wf})
            val = _series_norm(series, ctx, None, degrees=(3, 4, 5))
            rows.append({"r_v": rv, "wf": wf, "norm_higher": val, "ratio": val / (vn * wf**3 / L)})
    return {"rows": rows, "gamma_6": _stability([r["ratio"] for r in rows])}


def probe_threshold(mu=0.01, wf=1.0, rvs=None, params=TINY, n=1):
    """Largest ||V|| wf^2 + |mu| on a geometric r_v sweep for which the solver probes pass.

    The inputs are constant fields psi_(*) = wf.
    """
    ops = model_operators(params, n)
    rvs = rvs if rvs is not None else np.geomspace(1e-3, 10.0, 13)
    psi = Field.constant(ops.unit, wf)
    best = None
    for rv in rvs:
        V = QuarticKernel.on_site(float(rv))
        try:
            solve_background(psi, psi, mu, V, ops)
        except HypothesisError:
            break
        best = float(rv) * wf**2 + abs(mu)
    return {"rho_hat_1": best, "mu": mu, "wf": wf}


def bounds_report(seed=0, m=0.5, m_bar=1.0, mu=0.01, rvs=(1e-3, 2e-3, 4e-3), wfs=(1.0, 1.5, 2.0)) -> dict:
    """All tiny-regime measurements.  Timings go to the log only, so reports stay reproducible."""
    out = {}
    t = time.perf_counter()
    for name, fn in (("background", gamma_background), ("delta_psi", gamma_delta_psi),
                     ("delta_mu_V", gamma_delta_mu_V), ("critical", gamma_critical)):
        t0 = time.perf_counter()
        out[name] = fn(rvs=rvs, wfs=wfs, mu=mu, m=m, m_bar=m_bar, seed=seed)
        log.info("%s measured in %.1f s", name, time.perf_counter() - t0)
    out["thresholds"] = probe_threshold(mu=mu)
    log.info("bounds report in %.1f s", time.perf_counter() - t)
    return out
