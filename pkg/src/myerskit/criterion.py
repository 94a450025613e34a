"""Myers-criterion verdict with Monte Carlo / spectral cross-validation."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import spectral
from .errors import InsufficientDecayWindow, MyersError
from .expr import ScalarFieldExpr, as_expr
from .flows import (fit_log_slope, one_form_observable, potential_from_curve,
                    v0_in_frame)
from .geometry import ManifoldModel, Sphere, field_jet, field_values, h_volume, inv2
from .sde import SamplerConfig, initial_frame, sample_functionals

log = logging.getLogger(__name__)

CRITERION_EPS = 1e-6
FK_TIMES = (0.5, 1.0, 2.0)


@dataclass
class NumericsConfig:
    sde: SamplerConfig = field(default_factory=lambda: SamplerConfig(dt=1e-2, t_max=10.0, n_paths=2000,
                                                                       record_stride=5))
    resolution: int = 64
    subdivision: int = 5
    probes: Optional[list] = None
    threads: int = 1
    rho_shift: float = 0.0
    n_bakry_pairs: int = 5
    bakry_t: float = 1.0
    one_form_t: float = 1.0


@dataclass
class MyersReport:
    manifold: dict
    h: str
    lambda0: float
    mu_top: float
    criterion_holds: bool
    u1_spectral: dict
    u1_mc: list
    h_volume: float
    negative_rho_fraction: float
    decay_fit: dict
    identity_residuals: dict
    known_pi1_finite: Optional[bool]
    consistency: bool
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "manifold": self.manifold,
            "h": self.h,
            "lambda0": self.lambda0,
            "mu_top": self.mu_top,
            "criterion_holds": self.criterion_holds,
            "u1_spectral": self.u1_spectral,
            "u1_mc": self.u1_mc,
            "h_volume": self.h_volume,
            "negative_rho_fraction": self.negative_rho_fraction,
            "decay_fit": self.decay_fit,
            "identity_residuals": self.identity_residuals,
            "known_pi1_finite": self.known_pi1_finite,
            "consistency": self.consistency,
            "notes": self.notes,
        }

    def residual_rows(self):
        rows = []
        for name, rec in self.identity_residuals.items():
            rows.append([name, rec.get("residual"), rec.get("tolerance"), rec.get("passed"),
                         rec.get("error", rec.get("skipped", ""))])
        return rows


# ---------------------------------------------------------------------------
# test fields

def random_smooth_field(M: ManifoldModel, rng) -> ScalarFieldExpr:
    """A random smooth scalar field written in the (u, v) vocabulary of ``M``."""
    c = [float(x) for x in np.round(rng.normal(size=4), 6)]
    if isinstance(M, Sphere):
        src = (f"{c[0]!r}*sin(v)*cos(u) + {c[1]!r}*sin(v)*sin(u) + {c[2]!r}*cos(v)"
               f" + {c[3]!r}*cos(v)^2")
    else:
        ku, kv = float(2 * np.pi / M.Lu), float(2 * np.pi / M.Lv)
        src = (f"{c[0]!r}*cos({ku!r}*u) + {c[1]!r}*sin({kv!r}*v)"
               f" + {c[2]!r}*cos({ku!r}*u + {kv!r}*v) + {c[3]!r}*sin(2*{ku!r}*u - {kv!r}*v)")
    return as_expr(src.replace("+ -", "- "))


def default_test_field(M):
    return as_expr("cos(v)" if isinstance(M, Sphere) else f"cos({float(2 * np.pi / M.Lu)!r}*u)")


def node_values(op, f):
    val, bad = field_values(op.manifold, f, op.ch, op.xy)
    if bad.any():
        raise MyersError(f"{f} is undefined on the discretisation nodes")
    return val


def grad_norms(op, f):
    _, df, _, _ = field_jet(op.manifold, f, op.ch, op.xy)
    ginv = inv2(op.manifold.metric(op.ch, op.xy))
    return np.sqrt(np.einsum("ni,nij,nj->n", df, ginv, df))


# ---------------------------------------------------------------------------
# operations

def decay_rate_fit(times, fk_curves, fk_stderrs, window):
    """Slope of log(sup over probes of the FK mean) on ``window``."""
    times = np.asarray(times)
    lo, hi = window
    sel = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    curves = np.asarray(fk_curves)
    se = np.asarray(fk_stderrs)
    if sel.sum() < 10:
        raise InsufficientDecayWindow(f"only {int(sel.sum())} samples in window {window}")
    if not (curves[:, sel] > 10 * se[:, sel]).all():
        raise InsufficientDecayWindow("FK means within 10 standard errors of zero in the window")
    return fit_log_slope(times, curves.max(axis=0), lo, hi)


@dataclass
class BakryRecord:
    lhs: float
    rhs: float
    slack: float
    holds: bool


def bakry_inequality_check(op, f, g, t, c, tol=1e-8) -> BakryRecord:
    """|<P_t f - f, g>_w| <= c |grad f|_inf sum_i w_i |grad g|_i on the nodes."""
    f, g = as_expr(f), as_expr(g)
    fv, gv = node_values(op, f), node_values(op, g)
    lhs = op.inner(spectral.semigroup_apply(op, fv, t) - fv, gv)
    rhs = c * float(grad_norms(op, f).max()) * float(np.sum(op.w * grad_norms(op, g)))
    slack = rhs - abs(lhs)
    scale = tol * max(1.0, abs(lhs), rhs)
    return BakryRecord(float(lhs), float(rhs), float(slack), bool(slack >= -scale))


def _residual(value, tol, passed, **extra):
    return {"residual": float(value), "tolerance": float(tol), "passed": bool(passed), **extra}


def _spectral_part(M, h, cfg: NumericsConfig):
    op = spectral.build_operator(M, h, cfg.resolution, cfg.subdivision, cfg.rho_shift)
    eig = spectral.top_eigen(op)
    u = None
    if eig.lambda0 < -CRITERION_EPS:
        u = spectral.potential_resolvent(op, eig)
    return op, eig, u


def _mc_part(M, h, probes, cfg: NumericsConfig, f, v0s):
    out = []
    for p, v0 in zip(probes, v0s):
        obs = {"one_form": one_form_observable(M, f, v0_in_frame(M, p, v0))}
        out.append(sample_functionals(M, h, p, f, cfg.sde, threads=cfg.threads, observables=obs,
                                      rho_shift=cfg.rho_shift))
    return out


def _unit_v0(M, p):
    ch, xy = M.chart_point(p)
    return initial_frame(M.metric(ch, xy))[0][:, 0]


def check(M: ManifoldModel, h, cfg: Optional[NumericsConfig] = None) -> MyersReport:
    """Run both engines and assemble the criterion verdict with all cross-checks."""
    cfg = NumericsConfig() if cfg is None else cfg
    h = as_expr(h)
    probes = cfg.probes or M.default_probes(np.random.default_rng(cfg.sde.seed))
    f = default_test_field(M)
    v0s = [_unit_v0(M, p) for p in probes]
    notes = []

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            spec_fut = pool.submit(_spectral_part, M, h, cfg)
            mc_fut = pool.submit(_mc_part, M, h, probes, cfg, f, v0s)
            op, eig, u = spec_fut.result()
            records = mc_fut.result()
    else:
        op, eig, u = _spectral_part(M, h, cfg)
        records = _mc_part(M, h, probes, cfg, f, v0s)

    holds = bool(eig.lambda0 < -CRITERION_EPS)
    times = records[0].times
    residuals = {}

    # spectral potential kernel
    if u is not None:
        u_probe = spectral.evaluate_at(op, u, probes)
        u1_spec = {"sup": float(u.max()), "inf": float(u.min()),
                   "mean": float(np.sum(op.w * u) / np.sum(op.w))}
    else:
        u_probe = [None] * len(probes)
        u1_spec = {"sup": None, "inf": None, "mean": None, "diverged": True}

    # MC potential kernel at probes
    u1_mc = []
    for p, rec, up in zip(probes, records, u_probe):
        try:
            est = potential_from_curve(rec.times, rec.mean["fk_weight"], rec.stderr["fk_weight"])
            entry = dict(est.__dict__)
        except MyersError as exc:
            entry = {"error": str(exc)}
        entry["probe"] = {"chart_id": p.chart_id, "coords": list(p.coords)}
        entry["u1_spectral_at_probe"] = None if up is None else float(up)
        entry["n_used"] = rec.n_used
        entry["n_excluded"] = rec.n_excluded
        u1_mc.append(entry)

    # Hessian-flow domination: E|W| <= E FK weight
    worst = -np.inf
    for rec in records:
        comb = np.sqrt(rec.stderr["w_norm"] ** 2 + rec.stderr["fk_weight"] ** 2)
        worst = max(worst, float(np.max(rec.mean["w_norm"] - rec.mean["fk_weight"] - 3 * comb)))
    residuals["eq5"] = _residual(worst, 1e-12, worst <= 1e-12)

    # one-form bound: |E df(W v0)| <= sup|df| E|W|
    sup_phi = float(grad_norms(op, f).max())
    worst = -np.inf
    for rec in records:
        bound = sup_phi * rec.mean["w_norm"] + 3 * rec.stderr["one_form"]
        worst = max(worst, float(np.max(np.abs(rec.mean["one_form"]) - bound)))
    residuals["eq4"] = _residual(worst, 0.0, worst <= 0.0)

    # one-form identity: MC action vs spectral d(P_t f)
    t1 = min(cfg.one_form_t, float(times[-1]))
    i1 = int(np.argmin(np.abs(times - t1)))
    try:
        pf = spectral.semigroup_apply(op, node_values(op, f), float(times[i1]))
        worst = -np.inf
        for p, v0, rec in zip(probes, v0s, records):
            ref = spectral.directional_derivative(op, pf, p, v0)
            tol = 3 * rec.stderr["one_form"][i1] + 1e-2
            dev = abs(rec.mean["one_form"][i1] - ref) - tol
            worst = max(worst, float(dev))
        residuals["eq1_eq3"] = _residual(worst, 0.0, worst <= 0.0, t=float(times[i1]))
    except MyersError as exc:
        residuals["eq1_eq3"] = {"error": str(exc), "passed": False}

    # Feynman-Kac: MC P_t^{rho} 1 vs spectral semigroup
    fk_t = [t for t in FK_TIMES if t <= times[-1] + 1e-12]
    if fk_t:
        idx = [int(np.argmin(np.abs(times - t))) for t in fk_t]
        pot = spectral.semigroup_apply(op, np.ones(op.n), [float(times[i]) for i in idx], potential=True)
        worst = -np.inf
        for k, i in enumerate(idx):
            ref = spectral.evaluate_at(op, pot[k], probes)
            for j, rec in enumerate(records):
                dev = abs(rec.mean["fk_weight"][i] - ref[j]) - (0.02 * abs(ref[j]) + 3 * rec.stderr["fk_weight"][i])
                worst = max(worst, float(dev))
        residuals["feynman_kac"] = _residual(worst, 0.0, worst <= 0.0)

    # exponential decay of the FK semigroup at rate mu_top
    window = (float(times[-1]) / 2, float(times[-1]))
    try:
        rate = decay_rate_fit(times, [r.mean["fk_weight"] for r in records],
                              [r.stderr["fk_weight"] for r in records], window)
        rel = abs(rate - eig.mu_top) / max(abs(eig.mu_top), 1e-12)
        decay = {"fitted_rate": rate, "window": list(window), "relative_error": rel}
    except MyersError as exc:
        decay = {"fitted_rate": None, "window": list(window), "error": str(exc)}

    # Witten conjugation
    try:
        wr = spectral.witten_check(M, h, cfg.resolution, cfg.subdivision)
        residuals["witten"] = _residual(wr.max_rel_diff, 0.01, wr.passed,
                                        pointwise_residual=wr.pointwise_residual)
    except MyersError as exc:
        residuals["witten"] = {"error": str(exc), "passed": False}

    # Bakry integration-by-parts bound
    if holds:
        rng = np.random.default_rng(cfg.sde.seed)
        recs = [bakry_inequality_check(op, random_smooth_field(M, rng), random_smooth_field(M, rng),
                                       cfg.bakry_t, u1_spec["sup"])
                for _ in range(cfg.n_bakry_pairs)]
        min_slack = min(r.slack for r in recs)
        residuals["bakry"] = _residual(min_slack, 0.0, all(r.holds for r in recs),
                                       pairs=[r.__dict__ for r in recs])
    else:
        residuals["bakry"] = {"passed": None, "skipped": "criterion fails: sup U1 is infinite"}
        notes.append("criterion fails; by the theorem this proves nothing about the fundamental group")

    vol = op.w * np.exp(-2 * spectral.node_geometry(op).h_value)
    neg_frac = float(vol[op.rho_vec < 0].sum() / vol.sum())
    if isinstance(M, Sphere):
        hv = h_volume(M, h, 5 * 2 ** cfg.subdivision)
    else:
        hv = h_volume(M, h, cfg.resolution)

    known = M.known_pi1_finite
    consistency = not (holds and known is False)
    return MyersReport(
        manifold=M.describe(), h=str(h), lambda0=eig.lambda0, mu_top=eig.mu_top,
        criterion_holds=holds, u1_spectral=u1_spec, u1_mc=u1_mc, h_volume=hv,
        negative_rho_fraction=neg_frac, decay_fit=decay, identity_residuals=residuals,
        known_pi1_finite=known, consistency=consistency, notes=notes)
