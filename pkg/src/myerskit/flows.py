"""Hessian flow and Feynman-Kac functionals along h-Brownian paths.

The Hessian flow is carried in the g-orthonormal frame transported by the
sampler, where the covariant equation becomes the matrix ODE
``dw/dt = A(x_t) w`` with the symmetric generator

    A = E^T (-1/2 Ric + Hess h) E.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientDecayWindow
from .expr import as_expr
from .geometry import PointOnManifold, field_jet, local_geometry


def generator_in_frame(geo, frames):
    s = -0.5 * geo.ric + geo.hess_h
    a = np.swapaxes(frames, 1, 2) @ s @ frames
    return 0.5 * (a + np.swapaxes(a, 1, 2))


def sym_expm2(a):
    """Matrix exponential of a batch of symmetric 2x2 matrices."""
    m = 0.5 * (a[:, 0, 0] + a[:, 1, 1])
    p = 0.5 * (a[:, 0, 0] - a[:, 1, 1])
    b = a[:, 0, 1]
    d = np.hypot(p, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        shc = np.where(d > 1e-8, np.sinh(d) / d, 1.0 + d * d / 6.0)
    ch = np.cosh(d)
    out = np.empty_like(a)
    out[:, 0, 0] = ch + shc * p
    out[:, 1, 1] = ch - shc * p
    out[:, 0, 1] = out[:, 1, 0] = shc * b
    return np.exp(m)[:, None, None] * out


def op_norm2(w):
    """Largest singular value of a batch of 2x2 matrices."""
    a, b, c, d = w[:, 0, 0], w[:, 0, 1], w[:, 1, 0], w[:, 1, 1]
    return 0.5 * (np.hypot(a + d, b - c) + np.hypot(a - d, b + c))


def flow_propagate(w, a_old, a_new, dt):
    """One step of the Hessian flow with the trapezoidal generator."""
    return sym_expm2(0.5 * dt * (a_old + a_new)) @ w


def hessian_flow_step(M, h, state_old, state_new, dt):
    """Advance ``state_old.w_matrix`` to the frame of ``state_new``.

    Both states must come from consecutive sampler steps so that
    ``state_new.frame`` is the transport of ``state_old.frame``.
    """
    h = as_expr(h)
    mats = []
    for st in (state_old, state_new):
        ch, xy = M.chart_point(st.x)
        geo = local_geometry(M, h, ch, xy)
        mats.append(generator_in_frame(geo, st.frame[None]))
    return flow_propagate(np.asarray(state_old.w_matrix)[None], mats[0], mats[1], dt)[0]


def fk_weight(state) -> float:
    return float(np.exp(-0.5 * state.fk_integral))


# ---------------------------------------------------------------------------
# Monte Carlo functionals

@dataclass
class MCEstimate:
    mean: float
    stderr: float
    n_used: int


@dataclass
class FlowRecord:
    times: np.ndarray
    e_w_norm: np.ndarray
    e_w_norm_se: np.ndarray
    fk_mean: np.ndarray
    fk_se: np.ndarray
    diff_mean: np.ndarray     # E(|W| - FK weight), pathwise
    diff_se: np.ndarray
    extra: dict = field(default_factory=dict)


def flow_record(M, h, x0, cfg, threads=1, rho_shift=0.0) -> FlowRecord:
    from .sde import sample_functionals

    rec = sample_functionals(M, h, x0, None, cfg, threads=threads, rho_shift=rho_shift)
    return FlowRecord(rec.times, rec.mean["w_norm"], rec.stderr["w_norm"],
                      rec.mean["fk_weight"], rec.stderr["fk_weight"],
                      rec.mean["w_minus_fk"], rec.stderr["w_minus_fk"], {"record": rec})


def one_form_observable(M, f, v0_frame):
    """Per-path value of df_{x_t}(W_t v0), ``v0_frame`` = v0 in the initial frame."""
    f = as_expr(f)
    c0 = np.asarray(v0_frame, float)

    def obs(state):
        _, grad, _, bad = field_jet(M, f, state.ch, state.xy)
        vec = np.einsum("nij,nj->ni", state.frames, state.w @ c0)
        out = np.einsum("ni,ni->n", grad, vec)
        out[bad] = np.nan
        return out
    return obs


def v0_in_frame(M, x0: PointOnManifold, v0):
    """Components of the tangent vector ``v0`` in the initial sampler frame."""
    from .sde import initial_frame

    ch, xy = M.chart_point(x0)
    g = M.metric(ch, xy)
    e = initial_frame(g)
    return (np.swapaxes(e, 1, 2) @ g @ np.asarray(v0, float))[0]


def one_form_action(M, h, x0: PointOnManifold, v0, f, t, cfg, threads=1):
    """Monte Carlo estimate of E df_{x_t}(W_t v0) (one-form semigroup on df)."""
    from .sde import SamplerConfig, sample_functionals

    run = SamplerConfig(**{**cfg.__dict__, "t_max": t, "record_stride": max(1, int(round(t / cfg.dt)))})
    obs = {"one_form": one_form_observable(M, f, v0_in_frame(M, x0, v0))}
    rec = sample_functionals(M, h, x0, None, run, threads=threads, observables=obs)
    i = int(np.argmin(np.abs(rec.times - t)))
    return MCEstimate(float(rec.mean["one_form"][i]), float(rec.stderr["one_form"][i]), rec.n_used)


@dataclass
class PotentialEstimate:
    u1_mc: Optional[float]
    u1_stderr: float
    t_trunc: float
    tail_bound: float
    diverged: bool
    decay_rate_fit: float


def fit_log_slope(times, values, lo, hi):
    sel = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    if sel.sum() < 10:
        raise InsufficientDecayWindow(
            f"only {int(sel.sum())} recorded times in [{lo:g}, {hi:g}]; need 10")
    slope, _ = np.polyfit(times[sel], np.log(values[sel]), 1)
    return float(slope)


def potential_from_curve(times, fk_mean, fk_se, rate_hint=None) -> PotentialEstimate:
    t_trunc = float(times[-1])
    rate = fit_log_slope(times, fk_mean, 2.0 * t_trunc / 3.0, t_trunc)
    if rate >= -1e-3:
        return PotentialEstimate(None, float("nan"), t_trunc, float("inf"), True, rate)
    tail_rate = rate if rate_hint is None else rate_hint
    tail = float(fk_mean[-1] / -tail_rate)
    head = float(np.trapezoid(fk_mean, times))
    se = float(np.trapezoid(fk_se, times) + fk_se[-1] / -tail_rate)
    return PotentialEstimate(head + tail, se, t_trunc, tail, False, rate)


def potential_kernel_mc(M, h, x0, cfg, t_trunc, rate_hint=None, threads=1,
                        rho_shift=0.0) -> PotentialEstimate:
    """U1(x0) = integral over t of E exp(-1/2 int_0^t rho^h), with an
    exponential tail beyond ``t_trunc``; divergence is reported, never
    truncated away."""
    from .sde import SamplerConfig, sample_functionals

    if t_trunc < 1:
        raise ValueError("t_trunc must be at least 1")
    run = SamplerConfig(**{**cfg.__dict__, "t_max": t_trunc})
    rec = sample_functionals(M, h, x0, None, run, threads=threads, rho_shift=rho_shift)
    return potential_from_curve(rec.times, rec.mean["fk_weight"], rec.stderr["fk_weight"],
                                rate_hint)
