"""h-Brownian motion (generator 1/2 Delta^h) in chart coordinates.

Euler-Maruyama with frame noise: dx = b dt + E xi sqrt(dt), where the
columns of E are g-orthonormal so that E E^T = g^{-1}, and

    b^i = -1/2 g^{jk} Gamma^i_jk + (grad h)^i.

The frame is parallel transported along each increment (Heun average of the
Christoffel terms, which converges to the Stratonovich transport) and then
re-orthonormalised in g at the new point.

Every path p draws its normals from a Philox stream keyed ``(p, seed)``.
Paths are processed in fixed-size blocks, so results do not depend on the
number of worker threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, ExcludedPathsError, StepOutOfAtlas
from .expr import ScalarFieldExpr, as_expr
from .flows import flow_propagate, generator_in_frame, op_norm2
from .geometry import ManifoldModel, PointOnManifold, field_values, local_geometry

BLOCK_SIZE = 4096
NOISE_CHUNK = 128
MAX_EXCLUDED_FRACTION = 1e-3


@dataclass
class SamplerConfig:
    dt: float = 1e-2
    t_max: float = 1.0
    seed: int = 0
    n_paths: int = 1000
    chart_switch_margin: float = 1.5
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_max >= self.dt * (1 - 1e-9):
            raise ValueError("t_max must be at least dt")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self):
        return max(1, int(round(self.t_max / self.dt)))

    def record_steps(self):
        steps = list(range(0, self.n_steps + 1, self.record_stride))
        if steps[-1] != self.n_steps:
            steps.append(self.n_steps)
        return np.array(steps)


@dataclass
class PathState:
    """State of a single path (see :class:`PathBatch` for the vectorised form)."""

    x: PointOnManifold
    t: float
    frame: np.ndarray
    fk_integral: float
    w_matrix: np.ndarray


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([path_index, seed], dtype=np.uint64)))


def _ip(a, b, g):
    return (a[:, 0] * (g[:, 0, 0] * b[:, 0] + g[:, 0, 1] * b[:, 1])
            + a[:, 1] * (g[:, 1, 0] * b[:, 0] + g[:, 1, 1] * b[:, 1]))


def _contract(gamma, dx):
    # (Gamma(dx, .))^k_j = Gamma^k_ij dx^i
    return gamma[:, :, 0, :] * dx[:, 0, None, None] + gamma[:, :, 1, :] * dx[:, 1, None, None]


def gram_schmidt(frames, g):
    """Orthonormalise the columns of each frame in the inner product g."""
    c1 = frames[:, :, 0]
    e1 = c1 / np.sqrt(_ip(c1, c1, g))[:, None]
    c2 = frames[:, :, 1]
    c2 = c2 - _ip(c2, e1, g)[:, None] * e1
    e2 = c2 / np.sqrt(_ip(c2, c2, g))[:, None]
    return np.stack([e1, e2], axis=2)


def initial_frame(g):
    return gram_schmidt(np.broadcast_to(np.eye(2), g.shape).copy(), g)


def drift_from(geo):
    return -0.5 * (geo.ginv[:, None] * geo.gamma).sum(axis=(2, 3)) + geo.grad_h


def drift(M: ManifoldModel, h, x: PointOnManifold):
    """Coordinate drift of the h-Brownian motion at ``x``."""
    ch, xy = M.chart_point(x)
    geo = local_geometry(M, as_expr(h), ch, xy)
    if geo.bad[0]:
        raise DomainError(f"h undefined near {x}")
    return drift_from(geo)[0]


class PathBatch:
    """Vectorised state of a block of paths plus cached geometry at x."""

    def __init__(self, M, h, ch, xy, rho_shift=0.0):
        self.M, self.h, self.rho_shift = M, h, rho_shift
        self.ch, self.xy = ch, xy
        self.t = 0.0
        geo = local_geometry(M, h, ch, xy, rho_shift)
        self.frames = initial_frame(geo.g)
        self.fk = np.zeros(len(xy))
        self.w = np.broadcast_to(np.eye(2), (len(xy), 2, 2)).copy()
        self.bad = geo.bad.copy()
        self._cache(geo)

    def _cache(self, geo):
        self.geo = geo
        self.rho = geo.rho_h
        self.gamma = geo.gamma
        self.drift = drift_from(geo)
        self.gen = generator_in_frame(geo, self.frames)

    def advance(self, xi, dt):
        M = self.M
        dx = self.drift * dt + (self.frames @ xi[:, :, None])[:, :, 0] * np.sqrt(dt)
        xy_new = self.xy + dx
        k1 = _contract(self.gamma, dx) @ self.frames
        gamma_new = M.christoffel(self.ch, xy_new)
        k2 = _contract(gamma_new, dx) @ (self.frames - k1)
        frames = self.frames - 0.5 * (k1 + k2)
        ch, xy, frames = M.normalize(self.ch, xy_new, frames)
        geo = local_geometry(M, self.h, ch, xy, self.rho_shift)
        with np.errstate(invalid="ignore", divide="ignore"):
            frames = gram_schmidt(frames, geo.g)
        gen = generator_in_frame(geo, frames)
        w = flow_propagate(self.w, self.gen, gen, dt)
        fk = self.fk + 0.5 * (self.rho + geo.rho_h) * dt

        bad = geo.bad | ~np.isfinite(xy).all(1) | ~np.isfinite(frames).all((1, 2)) \
            | ~np.isfinite(w).all((1, 2)) | ~np.isfinite(fk)
        newly = bad & ~self.bad
        if newly.any():
            # freeze failed paths at their last good state; they are excluded later
            keep = newly
            ch = np.where(keep, self.ch, ch)
            xy = np.where(keep[:, None], self.xy, xy)
            frames = np.where(keep[:, None, None], self.frames, frames)
            w = np.where(keep[:, None, None], self.w, w)
            fk = np.where(keep, self.fk, fk)
            geo = local_geometry(M, self.h, ch, xy, self.rho_shift)
            gen = generator_in_frame(geo, frames)
        self.bad = self.bad | bad
        self.ch, self.xy, self.frames, self.w, self.fk = ch, xy, frames, w, fk
        self.t += dt
        self._cache(geo)

    def fk_weight(self):
        return np.exp(-0.5 * self.fk)

    def w_norm(self):
        return op_norm2(self.w)


def step(M: ManifoldModel, h, state: PathState, rng: np.random.Generator, dt: float) -> PathState:
    """Advance a single path by one Euler-Maruyama step."""
    h = as_expr(h)
    ch, xy = M.chart_point(state.x)
    batch = PathBatch(M, h, ch, xy)
    batch.frames = np.asarray(state.frame, float)[None].copy()
    batch.w = np.asarray(state.w_matrix, float)[None].copy()
    batch.fk = np.array([state.fk_integral], float)
    batch.t = state.t
    batch._cache(batch.geo)
    batch.advance(rng.standard_normal((1, 2)), dt)
    if batch.bad[0]:
        raise StepOutOfAtlas(f"step from {state.x} left the atlas or hit an undefined field")
    return PathState(PointOnManifold(int(batch.ch[0]), batch.xy[0]), batch.t,
                     batch.frames[0], float(batch.fk[0]), batch.w[0])


def initial_state(M: ManifoldModel, x0: PointOnManifold) -> PathState:
    ch, xy = M.chart_point(x0)
    g = M.metric(ch, xy)
    return PathState(x0, 0.0, initial_frame(g)[0], 0.0, np.eye(2))


# ---------------------------------------------------------------------------
# ensemble engine

def standard_observables(M, f: Optional[ScalarFieldExpr]):
    obs = {
        "fk_weight": lambda b: b.fk_weight(),
        "w_norm": lambda b: b.w_norm(),
        "w_minus_fk": lambda b: b.w_norm() - b.fk_weight(),
    }
    if f is not None:
        def field_obs(b):
            val, bad = field_values(M, f, b.ch, b.xy)
            val = val.copy()
            val[bad] = np.nan
            return val
        obs["f"] = field_obs
    return obs


def _run_block(M, h, x0, cfg, first, count, observables, rho_shift):
    ch0, xy0 = M.chart_point(x0)
    batch = PathBatch(M, h, np.repeat(ch0, count), np.repeat(xy0, count, axis=0), rho_shift)
    gens = [path_rng(cfg.seed, p) for p in range(first, first + count)]
    rec_steps = cfg.record_steps()
    out = {name: np.empty((len(rec_steps), count)) for name in observables}
    bad = batch.bad.copy()

    def record(r):
        nonlocal bad
        for name, fn in observables.items():
            vals = fn(batch)
            out[name][r] = vals
            bad |= ~np.isfinite(vals)

    r = 0
    if rec_steps[0] == 0:
        record(0)
        r = 1
    n_steps = cfg.n_steps
    k = 0
    while k < n_steps:
        m = min(NOISE_CHUNK, n_steps - k)
        noise = np.stack([gen.standard_normal((m, 2)) for gen in gens], axis=1)
        for j in range(m):
            batch.advance(noise[j], cfg.dt)
            k += 1
            if r < len(rec_steps) and rec_steps[r] == k:
                record(r)
                r += 1
    bad |= batch.bad
    return out, bad, batch


@dataclass
class EnsembleRecord:
    times: np.ndarray
    mean: dict
    stderr: dict
    n_used: int
    n_excluded: int
    raw: Optional[dict] = field(default=None, repr=False)

    @property
    def f_mean(self):
        return self.mean.get("f")

    @property
    def fk_mean(self):
        return self.mean["fk_weight"]


def _block_stats(values, good):
    v = values[:, good]
    n = v.shape[1]
    if n == 0:
        z = np.zeros(values.shape[0])
        return 0, z, z
    mean = v.mean(axis=1)
    m2 = ((v - mean[:, None]) ** 2).sum(axis=1)
    return n, mean, m2


def _combine(a, b):
    # Chan et al. pairwise update; exact for constant data
    na, ma, sa = a
    nb, mb, sb = b
    if na == 0:
        return b
    if nb == 0:
        return a
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    mean = np.where(delta == 0, ma, mean)
    return n, mean, sa + sb + delta ** 2 * (na * nb / n)


def sample_functionals(M: ManifoldModel, h, x0: PointOnManifold, f, cfg: SamplerConfig,
                       threads: int = 1, observables: Optional[dict] = None,
                       rho_shift: float = 0.0, keep_raw: bool = False) -> EnsembleRecord:
    """Monte Carlo means and standard errors of path functionals.

    Always records the FK weight ``exp(-1/2 int rho^h)``, the Hessian-flow norm
    ``|W_t|`` and their pathwise difference; ``f`` (if given) is recorded as
    ``"f"``; ``observables`` maps extra names to callables of a PathBatch.
    """
    h = as_expr(h)
    f = None if f is None else as_expr(f)
    obs = standard_observables(M, f)
    obs.update(observables or {})
    M = _with_switch(M, cfg.chart_switch_margin)

    blocks = [(s, min(BLOCK_SIZE, cfg.n_paths - s)) for s in range(0, cfg.n_paths, BLOCK_SIZE)]
    job = lambda blk: _run_block(M, h, x0, cfg, blk[0], blk[1], obs, rho_shift)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(b) for b in blocks]

    n_excluded = int(sum(bad.sum() for _, bad, _ in results))
    if n_excluded > MAX_EXCLUDED_FRACTION * cfg.n_paths:
        raise ExcludedPathsError(
            f"{n_excluded} of {cfg.n_paths} paths hit an undefined field (limit 0.1%)")

    mean, stderr = {}, {}
    for name in obs:
        acc = (0, None, None)
        for out, bad, _ in results:
            acc = _combine(acc, _block_stats(out[name], ~bad))
        n, mu, m2 = acc
        mean[name] = mu
        stderr[name] = np.sqrt(m2 / max(n - 1, 1) / max(n, 1))
    times = cfg.record_steps() * cfg.dt
    raw = None
    if keep_raw:
        raw = {name: np.concatenate([out[name] for out, _, _ in results], axis=1) for name in obs}
        raw["_bad"] = np.concatenate([bad for _, bad, _ in results])
    return EnsembleRecord(times, mean, stderr, cfg.n_paths - n_excluded, n_excluded, raw)


def _with_switch(M, margin):
    if hasattr(M, "switch") and M.switch != margin:
        import copy

        M = copy.copy(M)
        M.switch = float(margin)
    return M


# ---------------------------------------------------------------------------
# path dumps

def path_observables(M):
    def uv(i):
        return lambda b: b.xy[:, i]
    return {
        "chart_id": lambda b: b.ch.astype(float),
        "u": uv(0),
        "v": uv(1),
        "rho_h": lambda b: b.rho,
        "fk_weight": lambda b: b.fk_weight(),
        "w_norm": lambda b: b.w_norm(),
    }


def dump_paths(M, h, x0, cfg: SamplerConfig, directory, n_dump=None):
    """Write one CSV per path with columns t, chart_id, u, v, rho_h, fk_weight, w_norm."""
    from .io import atomic_write_csv

    n_dump = cfg.n_paths if n_dump is None else min(n_dump, cfg.n_paths)
    run = SamplerConfig(**{**cfg.__dict__, "n_paths": n_dump})
    rec = sample_functionals(M, h, x0, None, run, observables=path_observables(M), keep_raw=True)
    cols = ["chart_id", "u", "v", "rho_h", "fk_weight", "w_norm"]
    paths = []
    os.makedirs(directory, exist_ok=True)
    for p in range(n_dump):
        rows = [[t, int(rec.raw["chart_id"][r, p])] + [rec.raw[c][r, p] for c in cols[1:]]
                for r, t in enumerate(rec.times)]
        path = os.path.join(directory, f"path_{p:05d}.csv")
        atomic_write_csv(path, ["t"] + cols, rows)
        paths.append(path)
    return paths
