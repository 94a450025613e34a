"""Deterministic engine: self-adjoint discretisation of Delta^h.

The operator is stored as ``L = W^{-1} K`` where ``W = diag(w)`` holds the
node weights (e^{2h} times the local volume) and ``K`` is sparse, symmetric
and negative semidefinite with ``K 1 = 0``.  Hence ``L`` is symmetric in
``<f, g>_w = sum_i w_i f_i g_i`` and annihilates constants exactly.  All
solves run on the symmetric form ``S = W^{-1/2} K W^{-1/2}``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RectBivariateSpline
from scipy.spatial import cKDTree

from . import mesh
from .errors import CriterionFails, MeshTooCoarse, NoConvergence
from .expr import as_expr
from .geometry import (ManifoldModel, PointOnManifold, Sphere, det2, field_values, inv2,
                       local_geometry)

log = logging.getLogger(__name__)

DENSE_MAX_NODES = 1024
EIG_TOL = 1e-8
MAX_ITER = 10_000


@dataclass
class DiscreteOperator:
    manifold: ManifoldModel
    h: object
    ch: np.ndarray            # node chart ids
    xy: np.ndarray            # node chart coordinates
    w: np.ndarray             # node weights
    K: sp.csr_matrix          # symmetric stiffness (negative semidefinite)
    rho_vec: np.ndarray
    meta: dict
    positions: Optional[np.ndarray] = None   # embedding (sphere) for lookup
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return len(self.w)

    @property
    def L(self):
        return sp.diags(1.0 / self.w) @ self.K

    def symmetric(self, potential=False):
        key = ("S", potential)
        if key not in self._cache:
            d = sp.diags(1.0 / np.sqrt(self.w))
            s = (d @ self.K @ d).tocsr()
            s = 0.5 * (s + s.T)
            if potential:
                s = s - sp.diags(self.rho_vec)
            self._cache[key] = s.tocsc()
        return self._cache[key]

    def apply(self, f, potential=False):
        out = self.K @ f / self.w
        if potential:
            out = out - self.rho_vec * f
        return out

    def inner(self, f, g):
        return float(np.sum(self.w * f * g))

    def with_rho_shift(self, c):
        return DiscreteOperator(self.manifold, self.h, self.ch, self.xy, self.w, self.K,
                                self.rho_vec + c, {**self.meta, "rho_shift": self.meta.get("rho_shift", 0.0) + c},
                                self.positions)


@dataclass
class EigenResult:
    mu_top: float
    lambda0: float
    eigvec: np.ndarray
    residual: float

    @property
    def criterion_holds(self):
        return self.lambda0 < -1e-6


# ---------------------------------------------------------------------------
# construction

def _grid_operator(M, h, n, rho_shift):
    du, dv = M.Lu / n, M.Lv / n
    idx = np.arange(n * n).reshape(n, n)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")

    def coeff(pts):
        ch = np.zeros(len(pts), int)
        g = M.metric(ch, pts)
        hv, bad = field_values(M, h, ch, pts)
        if bad.any():
            raise MeshTooCoarse(f"h = {h} is undefined on the grid")
        return np.sqrt(det2(g)) * np.exp(2 * hv), inv2(g)

    nodes = np.column_stack([ii.ravel() * du, jj.ravel() * dv])
    vol, _ = coeff(nodes)
    w = vol * du * dv

    rows, cols, vals = [], [], []

    def edge(a, b, c):
        rows.extend([a, b, a, b])
        cols.extend([b, a, a, b])
        vals.extend([c, c, -c, -c])

    # u-faces between (i, j) and (i+1, j)
    mid_u = nodes + np.array([0.5 * du, 0.0])
    s, gi = coeff(mid_u)
    edge(idx.ravel(), np.roll(idx, -1, axis=0).ravel(), s * gi[:, 0, 0] * dv / du)
    mid_v = nodes + np.array([0.0, 0.5 * dv])
    s, gi = coeff(mid_v)
    edge(idx.ravel(), np.roll(idx, -1, axis=1).ravel(), s * gi[:, 1, 1] * du / dv)

    # cross terms g^{12}: per-cell bilinear form on the 4 corners
    centers = nodes + np.array([0.5 * du, 0.5 * dv])
    s, gi = coeff(centers)
    a12 = s * gi[:, 0, 1] * du * dv
    if np.any(np.abs(a12) > 0):
        c00 = idx.ravel()
        c10 = np.roll(idx, -1, axis=0).ravel()
        c01 = np.roll(idx, -1, axis=1).ravel()
        c11 = np.roll(np.roll(idx, -1, axis=0), -1, axis=1).ravel()
        corners = [c00, c10, c01, c11]
        p = np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * du)   # d/du stencil
        q = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * dv)   # d/dv stencil
        block = np.outer(p, q) + np.outer(q, p)
        for a in range(4):
            for b in range(4):
                rows.append(corners[a])
                cols.append(corners[b])
                vals.append(-a12 * block[a, b])
    rows = np.concatenate([np.atleast_1d(r) for r in rows])
    cols = np.concatenate([np.atleast_1d(c) for c in cols])
    vals = np.concatenate([np.atleast_1d(v) for v in vals])
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))
    ch = np.zeros(n * n, int)
    meta = {"kind": "grid", "resolution": n, "du": du, "dv": dv}
    return ch, nodes, w, K, meta, None


def _sphere_operator(M: Sphere, h, level, rho_shift):
    verts, faces = mesh.icosphere(level)
    pos = verts * M.radius
    ch, xy = M.from_embedding(verts)
    hv, bad = field_values(M, h, ch, xy)
    if bad.any():
        raise MeshTooCoarse(f"h = {h} is undefined on the mesh")

    a, b, c = (pos[faces[:, k]] for k in range(3))

    def cot(p, q, r):
        # cotangent of the angle at p in triangle (p, q, r)
        u, v = q - p, r - p
        return np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)

    cot_a, cot_b, cot_c = cot(a, b, c), cot(b, c, a), cot(c, a, b)
    # edge opposite each angle
    e_i = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    e_j = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    wt = 0.5 * np.concatenate([cot_a, cot_b, cot_c])
    mid = verts[e_i] + verts[e_j]
    mch, mxy = M.from_embedding(mid)
    hm, bad = field_values(M, h, mch, mxy)
    if bad.any():
        raise MeshTooCoarse(f"h = {h} is undefined on the mesh")
    wt = wt * np.exp(2 * hm)
    n = len(verts)
    off = sp.coo_matrix((np.concatenate([wt, wt]), (np.concatenate([e_i, e_j]),
                                                     np.concatenate([e_j, e_i]))), shape=(n, n)).tocsr()
    K = off - sp.diags(np.asarray(off.sum(axis=1)).ravel())
    if (off.data < 0).any():
        log.info("%d negative cotangent weights at level %d", int((off.data < 0).sum()), level)

    area = mesh.flat_triangle_areas(pos, faces)
    dual = np.bincount(faces.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    w = np.exp(2 * hv) * dual
    if (np.asarray(off.sum(axis=1)).ravel() <= 0).any():
        raise MeshTooCoarse("a vertex has no positive coupling")
    meta = {"kind": "icosphere", "subdivision": level, "radius": M.radius}
    return ch, xy, w, K.tocsr(), meta, pos


def build_operator(M: ManifoldModel, h, resolution: int = 64, subdivision: int = 5,
                   rho_shift: float = 0.0) -> DiscreteOperator:
    """Discretise Delta^h (divergence form, e^{2h}-weighted) and sample rho^h at nodes."""
    h = as_expr(h)
    if isinstance(M, Sphere):
        if subdivision < 2:
            raise ValueError("subdivision must be at least 2")
        ch, xy, w, K, meta, pos = _sphere_operator(M, h, subdivision, rho_shift)
    else:
        if resolution < 16:
            raise ValueError("resolution must be at least 16")
        ch, xy, w, K, meta, pos = _grid_operator(M, h, resolution, rho_shift)
    if (w <= 0).any():
        raise MeshTooCoarse("non-positive dual weight")
    geo = local_geometry(M, h, ch, xy, rho_shift)
    meta = {**meta, "manifold": M.name, "h": str(h), "rho_shift": rho_shift}
    op = DiscreteOperator(M, h, ch, xy, w, K, geo.rho_h, meta, pos)
    op._cache["geo"] = geo
    return op


def node_geometry(op: DiscreteOperator):
    if "geo" not in op._cache:
        op._cache["geo"] = local_geometry(op.manifold, op.h, op.ch, op.xy)
    return op._cache["geo"]


# ---------------------------------------------------------------------------
# spectra

def _upper_bound(op, potential):
    # <(S - diag rho) x, x> <= -min(rho) |x|^2
    return -float(op.rho_vec.min()) if potential else 0.0


def top_eigenpairs(op: DiscreteOperator, k=1, potential=True):
    """Largest ``k`` eigenvalues of 1/2 (L - diag rho) (or 1/2 L), descending,
    with w-normalised eigenvectors."""
    s = op.symmetric(potential)
    sigma = _upper_bound(op, potential) + 0.1
    if op.n <= 400:
        vals, vecs = np.linalg.eigh(s.toarray())
        vals, vecs = vals[::-1][:k], vecs[:, ::-1][:, :k]
    else:
        try:
            # fixed start vector: ARPACK's default one is random
            v0 = np.random.default_rng(0).standard_normal(op.n)
            vals, vecs = spla.eigsh(s, k=k, sigma=sigma, which="LM", tol=0, maxiter=MAX_ITER,
                                    v0=v0)
        except spla.ArpackNoConvergence as exc:
            raise NoConvergence("eigsh did not converge") from exc
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
    res = np.linalg.norm(s @ vecs - vecs * vals, axis=0)
    eig = vecs / np.sqrt(op.w)[:, None]
    return 0.5 * vals, eig, 0.5 * res


def top_eigen(op: DiscreteOperator) -> EigenResult:
    """Top of spec(1/2 (Delta^h - rho^h)); lambda0 = 2 mu_top."""
    vals, vecs, res = top_eigenpairs(op, 1, potential=True)
    v = vecs[:, 0]
    if v.sum() < 0:
        v = -v
    residual = float(res[0])
    if residual > EIG_TOL:
        raise NoConvergence("top eigenpair residual above tolerance", residual)
    mu = float(vals[0])
    return EigenResult(mu, 2.0 * mu, v, residual)


def laplacian_eigenvalues(op: DiscreteOperator, k: int):
    """Largest ``k`` eigenvalues of L (i.e. of Delta^h), descending."""
    vals, _, _ = top_eigenpairs(op, k, potential=False)
    return 2.0 * vals


# ---------------------------------------------------------------------------
# semigroups

def semigroup_apply(op: DiscreteOperator, f, t, potential=False):
    """e^{t (L - [diag rho]) / 2} f for scalar or array ``t``.

    Returns shape ``(n,)`` for scalar ``t``, ``(len(t), n)`` otherwise.
    """
    f = np.asarray(f, float)
    times = np.atleast_1d(np.asarray(t, float))
    if (times < 0).any():
        raise ValueError("t must be non-negative")
    sw = np.sqrt(op.w)
    g = sw * f
    s = op.symmetric(potential)
    if op.n <= DENSE_MAX_NODES:
        key = ("eigh", potential)
        if key not in op._cache:
            op._cache[key] = np.linalg.eigh(s.toarray())
        lam, vec = op._cache[key]
        coef = vec.T @ g
        out = np.array([vec @ (np.exp(0.5 * tt * lam) * coef) for tt in times])
    else:
        # chain over sorted increments: e^{t2 A} g = e^{(t2 - t1) A} e^{t1 A} g
        order = np.argsort(times)
        out = np.empty((len(times), op.n))
        cur, t_prev = g, 0.0
        for i in order:
            if times[i] > t_prev:
                cur = spla.expm_multiply(0.5 * (times[i] - t_prev) * s, cur)
                t_prev = times[i]
            out[i] = cur
    out = out / sw
    out[times == 0] = f  # exact identity, no sqrt(w) round trip
    return out[0] if np.ndim(t) == 0 else out


def potential_resolvent(op: DiscreteOperator, eig: Optional[EigenResult] = None):
    """U1 = 2 (rho^h - Delta^h)^{-1} 1 at the nodes."""
    eig = top_eigen(op) if eig is None else eig
    if eig.lambda0 >= -1e-6:
        raise CriterionFails(
            f"lambda0 = {eig.lambda0:.3e} >= -1e-6: potential kernel diverges")
    a = (sp.diags(op.w * op.rho_vec) - op.K).tocsc()
    rhs = 2.0 * op.w
    u = spla.spsolve(a, rhs)
    res = np.max(np.abs(0.5 * (op.rho_vec * u - op.apply(u)) - 1.0))
    if res > 1e-8:
        raise NoConvergence("resolvent residual above tolerance", res)
    return u


# ---------------------------------------------------------------------------
# evaluation at arbitrary points

def _sphere_fit(op, field, p, k=24):
    if "tree" not in op._cache:
        op._cache["tree"] = cKDTree(op.positions / op.manifold.radius)
    p = np.asarray(p, float)
    p = p / np.linalg.norm(p)
    _, nb = op._cache["tree"].query(p, k=k)
    e1 = np.cross(p, [0.0, 0.0, 1.0] if abs(p[2]) < 0.9 else [1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(p, e1)
    q = op.positions[nb] / op.manifold.radius - p
    s, t = q @ e1, q @ e2
    basis = np.column_stack([np.ones_like(s), s, t, s * s, s * t, t * t])
    coef, *_ = np.linalg.lstsq(basis, field[nb], rcond=None)
    return p, e1, e2, coef


def _grid_spline(op, field):
    n = op.meta["resolution"]
    du, dv = op.meta["du"], op.meta["dv"]
    pad = 3
    grid = np.asarray(field).reshape(n, n)
    grid = np.pad(grid, pad, mode="wrap")
    uu = (np.arange(n + 2 * pad) - pad) * du
    vv = (np.arange(n + 2 * pad) - pad) * dv
    return RectBivariateSpline(uu, vv, grid, kx=3, ky=3, s=0)


def evaluate_at(op: DiscreteOperator, field, points):
    """Interpolate a node field at manifold points."""
    M = op.manifold
    out = []
    if isinstance(M, Sphere):
        for pt in points:
            ch, xy = M.chart_point(pt)
            p, e1, e2, coef = _sphere_fit(op, field, M.embed(ch, xy)[0] / M.radius)
            out.append(coef[0])
        return np.array(out)
    spline = _grid_spline(op, field)
    for pt in points:
        u, v = np.mod(pt.coords, M.periods)
        out.append(float(spline(u, v)[0, 0]))
    return np.array(out)


def directional_derivative(op: DiscreteOperator, field, x0: PointOnManifold, v0, eps=1e-3):
    """(F(exp_x0(eps v0)) - F(exp_x0(-eps v0))) / (2 eps) for the interpolated field F."""
    M = op.manifold
    v0 = np.asarray(v0, float)
    ch, xy = M.chart_point(x0)
    if isinstance(M, Sphere):
        p = M.embed(ch, xy)[0] / M.radius
        # push v0 to the embedding: d(embed) by central difference in the chart
        d = 1e-6
        jac = np.column_stack([
            (M.embed(ch, xy + d * e) - M.embed(ch, xy - d * e))[0] / (2 * d * M.radius)
            for e in np.eye(2)])
        vec = jac @ v0
        speed = np.linalg.norm(vec)
        unit = vec / speed
        p0, e1, e2, coef = _sphere_fit(op, field, p)

        def quad(x):
            q = x - p0
            s, t = q @ e1, q @ e2
            return coef @ np.array([1.0, s, t, s * s, s * t, t * t])

        ang = eps * speed
        plus = np.cos(ang) * p + np.sin(ang) * unit
        minus = np.cos(ang) * p - np.sin(ang) * unit
        return (quad(plus) - quad(minus)) / (2 * eps)
    spline = _grid_spline(op, field)
    a = np.mod(xy[0] + eps * v0, M.periods)
    b = np.mod(xy[0] - eps * v0, M.periods)
    return float(spline(*a)[0, 0] - spline(*b)[0, 0]) / (2 * eps)


# ---------------------------------------------------------------------------
# Witten conjugation

@dataclass
class WittenReport:
    eig_weighted: np.ndarray
    eig_witten: np.ndarray
    max_rel_diff: float
    pointwise_residual: float
    passed: bool


def witten_potential(op: DiscreteOperator):
    """|dh|^2_g + Delta h at the nodes (Delta = Laplace-Beltrami)."""
    geo = node_geometry(op)
    dh2 = np.einsum("ni,ni->n", geo.dh, geo.grad_h)
    lap_h = np.einsum("nij,nji->n", geo.ginv, geo.hess_h)
    return dh2, lap_h


def _smooth_test_field(op, rng):
    M = op.manifold
    if isinstance(M, Sphere):
        x = op.positions / M.radius
        c = rng.normal(size=6)
        return (c[0] * x[:, 0] + c[1] * x[:, 1] + c[2] * x[:, 2]
                + c[3] * x[:, 0] * x[:, 1] + c[4] * x[:, 2] ** 2 + c[5] * x[:, 1] * x[:, 2])
    u = 2 * np.pi * op.xy[:, 0] / M.Lu
    v = 2 * np.pi * op.xy[:, 1] / M.Lv
    c = rng.normal(size=4)
    return c[0] * np.cos(u) + c[1] * np.sin(v) + c[2] * np.cos(u + v) + c[3] * np.sin(2 * u - v)


def witten_check(M: ManifoldModel, h, resolution=64, subdivision=5, k=10, tol=0.01,
                 seed=0) -> WittenReport:
    """Compare 1/2 Delta^h (weighted) with 1/2 (Delta - |dh|^2 - Delta h) (unweighted)."""
    h = as_expr(h)
    op_h = build_operator(M, h, resolution, subdivision)
    op_0 = build_operator(M, "0", resolution, subdivision)
    dh2, lap_h = witten_potential(op_h)
    b_op = DiscreteOperator(M, op_0.h, op_0.ch, op_0.xy, op_0.w, op_0.K, dh2 + lap_h,
                            op_0.meta, op_0.positions)
    ev_l = 2.0 * top_eigenpairs(op_h, k, potential=False)[0]
    ev_b = 2.0 * top_eigenpairs(b_op, k, potential=True)[0]
    # eigenvalues of 1/2 L and 1/2 B
    ev_l, ev_b = 0.5 * ev_l, 0.5 * ev_b
    scale = np.maximum(np.abs(ev_l), np.abs(ev_l[1]) if k > 1 else 1.0)
    rel = np.abs(ev_l - ev_b) / scale
    rng = np.random.default_rng(seed)
    f = _smooth_test_field(op_h, rng)
    hv = node_geometry(op_h).h_value
    lhs = op_h.apply(f)
    rhs = np.exp(-hv) * b_op.apply(np.exp(hv) * f, potential=True)
    pointwise = float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(lhs)), 1e-300))
    return WittenReport(ev_l, ev_b, float(rel.max()), pointwise, bool(rel.max() <= tol))


# ---------------------------------------------------------------------------
# exports

def export_matrix_market(op: DiscreteOperator, path):
    import io as _io

    import scipy.io

    from .io import atomic_write_text

    buf = _io.BytesIO()
    scipy.io.mmwrite(buf, op.L.tocoo(), comment="Delta^h discretisation (w-symmetric)")
    atomic_write_text(path, buf.getvalue().decode("ascii"))
