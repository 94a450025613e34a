"""Manifold catalog and local Riemannian geometry in chart coordinates.

All batch routines take ``ch`` (chart ids, shape ``(N,)``) and ``xy``
(chart coordinates, shape ``(N, 2)``).  Index conventions::

    dg[n, k, i, j]    = d_k g_ij
    gamma[n, k, i, j] = Gamma^k_ij
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import mesh
from .errors import ChartBoundary, DomainError, NonSPDMetric
from .expr import ScalarFieldExpr, as_expr

FD_STEP1 = 1e-4
FD_STEP2 = 1e-3
SPHERE_SWITCH = 1.5

_E = np.eye(2)


# ---------------------------------------------------------------------------
# generic coordinate formulas

def inv2(g):
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    out = np.empty_like(g)
    out[..., 0, 0] = g[..., 1, 1]
    out[..., 1, 1] = g[..., 0, 0]
    out[..., 0, 1] = -g[..., 0, 1]
    out[..., 1, 0] = -g[..., 1, 0]
    return out / det[..., None, None]


def det2(g):
    return g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]


def christoffel_from(g, dg):
    """Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)."""
    ginv = inv2(g)
    # t[n, l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    t = np.einsum("nijl->nlij", dg) + np.einsum("njil->nlij", dg) - dg
    return 0.5 * np.einsum("nkl,nlij->nkij", ginv, t)


def fd_metric_grad(metric_fn, xy, step=FD_STEP1):
    dg = np.empty(xy.shape[:1] + (2, 2, 2))
    for k in range(2):
        off = step * _E[k]
        dg[:, k] = (metric_fn(xy + off) - metric_fn(xy - off)) / (2 * step)
    return dg


def fd_christoffel(metric_fn, xy, step=FD_STEP1):
    return christoffel_from(metric_fn(xy), fd_metric_grad(metric_fn, xy, step))


def ricci_from(gamma, dgamma):
    """R_ij = d_k G^k_ij - d_j G^k_ik + G^k_kl G^l_ij - G^k_jl G^l_ik.

    ``dgamma[n, m, k, i, j]`` = d_m Gamma^k_ij.
    """
    term1 = np.einsum("nkkij->nij", dgamma)
    term2 = np.einsum("njkik->nij", dgamma)
    term3 = np.einsum("nkkl,nlij->nij", gamma, gamma)
    term4 = np.einsum("nkjl,nlik->nij", gamma, gamma)
    ric = term1 - term2 + term3 - term4
    return 0.5 * (ric + np.swapaxes(ric, 1, 2))


def fd_ricci(metric_fn, xy, step1=FD_STEP1, step2=FD_STEP2):
    """Ricci tensor by central differences of finite-difference Christoffels."""
    gamma = fd_christoffel(metric_fn, xy, step1)
    dgamma = np.empty(xy.shape[:1] + (2, 2, 2, 2))
    for m in range(2):
        off = step2 * _E[m]
        dgamma[:, m] = (fd_christoffel(metric_fn, xy + off, step1)
                        - fd_christoffel(metric_fn, xy - off, step1)) / (2 * step2)
    return ricci_from(gamma, dgamma)


def smallest_generalized_eig(s, g):
    """Smallest root of det(s - lam g) = 0 for symmetric 2x2 ``s`` and SPD ``g``.

    Reduced to a standard symmetric problem with the Cholesky factor of g;
    the hypot form stays accurate when the two roots nearly coincide.
    """
    l11 = np.sqrt(g[..., 0, 0])
    l21 = g[..., 1, 0] / l11
    l22 = np.sqrt(g[..., 1, 1] - l21 * l21)
    # m = L^-1 s L^-T
    p = s[..., 0, 0] / (l11 * l11)
    t = (s[..., 0, 1] - l21 * p * l11) / l11
    q = t / l22
    r = (s[..., 1, 1] - 2 * l21 * (s[..., 0, 1] / l11) + l21 * l21 * p) / (l22 * l22)
    return 0.5 * (p + r) - np.hypot(0.5 * (p - r), q)


# ---------------------------------------------------------------------------
# points, charts, models

@dataclass(frozen=True)
class PointOnManifold:
    chart_id: int
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))


@dataclass(frozen=True)
class Chart:
    id: int
    domain: dict
    metric_at: Callable
    transitions: dict = field(default_factory=dict)

    def contains(self, coords, margin=0.0):
        x = np.asarray(coords, dtype=float)
        if self.domain["kind"] == "disk":
            return float(np.hypot(*x)) + margin < self.domain["radius"]
        return True  # periodic rectangle: coordinates are wrapped


class ManifoldModel:
    """Base class: a closed 2-D Riemannian manifold given in charts."""

    name = "manifold"
    dim = 2
    known_pi1_finite: Optional[bool] = None

    def __init__(self, fd_step1=FD_STEP1, fd_step2=FD_STEP2):
        self.fd_step1 = fd_step1
        self.fd_step2 = fd_step2

    # subclasses implement: metric, metric_grad, christoffel, ricci,
    # field_uv, normalize, default_probes, params, charts
    def metric_grad(self, ch, xy):
        return fd_metric_grad(lambda p: self.metric(ch, p), xy, self.fd_step1)

    def christoffel(self, ch, xy):
        return christoffel_from(self.metric(ch, xy), self.metric_grad(ch, xy))

    def ricci(self, ch, xy):
        return fd_ricci(lambda p: self.metric(ch, p), xy, self.fd_step1, self.fd_step2)

    def chart_point(self, p: PointOnManifold):
        return np.array([p.chart_id]), np.array([p.coords], dtype=float)

    def describe(self):
        return {"name": self.name, **self.params()}


class Sphere(ManifoldModel):
    """Round sphere of radius ``radius`` with two stereographic charts.

    Chart 0 projects from the south pole (origin = north pole), chart 1 from
    the north pole; the transition is x -> x/|x|^2.  Scalar fields are
    written in u = longitude, v = colatitude, so the height function is
    ``cos(v)``.
    """

    name = "sphere"
    known_pi1_finite = True

    def __init__(self, radius=1.0, switch=SPHERE_SWITCH, **kw):
        super().__init__(**kw)
        self.radius = float(radius)
        self.switch = float(switch)
        inversion = lambda x: np.asarray(x, float) / np.dot(x, x)
        self.charts = [
            Chart(c, {"kind": "disk", "radius": 3.0 * switch},
                  lambda x: self.metric(np.zeros(1, int), np.atleast_2d(x))[0],
                  {1 - c: inversion})
            for c in (0, 1)
        ]

    def params(self):
        return {"radius": self.radius}

    def _conformal(self, xy):
        r2 = np.einsum("ni,ni->n", xy, xy)
        return r2, 4.0 * self.radius ** 2 / (1.0 + r2) ** 2

    def metric(self, ch, xy):
        _, lam = self._conformal(xy)
        return lam[:, None, None] * _E

    def metric_grad(self, ch, xy):
        r2, lam = self._conformal(xy)
        dlam = -4.0 * lam[:, None] * xy / (1.0 + r2)[:, None]
        return dlam[:, :, None, None] * _E

    def christoffel(self, ch, xy):
        # g = e^{2 phi} I: Gamma^k_ij = d_i phi d_jk + d_j phi d_ik - d_k phi d_ij
        r2, _ = self._conformal(xy)
        p, q = (-2.0 * xy / (1.0 + r2)[:, None]).T
        gam = np.empty((len(xy), 2, 2, 2))
        gam[:, 0, 0, 0] = p
        gam[:, 0, 0, 1] = gam[:, 0, 1, 0] = q
        gam[:, 0, 1, 1] = -p
        gam[:, 1, 0, 0] = -q
        gam[:, 1, 0, 1] = gam[:, 1, 1, 0] = p
        gam[:, 1, 1, 1] = q
        return gam

    def ricci(self, ch, xy):
        return self.metric(ch, xy) / self.radius ** 2

    def field_uv(self, ch, xy, need=("u", "v")):
        lon = colat = 0.0
        if "v" in need:
            colat = 2.0 * np.arctan(np.hypot(xy[:, 0], xy[:, 1]))
            colat = np.where(ch == 0, colat, np.pi - colat)
        if "u" in need:
            lon = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2 * np.pi)
        return lon, colat

    def normalize(self, ch, xy, frames=None):
        r2 = np.einsum("ni,ni->n", xy, xy)
        flip = r2 > self.switch ** 2
        if not flip.any():
            return ch, xy, frames
        ch = np.where(flip, 1 - ch, ch)
        xf = xy[flip]
        rf = r2[flip]
        if frames is not None:
            jac = (rf[:, None, None] * _E - 2.0 * np.einsum("ni,nj->nij", xf, xf)) \
                / (rf ** 2)[:, None, None]
            frames = frames.copy()
            frames[flip] = jac @ frames[flip]
        xy = xy.copy()
        xy[flip] = xf / rf[:, None]
        return ch, xy, frames

    def embed(self, ch, xy):
        r2 = np.einsum("ni,ni->n", xy, xy)
        out = np.empty((len(xy), 3))
        out[:, :2] = 2.0 * xy / (1.0 + r2)[:, None]
        z = (1.0 - r2) / (1.0 + r2)
        out[:, 2] = np.where(ch == 0, z, -z)
        return self.radius * out

    def from_embedding(self, xyz):
        p = np.asarray(xyz, float) / np.linalg.norm(xyz, axis=1, keepdims=True)
        ch = np.where(p[:, 2] >= 0, 0, 1)
        denom = np.where(ch == 0, 1.0 + p[:, 2], 1.0 - p[:, 2])
        return ch, p[:, :2] / denom[:, None]

    def point_from_angles(self, lon, colat):
        xyz = np.array([[np.sin(colat) * np.cos(lon), np.sin(colat) * np.sin(lon), np.cos(colat)]])
        ch, xy = self.from_embedding(xyz)
        return PointOnManifold(int(ch[0]), xy[0])

    def default_probes(self, rng=None):
        return [PointOnManifold(0, (0.0, 0.0)), PointOnManifold(1, (0.0, 0.0)),
                PointOnManifold(0, (1.0, 0.0))]

    def area(self):
        return 4 * np.pi * self.radius ** 2


class _PeriodicRectangle(ManifoldModel):
    known_pi1_finite = False

    def __init__(self, Lu, Lv, **kw):
        super().__init__(**kw)
        self.Lu, self.Lv = float(Lu), float(Lv)
        self.charts = [Chart(0, {"kind": "rectangle", "Lu": self.Lu, "Lv": self.Lv},
                             lambda x: self.metric(np.zeros(1, int), np.atleast_2d(x))[0])]

    @property
    def periods(self):
        return np.array([self.Lu, self.Lv])

    def field_uv(self, ch, xy, need=("u", "v")):
        return xy[:, 0], xy[:, 1]

    def normalize(self, ch, xy, frames=None):
        return ch, np.mod(xy, self.periods), frames

    def default_probes(self, rng=None):
        return [PointOnManifold(0, (0.0, 0.0)), PointOnManifold(0, (self.Lu / 2, self.Lv / 2))]


class FlatTorus(_PeriodicRectangle):
    name = "flat_torus"

    def __init__(self, Lu=2 * np.pi, Lv=2 * np.pi, **kw):
        super().__init__(Lu, Lv, **kw)

    def params(self):
        return {"Lu": self.Lu, "Lv": self.Lv}

    def metric(self, ch, xy):
        return np.broadcast_to(_E, (len(xy), 2, 2)).copy()

    def metric_grad(self, ch, xy):
        return np.zeros((len(xy), 2, 2, 2))

    def christoffel(self, ch, xy):
        return np.zeros((len(xy), 2, 2, 2))

    def ricci(self, ch, xy):
        return np.zeros((len(xy), 2, 2))


class ExpressionMetric(_PeriodicRectangle):
    """User metric ``g11, g12, g22`` on the periodic rectangle [0,Lu) x [0,Lv)."""

    name = "expression_metric"
    known_pi1_finite = None

    def __init__(self, g11, g12, g22, Lu=2 * np.pi, Lv=2 * np.pi, check_resolution=64,
                 known_pi1_finite=None, **kw):
        super().__init__(Lu, Lv, **kw)
        self.g11, self.g12, self.g22 = as_expr(g11), as_expr(g12), as_expr(g22)
        self.known_pi1_finite = known_pi1_finite
        self._validate(check_resolution)

    def params(self):
        return {"Lu": self.Lu, "Lv": self.Lv, "g11": str(self.g11),
                "g12": str(self.g12), "g22": str(self.g22)}

    def _entries(self, xy):
        vals, bad = [], np.zeros(len(xy), bool)
        for e in (self.g11, self.g12, self.g22):
            val, b = e.evaluate_array(xy[:, 0], xy[:, 1])
            vals.append(val)
            bad |= b
        return vals, bad

    def metric(self, ch, xy):
        (a, b, c), _ = self._entries(xy)
        g = np.empty((len(xy), 2, 2))
        g[:, 0, 0], g[:, 0, 1], g[:, 1, 0], g[:, 1, 1] = a, b, b, c
        return g

    def _validate(self, n):
        uu, vv = np.meshgrid(np.arange(n) * self.Lu / n, np.arange(n) * self.Lv / n, indexing="ij")
        xy = np.column_stack([uu.ravel(), vv.ravel()])
        (a, b, c), bad = self._entries(xy)
        if bad.any():
            i = int(np.argmax(bad))
            raise DomainError(f"metric undefined at (u, v) = {tuple(xy[i])}")
        tr = a + c
        lam_min = 0.5 * (tr - np.sqrt((a - c) ** 2 + 4 * b * b))
        if (lam_min <= 1e-10).any():
            i = int(np.argmin(lam_min))
            raise NonSPDMetric(
                f"metric not positive definite at (u, v) = {tuple(xy[i])}: "
                f"smallest eigenvalue {lam_min[i]:.3e}")
        s = np.linspace(0.0, 1.0, 17)
        left = np.column_stack([np.zeros_like(s), s * self.Lv])
        right = np.column_stack([np.full_like(s, self.Lu), s * self.Lv])
        bottom = np.column_stack([s * self.Lu, np.zeros_like(s)])
        top = np.column_stack([s * self.Lu, np.full_like(s, self.Lv)])
        ch = np.zeros(len(s), int)
        for p, q in ((left, right), (bottom, top)):
            if np.abs(self.metric(ch, p) - self.metric(ch, q)).max() > 1e-9:
                raise NonSPDMetric("metric entries are not periodic on the rectangle")

    def default_probes(self, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        pts = rng.uniform(size=(4, 2)) * self.periods
        return [PointOnManifold(0, p) for p in pts]


def make_manifold(kind: str, **params) -> ManifoldModel:
    kinds = {"sphere": Sphere, "flat_torus": FlatTorus, "expression_metric": ExpressionMetric}
    if kind not in kinds:
        raise ValueError(f"unknown manifold kind {kind!r}")
    return kinds[kind](**params)


# ---------------------------------------------------------------------------
# scalar fields

def field_values(M: ManifoldModel, f: ScalarFieldExpr, ch, xy):
    f = as_expr(f)
    u, v = M.field_uv(ch, xy, f.variables)
    val, bad = f.evaluate_array(u, v)
    if val.shape != (len(xy),):
        val = np.broadcast_to(val, (len(xy),)).copy()
        bad = np.broadcast_to(bad, (len(xy),)).copy()
    return val, bad


def field_jet(M: ManifoldModel, f: ScalarFieldExpr, ch, xy, step1=None, step2=None):
    """Value, coordinate gradient and coordinate second derivatives of ``f``.

    Returns ``(value, grad (N,2), d2 (N,2,2), bad)`` using central
    differences (``step1`` for first, ``step2`` for second derivatives).
    """
    step1 = M.fd_step1 if step1 is None else step1
    step2 = M.fd_step2 if step2 is None else step2
    n = len(xy)
    f = as_expr(f)
    if f.is_constant:
        val, bad = field_values(M, f, ch, xy)
        return val, np.zeros((n, 2)), np.zeros((n, 2, 2)), bad
    a, b = step1, step2
    # 4th-order (Richardson) differences on spacings (a, 2a) and (b, 2b)
    offsets = np.array([[0, 0], [a, 0], [-a, 0], [0, a], [0, -a],
                        [2 * a, 0], [-2 * a, 0], [0, 2 * a], [0, -2 * a],
                        [b, 0], [-b, 0], [0, b], [0, -b],
                        [2 * b, 0], [-2 * b, 0], [0, 2 * b], [0, -2 * b],
                        [b, b], [b, -b], [-b, b], [-b, -b],
                        [2 * b, 2 * b], [2 * b, -2 * b], [-2 * b, 2 * b], [-2 * b, -2 * b]],
                       dtype=float)
    pts = (xy[None, :, :] + offsets[:, None, :]).reshape(-1, 2)
    vals, bads = field_values(M, f, np.tile(ch, len(offsets)), pts)
    f_ = vals.reshape(len(offsets), n)
    bad = bads.reshape(len(offsets), n).any(axis=0)
    val = f_[0]
    grad = np.empty((n, 2))
    grad[:, 0] = (8 * (f_[1] - f_[2]) - f_[5] + f_[6]) / (12 * a)
    grad[:, 1] = (8 * (f_[3] - f_[4]) - f_[7] + f_[8]) / (12 * a)
    f_ = f_[4:]
    d2 = np.empty((n, 2, 2))
    c = 12 * b * b
    d2[:, 0, 0] = (16 * (f_[5] + f_[6]) - 30 * val - f_[9] - f_[10]) / c
    d2[:, 1, 1] = (16 * (f_[7] + f_[8]) - 30 * val - f_[11] - f_[12]) / c
    s1 = f_[13] - f_[14] - f_[15] + f_[16]
    s2 = f_[17] - f_[18] - f_[19] + f_[20]
    d2[:, 0, 1] = d2[:, 1, 0] = (16 * s1 - s2) / (4 * c)
    return val, grad, d2, bad


@dataclass
class LocalGeometry:
    """Batch of per-point geometric data (one row per point)."""

    g: np.ndarray
    ginv: np.ndarray
    gamma: np.ndarray
    ric: np.ndarray
    hess_h: np.ndarray
    dh: np.ndarray        # covector d_i h
    grad_h: np.ndarray    # vector (grad h)^i
    h_value: np.ndarray
    rho_h: np.ndarray
    bad: np.ndarray


def local_geometry(M: ManifoldModel, h: ScalarFieldExpr, ch, xy, rho_shift=0.0):
    h = as_expr(h)
    g = M.metric(ch, xy)
    ginv = inv2(g)
    gamma = M.christoffel(ch, xy)
    ric = M.ricci(ch, xy)
    hval, dh, d2h, bad = field_jet(M, h, ch, xy)
    hess = d2h - gamma[:, 0] * dh[:, 0, None, None] - gamma[:, 1] * dh[:, 1, None, None]
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    grad_h = (ginv @ dh[:, :, None])[:, :, 0]
    rho = smallest_generalized_eig(ric - 2.0 * hess, g) + rho_shift
    bad = bad | ~np.isfinite(rho)
    return LocalGeometry(g, ginv, gamma, ric, hess, dh, grad_h, hval, rho, bad)


# ---------------------------------------------------------------------------
# single-point API

@dataclass
class MetricJet:
    g: np.ndarray
    g_inv: np.ndarray
    dg: np.ndarray
    christoffel: np.ndarray
    sqrt_det_g: float


@dataclass
class CurvaturePack:
    ric: np.ndarray
    hess_h: np.ndarray
    grad_h: np.ndarray
    rho_h: float
    h_value: float


def _check_point(M, x: PointOnManifold, margin):
    chart = M.charts[x.chart_id]
    if not chart.contains(x.coords, margin):
        raise ChartBoundary(f"point {x.coords} is within {margin} of the edge of chart {x.chart_id}")
    ch, xy = M.chart_point(x)
    g = M.metric(ch, xy)[0]
    if np.linalg.eigvalsh(g)[0] <= 1e-10:
        raise NonSPDMetric(f"metric not positive definite at {x}")
    return ch, xy


def metric_jet(M: ManifoldModel, x: PointOnManifold) -> MetricJet:
    ch, xy = _check_point(M, x, 2 * M.fd_step1)
    g = M.metric(ch, xy)[0]
    return MetricJet(g, inv2(g), M.metric_grad(ch, xy)[0], M.christoffel(ch, xy)[0],
                     float(np.sqrt(det2(g))))


def ricci(M: ManifoldModel, x: PointOnManifold) -> np.ndarray:
    ch, xy = _check_point(M, x, 4 * M.fd_step2)
    return M.ricci(ch, xy)[0]


def curvature_pack(M, h, x: PointOnManifold) -> CurvaturePack:
    h = as_expr(h)
    ch, xy = _check_point(M, x, 4 * M.fd_step2)
    geo = local_geometry(M, h, ch, xy)
    if geo.bad[0]:
        raise DomainError(f"h = {h} is undefined near {x}")
    return CurvaturePack(geo.ric[0], geo.hess_h[0], geo.grad_h[0], float(geo.rho_h[0]),
                         float(geo.h_value[0]))


def hessian_h(M, h, x: PointOnManifold) -> np.ndarray:
    return curvature_pack(M, h, x).hess_h


def rho_h(M, h, x: PointOnManifold) -> float:
    """Curvature floor: min over g-unit v of (Ric - 2 Hess h)(v, v)."""
    return curvature_pack(M, h, x).rho_h


# ---------------------------------------------------------------------------
# h-volume

def grid_nodes(M: _PeriodicRectangle, n: int, offset=0.0):
    du, dv = M.Lu / n, M.Lv / n
    uu, vv = np.meshgrid((np.arange(n) + offset) * du, (np.arange(n) + offset) * dv,
                         indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()]), du * dv


def h_volume(M: ManifoldModel, h, resolution: int) -> float:
    """Quadrature of the integral of e^{2h} dvol over M."""
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    h = as_expr(h)
    if isinstance(M, Sphere):
        verts, faces = mesh.icosphere(mesh.level_for_resolution(resolution))
        ch, xy = M.from_embedding(verts)
        hv, bad = field_values(M, h, ch, xy)
        if bad.any():
            raise DomainError(f"h = {h} undefined on the quadrature mesh")
        areas = mesh.spherical_triangle_areas(verts, faces) * M.radius ** 2
        weight = np.exp(2 * hv)
        return float(np.sum(areas * weight[faces].mean(axis=1)))
    xy, cell = grid_nodes(M, resolution, offset=0.5)
    ch = np.zeros(len(xy), int)
    hv, bad = field_values(M, h, ch, xy)
    if bad.any():
        raise DomainError(f"h = {h} undefined on the quadrature grid")
    sqrt_det = np.sqrt(det2(M.metric(ch, xy)))
    return float(np.sum(np.exp(2 * hv) * sqrt_det) * cell)
