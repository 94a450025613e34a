import json

import numpy as np
import pytest

from myerskit.criterion import (NumericsConfig, bakry_inequality_check, check, decay_rate_fit,
                                default_test_field, random_smooth_field)
from myerskit.errors import InsufficientDecayWindow
from myerskit.expr import as_expr
from myerskit.geometry import FlatTorus, PointOnManifold, Sphere
from myerskit.io import to_json
from myerskit.sde import SamplerConfig
from myerskit.spectral import build_operator


def _small(**kw):
    sde = SamplerConfig(dt=0.02, t_max=6.0, n_paths=300, record_stride=5, seed=3)
    base = dict(sde=sde, resolution=32, subdivision=3, n_bakry_pairs=3)
    base.update(kw)
    return NumericsConfig(**base)


@pytest.fixture(scope="module")
def sphere_report():
    return check(Sphere(), "0", _small())


@pytest.fixture(scope="module")
def torus_report():
    return check(FlatTorus(), "0", _small())


def test_sphere_verdict(sphere_report):
    rep = sphere_report
    assert rep.criterion_holds and rep.consistency
    assert rep.lambda0 == pytest.approx(-1.0, abs=1e-3)
    assert rep.lambda0 == 2 * rep.mu_top
    assert rep.u1_spectral["sup"] == pytest.approx(2.0, abs=1e-6)
    assert rep.u1_spectral["inf"] == pytest.approx(2.0, abs=1e-6)
    assert rep.negative_rho_fraction == 0.0
    assert rep.known_pi1_finite is True
    for entry in rep.u1_mc:
        assert entry["u1_spectral_at_probe"] == pytest.approx(2.0, abs=1e-6)
        assert entry["n_excluded"] == 0
    assert rep.decay_fit["fitted_rate"] == pytest.approx(-0.5, rel=1e-6)
    assert all(r["passed"] for r in rep.identity_residuals.values()), rep.identity_residuals


def test_torus_verdict(torus_report):
    rep = torus_report
    assert not rep.criterion_holds
    assert rep.lambda0 == pytest.approx(0.0, abs=1e-8)
    assert rep.u1_spectral["diverged"] and rep.u1_spectral["sup"] is None
    assert rep.consistency and rep.known_pi1_finite is False
    assert rep.identity_residuals["bakry"]["passed"] is None
    assert any("proves nothing" in n for n in rep.notes)
    assert rep.decay_fit["fitted_rate"] == pytest.approx(0.0, abs=1e-12)


def test_report_serialises(sphere_report, torus_report):
    for rep in (sphere_report, torus_report):
        d = rep.to_dict()
        assert d["criterion_holds"] == (d["lambda0"] < -1e-6)
        assert json.loads(to_json(d))["lambda0"] == d["lambda0"]
        rows = rep.residual_rows()
        assert [r[0] for r in rows] == list(rep.identity_residuals)


@pytest.mark.parametrize("a", [0.3, 1.0])
def test_tilted_sphere_reports_negative_rho(a):
    rep = check(Sphere(), f"{a}*cos(v)", _small(sde=SamplerConfig(dt=0.05, t_max=2.0,
                                                                    n_paths=50, seed=1)))
    assert rep.criterion_holds
    assert rep.u1_spectral["sup"] > rep.u1_spectral["inf"] > 0
    # rho^h = 1 + 2 a z on S^2 is negative where z < -1/(2a): area fraction (1 - 1/(2a)) / 2
    expected = max(0.0, (1 - 1 / (2 * a)) / 2)
    assert rep.negative_rho_fraction == pytest.approx(expected, abs=0.02)


def test_rho_shift_hook():
    cfg = _small(sde=SamplerConfig(dt=0.05, t_max=1.0, n_paths=20))
    base = check(Sphere(), "0.3*cos(v)", cfg)
    cfg.rho_shift = 0.2
    shifted = check(Sphere(), "0.3*cos(v)", cfg)
    assert shifted.lambda0 == pytest.approx(base.lambda0 - 0.2, abs=1e-8)


def test_threads_do_not_change_the_report():
    kw = dict(sde=SamplerConfig(dt=0.05, t_max=1.0, n_paths=200, seed=5))
    a = check(Sphere(), "0.3*cos(v)", _small(**kw)).to_dict()
    b = check(Sphere(), "0.3*cos(v)", _small(threads=3, **kw)).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_explicit_probes_are_used():
    probes = [PointOnManifold(0, (0.0, 0.0)), PointOnManifold(1, (0.2, 0.1))]
    rep = check(Sphere(), "0", _small(sde=SamplerConfig(dt=0.05, t_max=1.0, n_paths=10),
                                      probes=probes))
    assert [e["probe"]["chart_id"] for e in rep.u1_mc] == [0, 1]


def test_decay_rate_fit():
    t = np.linspace(0, 10, 101)
    curves = np.array([np.exp(-0.5 * t), 0.5 * np.exp(-0.5 * t)])
    se = np.full_like(curves, 1e-6)
    assert decay_rate_fit(t, curves, se, (5, 10)) == pytest.approx(-0.5, rel=1e-10)
    flat = np.ones((1, len(t)))
    assert decay_rate_fit(t, flat, 0 * flat, (5, 10)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InsufficientDecayWindow):
        decay_rate_fit(t[:5], curves[:, :5], se[:, :5], (0.2, 0.4))
    with pytest.raises(InsufficientDecayWindow):
        decay_rate_fit(t, curves, np.full_like(curves, 1.0), (5, 10))


@pytest.fixture(scope="module")
def tilted_op():
    return build_operator(Sphere(), "0.3*cos(v)", subdivision=4)


def test_bakry_trivial_cases(tilted_op):
    # P_t 1 = 1 up to rounding in the eigendecomposition
    rec = bakry_inequality_check(tilted_op, "1", "cos(v)", 1.0, 3.0)
    assert abs(rec.lhs) <= 1e-12 and rec.rhs == 0.0 and rec.holds
    rec = bakry_inequality_check(tilted_op, "sin(v)*cos(u)", "1", 1.0, 3.0)
    assert abs(rec.lhs) <= 1e-8 and rec.rhs == 0.0 and rec.holds


def test_bakry_holds_on_tilted_sphere(tilted_op):
    from myerskit.spectral import potential_resolvent

    c = float(potential_resolvent(tilted_op).max())
    rec = bakry_inequality_check(tilted_op, "cos(u)*sin(v)", "cos(v)", 1.0, c)
    assert rec.holds and rec.slack > 0
    assert rec.slack == pytest.approx(rec.rhs - abs(rec.lhs))


def test_random_fields_are_valid_expressions():
    rng = np.random.default_rng(0)
    for M in (Sphere(), FlatTorus(3.0, 5.0)):
        f = random_smooth_field(M, rng)
        assert as_expr(str(f)) == f
        assert default_test_field(M).variables <= {"u", "v"}
