import numpy as np
import pytest

from myerskit.errors import ExcludedPathsError
from myerskit.geometry import FlatTorus, PointOnManifold, Sphere, local_geometry
from myerskit.sde import (PathBatch, SamplerConfig, drift, dump_paths, initial_state, path_rng,
                          sample_functionals, step)


def test_config_validation():
    for bad in ({"dt": 0}, {"dt": 0.1, "t_max": 0.01}, {"n_paths": 0}, {"record_stride": 0},
                {"seed": -1}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    cfg = SamplerConfig(dt=0.1, t_max=1.0, record_stride=3)
    assert cfg.n_steps == 10
    assert cfg.record_steps().tolist() == [0, 3, 6, 9, 10]


def test_drift_examples():
    torus = FlatTorus()
    np.testing.assert_array_equal(drift(torus, "0", PointOnManifold(0, (1.0, 2.0))), [0.0, 0.0])
    np.testing.assert_allclose(drift(torus, "0.5*u", PointOnManifold(0, (1.0, 2.0))), [0.5, 0.0],
                               atol=1e-10)
    np.testing.assert_allclose(drift(Sphere(), "0", PointOnManifold(0, (0.0, 0.0))), [0.0, 0.0],
                               atol=1e-15)


def test_sphere_drift_is_laplacian_of_coordinates():
    # h = 0: the drift is (1/2) Delta x^i; in a conformal chart g = lam I,
    # Delta x^i = 0 in dimension 2, so the drift vanishes everywhere
    M = Sphere()
    for xy in ((0.3, -0.7), (1.2, 0.4)):
        np.testing.assert_allclose(drift(M, "0", PointOnManifold(0, xy)), 0.0, atol=1e-14)


def test_initial_state():
    M = Sphere()
    s = initial_state(M, PointOnManifold(0, (0.5, 0.5)))
    g = M.metric(np.zeros(1, int), np.array([[0.5, 0.5]]))[0]
    np.testing.assert_allclose(s.frame.T @ g @ s.frame, np.eye(2), atol=1e-14)
    assert s.fk_integral == 0.0 and s.t == 0.0
    np.testing.assert_array_equal(s.w_matrix, np.eye(2))


def test_flat_increments_are_standard_normal():
    n = 100_000
    dt = 1e-3
    M = FlatTorus()
    batch = PathBatch(M, "0", np.zeros(n, int), np.full((n, 2), np.pi))
    xi = np.stack([path_rng(0, 0).standard_normal(n), path_rng(0, 1).standard_normal(n)], axis=1)
    x_old = batch.xy.copy()
    batch.advance(xi, dt)
    inc = (batch.xy - x_old) / np.sqrt(dt)
    cov = np.cov(inc.T)
    assert np.abs(cov - np.eye(2)).max() <= 3 / np.sqrt(n)
    assert np.abs(inc.mean(axis=0)).max() <= 3 / np.sqrt(n)


def test_frame_stays_orthonormal_over_long_path():
    M = Sphere()
    n = 8
    batch = PathBatch(M, "0.3*cos(v)", np.zeros(n, int), np.full((n, 2), 0.2))
    rng = path_rng(1, 0)
    worst = 0.0
    for k in range(10_000):
        batch.advance(rng.standard_normal((n, 2)), 1e-3)
        if k % 50 == 0:
            g = local_geometry(M, "0", batch.ch, batch.xy).g
            gram = np.swapaxes(batch.frames, 1, 2) @ g @ batch.frames
            worst = max(worst, np.abs(gram - np.eye(2)).max())
    assert worst <= 1e-6
    assert set(np.unique(batch.ch)) <= {0, 1}
    assert np.all(np.hypot(*batch.xy.T) <= M.switch)


def test_single_step_api_and_chart_switch():
    M = Sphere()
    state = initial_state(M, PointOnManifold(0, (1.49, 0.0)))
    rng = np.random.Generator(np.random.Philox(7))
    charts = set()
    for _ in range(200):
        state = step(M, "0", state, rng, 1e-2)
        charts.add(state.x.chart_id)
        assert np.hypot(*state.x.coords) <= M.switch
    assert charts == {0, 1}
    assert state.t == pytest.approx(2.0)
    assert state.fk_integral == pytest.approx(2.0)


def test_constant_observable_and_fk_weight():
    M = Sphere()
    rec = sample_functionals(M, "0", PointOnManifold(0, (0.1, 0.2)), "1",
                             SamplerConfig(dt=0.01, t_max=2.0, n_paths=64, record_stride=50))
    np.testing.assert_array_equal(rec.mean["f"], 1.0)
    np.testing.assert_array_equal(rec.stderr["f"], 0.0)
    np.testing.assert_allclose(rec.fk_mean, np.exp(-rec.times / 2), rtol=1e-12)
    assert rec.stderr["fk_weight"].max() < 1e-14
    assert rec.n_used == 64 and rec.n_excluded == 0


def test_torus_fourier_mode_decay():
    rec = sample_functionals(FlatTorus(), "0", PointOnManifold(0, (0.0, 0.0)), "cos(u)",
                             SamplerConfig(dt=0.01, t_max=1.0, n_paths=4000, seed=2,
                                           record_stride=25))
    dev = np.abs(rec.f_mean - np.exp(-rec.times / 2))
    assert np.all(dev <= 3 * rec.stderr["f"] + 1e-12)
    np.testing.assert_array_equal(rec.fk_mean, 1.0)


def test_sphere_height_decay():
    rec = sample_functionals(Sphere(), "0", PointOnManifold(0, (0.0, 0.0)), "cos(v)",
                             SamplerConfig(dt=5e-3, t_max=1.0, n_paths=8000, seed=4,
                                           record_stride=100))
    assert abs(rec.f_mean[-1] - np.exp(-1)) <= 3 * rec.stderr["f"][-1] + 5e-3


def test_seed_and_thread_determinism():
    M = Sphere()
    cfg = SamplerConfig(dt=0.02, t_max=0.4, n_paths=9000, seed=123, record_stride=5)
    x0 = PointOnManifold(0, (0.4, -0.1))
    a = sample_functionals(M, "0.3*cos(v)", x0, "sin(v)*cos(u)", cfg)
    b = sample_functionals(M, "0.3*cos(v)", x0, "sin(v)*cos(u)", cfg)
    c = sample_functionals(M, "0.3*cos(v)", x0, "sin(v)*cos(u)", cfg, threads=3)
    for name in a.mean:
        assert a.mean[name].tobytes() == b.mean[name].tobytes() == c.mean[name].tobytes()
        assert a.stderr[name].tobytes() == c.stderr[name].tobytes()
    d = sample_functionals(M, "0.3*cos(v)", x0, "sin(v)*cos(u)",
                           SamplerConfig(**{**cfg.__dict__, "seed": 124}))
    assert not np.array_equal(a.mean["f"], d.mean["f"])


def test_paths_are_independent_of_block_layout():
    # path p depends only on (seed, p): the first 10 paths of a larger run match a 10-path run
    M = FlatTorus()
    x0 = PointOnManifold(0, (1.0, 1.0))
    cfg = SamplerConfig(dt=0.05, t_max=0.5, n_paths=10, seed=9)
    small = sample_functionals(M, "0", x0, "u", cfg, keep_raw=True)
    big = sample_functionals(M, "0", x0, "u", SamplerConfig(**{**cfg.__dict__, "n_paths": 5000}),
                             keep_raw=True)
    np.testing.assert_array_equal(small.raw["f"], big.raw["f"][:, :10])


def test_undefined_field_paths_are_counted():
    M = FlatTorus()
    cfg = SamplerConfig(dt=0.05, t_max=1.0, n_paths=200, seed=1)
    with pytest.raises(ExcludedPathsError):
        sample_functionals(M, "0", PointOnManifold(0, (0.05, 1.0)), "log(u - 0.05)", cfg)


def test_dump_paths(tmp_path):
    M = Sphere()
    cfg = SamplerConfig(dt=0.1, t_max=1.0, n_paths=100, record_stride=2)
    files = dump_paths(M, "0", PointOnManifold(0, (0.0, 0.0)), cfg, tmp_path, n_dump=3)
    assert len(files) == 3
    text = open(files[0], newline="").read()
    lines = text.split("\r\n")
    assert lines[0] == "t,chart_id,u,v,rho_h,fk_weight,w_norm"
    assert len([ln for ln in lines if ln]) == 1 + len(cfg.record_steps())
    first = lines[1].split(",")
    assert first[:2] == ["0", "0"] and float(first[5]) == 1.0


def test_weak_error_shrinks_with_step():
    # E z_1 from the north pole is e^{-1}; the Euler bias is resolvable only at
    # coarse steps (below dt ~ 0.04 it drops under the Monte Carlo noise)
    M = Sphere()
    errs, ses = [], []
    for dt in (0.08, 0.04, 0.02):
        rec = sample_functionals(M, "0", PointOnManifold(0, (0.0, 0.0)), "cos(v)",
                                 SamplerConfig(dt=dt, t_max=1.0, n_paths=50_000, seed=1,
                                               record_stride=10 ** 6))
        errs.append(rec.f_mean[-1] - np.exp(-1))
        ses.append(rec.stderr["f"][-1])
    assert abs(errs[0]) > 3 * ses[0]
    assert abs(errs[1]) < abs(errs[0])
    assert abs(errs[2]) <= abs(errs[1]) + 3 * np.hypot(ses[1], ses[2])
