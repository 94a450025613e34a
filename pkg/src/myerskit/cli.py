"""Command-line driver.

Usage::

    myerskit {inspect,sample,fk,spectrum,check,validate} [--config PATH]
             [--seed N] [--threads N] [--out DIR] [--quick]

Config file (JSON, unknown keys rejected)::

    {
      "manifold": {"kind": "sphere", "radius": 1.0},
      "h": "0.3*cos(v)",
      "f": "cos(v)",
      "sde": {"dt": 0.01, "t_max": 10, "n_paths": 2000, "seed": 0,
              "record_stride": 5, "chart_switch_margin": 1.5},
      "spectral": {"resolution": 64, "subdivision": 5},
      "probes": [{"chart_id": 0, "coords": [0.0, 0.0]}],
      "rho_shift": 0.0,
      "output": "out"
    }

``manifold.kind`` is one of ``sphere`` (``radius``), ``flat_torus``
(``Lu``, ``Lv``) or ``expression_metric`` (``g11``, ``g12``, ``g22``,
``Lu``, ``Lv``, optional ``known_pi1_finite``). On the sphere the field
variables are longitude ``u`` and colatitude ``v``.

Report JSON (``check``) keys: manifold, h, lambda0, mu_top,
criterion_holds, u1_spectral {sup, inf, mean}, u1_mc (per probe), h_volume,
negative_rho_fraction, decay_fit {fitted_rate, window, relative_error},
identity_residuals {eq1_eq3, eq4, eq5, feynman_kac, witten, bakry},
known_pi1_finite, consistency, notes.

Exit codes: 0 success, 1 config error, 2 numerical failure,
3 validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import spectral
from .criterion import NumericsConfig, check, default_test_field
from .errors import (ConfigError, DomainError, ExprSyntaxError, MyersError, NonSPDMetric,
                     UnknownIdentifier)
from .expr import ScalarFieldExpr, parse
from .geometry import ManifoldModel, PointOnManifold, local_geometry, make_manifold
from .io import atomic_write_csv, atomic_write_json
from .sde import SamplerConfig, dump_paths, sample_functionals

log = logging.getLogger("myerskit")

SUBCOMMANDS = ("inspect", "sample", "fk", "spectrum", "check", "validate")

_MANIFOLD_KEYS = {
    "sphere": {"kind", "radius"},
    "flat_torus": {"kind", "Lu", "Lv"},
    "expression_metric": {"kind", "g11", "g12", "g22", "Lu", "Lv", "known_pi1_finite"},
}
_SDE_KEYS = {"dt", "t_max", "n_paths", "seed", "record_stride", "chart_switch_margin"}
_SPECTRAL_KEYS = {"resolution", "subdivision"}
_TOP_KEYS = {"manifold", "h", "f", "sde", "spectral", "probes", "rho_shift", "output"}


@dataclass
class RunConfig:
    manifold: dict
    h: ScalarFieldExpr
    f: Optional[ScalarFieldExpr] = None
    sde: SamplerConfig = field(default_factory=lambda: SamplerConfig(dt=1e-2, t_max=10.0,
                                                                       n_paths=2000, record_stride=5))
    resolution: int = 64
    subdivision: int = 5
    probes: Optional[list] = None
    rho_shift: float = 0.0
    output: str = "."

    def build_manifold(self) -> ManifoldModel:
        return build_manifold(self.manifold)

    def numerics(self, threads=1) -> NumericsConfig:
        return NumericsConfig(sde=self.sde, resolution=self.resolution,
                              subdivision=self.subdivision, probes=self.probes,
                              threads=threads, rho_shift=self.rho_shift)


def _reject_unknown(obj, allowed, path):
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", path or "<root>")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})",
                              f"{path}.{key}" if path else key)


def _number(obj, key, path, kind=float, positive=True, default=None):
    if key not in obj:
        return default
    val = obj[key]
    where = f"{path}.{key}" if path else key
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError("expected a number", where)
    if kind is int and (not float(val).is_integer()):
        raise ConfigError("expected an integer", where)
    if not math.isfinite(val):
        raise ConfigError("expected a finite number", where)
    if positive and not val > 0:
        raise ConfigError("must be positive", where)
    return kind(val)


def _expr(obj, key, path, required=False):
    where = f"{path}.{key}" if path else key
    if key not in obj:
        if required:
            raise ConfigError("missing required key", where)
        return None
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (str, int, float)):
        raise ConfigError("expected an expression string or number", where)
    try:
        return parse(str(val) if isinstance(val, str) else repr(float(val)))
    except (ExprSyntaxError, UnknownIdentifier) as exc:
        raise ConfigError(str(exc), where) from exc


def build_manifold(spec: dict) -> ManifoldModel:
    kind = spec["kind"]
    params = {k: v for k, v in spec.items() if k != "kind"}
    try:
        return make_manifold(kind, **params)
    except (NonSPDMetric, DomainError) as exc:
        raise ConfigError(str(exc), "manifold") from exc


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON config; errors name the offending key path."""
    _reject_unknown(data, _TOP_KEYS, "")
    if "manifold" not in data:
        raise ConfigError("missing required key", "manifold")
    man = data["manifold"]
    if not isinstance(man, dict):
        raise ConfigError("expected an object", "manifold")
    kind = man.get("kind")
    if kind not in _MANIFOLD_KEYS:
        raise ConfigError(f"unknown kind {kind!r} (allowed: {', '.join(sorted(_MANIFOLD_KEYS))})",
                          "manifold.kind")
    _reject_unknown(man, _MANIFOLD_KEYS[kind], "manifold")
    manifold = {"kind": kind}
    for key in ("radius", "Lu", "Lv"):
        if key in man:
            manifold[key] = _number(man, key, "manifold")
    if kind == "expression_metric":
        for key in ("g11", "g12", "g22"):
            manifold[key] = _expr(man, key, "manifold", required=True)
        if "known_pi1_finite" in man:
            if not isinstance(man["known_pi1_finite"], bool):
                raise ConfigError("expected a boolean", "manifold.known_pi1_finite")
            manifold["known_pi1_finite"] = man["known_pi1_finite"]

    h = _expr(data, "h", "") or parse("0")
    f = _expr(data, "f", "")

    sde = data.get("sde", {})
    _reject_unknown(sde, _SDE_KEYS, "sde")
    defaults = RunConfig.__dataclass_fields__["sde"].default_factory()
    sde_kw = {
        "dt": _number(sde, "dt", "sde", default=defaults.dt),
        "t_max": _number(sde, "t_max", "sde", default=defaults.t_max),
        "n_paths": _number(sde, "n_paths", "sde", int, default=defaults.n_paths),
        "seed": _number(sde, "seed", "sde", int, positive=False, default=defaults.seed),
        "record_stride": _number(sde, "record_stride", "sde", int, default=defaults.record_stride),
        "chart_switch_margin": _number(sde, "chart_switch_margin", "sde",
                                       default=defaults.chart_switch_margin),
    }
    if sde_kw["seed"] < 0:
        raise ConfigError("must be non-negative", "sde.seed")
    try:
        sampler = SamplerConfig(**sde_kw)
    except ValueError as exc:
        raise ConfigError(str(exc), "sde") from exc

    spec = data.get("spectral", {})
    _reject_unknown(spec, _SPECTRAL_KEYS, "spectral")
    resolution = _number(spec, "resolution", "spectral", int, default=64)
    subdivision = _number(spec, "subdivision", "spectral", int, default=5)

    probes = None
    if "probes" in data:
        if not isinstance(data["probes"], list) or not data["probes"]:
            raise ConfigError("expected a non-empty list", "probes")
        probes = []
        for i, p in enumerate(data["probes"]):
            where = f"probes[{i}]"
            _reject_unknown(p, {"chart_id", "coords"}, where)
            coords = p.get("coords")
            if (not isinstance(coords, list) or len(coords) != 2
                    or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in coords)):
                raise ConfigError("expected a list of two numbers", f"{where}.coords")
            cid = p.get("chart_id", 0)
            if cid not in (0, 1) or isinstance(cid, bool) or (kind != "sphere" and cid != 0):
                raise ConfigError("invalid chart id", f"{where}.chart_id")
            probes.append(PointOnManifold(int(cid), tuple(float(c) for c in coords)))

    rho_shift = _number(data, "rho_shift", "", positive=False, default=0.0)
    output = data.get("output", ".")
    if not isinstance(output, str):
        raise ConfigError("expected a path string", "output")
    return RunConfig(manifold, h, f, sampler, resolution, subdivision, probes, rho_shift, output)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return parse_config({"manifold": {"kind": "sphere"}})
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", path) from exc
    return parse_config(data)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    sde = dict(cfg.sde.__dict__)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("must be non-negative", "--seed")
        sde["seed"] = args.seed
    if args.quick:
        sde["n_paths"] = min(sde["n_paths"], 1000)
        cfg.resolution = min(cfg.resolution, 32)
        cfg.subdivision = min(cfg.subdivision, 4)
    cfg.sde = SamplerConfig(**sde)
    if args.out is not None:
        cfg.output = args.out
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_inspect(cfg: RunConfig, M, threads):
    op = spectral.build_operator(M, cfg.h, cfg.resolution, cfg.subdivision, cfg.rho_shift)
    geo = local_geometry(M, cfg.h, op.ch, op.xy, cfg.rho_shift)
    rows = [[int(op.ch[i]), op.xy[i, 0], op.xy[i, 1], geo.rho_h[i],
             geo.ric[i, 0, 0], geo.ric[i, 0, 1], geo.ric[i, 1, 1],
             geo.hess_h[i, 0, 0], geo.hess_h[i, 0, 1], geo.hess_h[i, 1, 1],
             geo.g[i, 0, 0], geo.g[i, 0, 1], geo.g[i, 1, 1]] for i in range(op.n)]
    path = os.path.join(cfg.output, "curvature.csv")
    atomic_write_csv(path, ["chart_id", "x1", "x2", "rho_h", "ric11", "ric12", "ric22",
                            "hess11", "hess12", "hess22", "g11", "g12", "g22"], rows)
    print(f"rho_h: min {geo.rho_h.min():.6g}, max {geo.rho_h.max():.6g} over {op.n} nodes -> {path}")


def _probes(cfg, M):
    return cfg.probes or M.default_probes(np.random.default_rng(cfg.sde.seed))


def cmd_sample(cfg: RunConfig, M, threads):
    x0 = _probes(cfg, M)[0]
    directory = os.path.join(cfg.output, "paths")
    files = dump_paths(M, cfg.h, x0, cfg.sde, directory, n_dump=min(cfg.sde.n_paths, 16))
    print(f"wrote {len(files)} path files to {directory}")


def cmd_fk(cfg: RunConfig, M, threads):
    f = cfg.f or default_test_field(M)
    rows = []
    for k, p in enumerate(_probes(cfg, M)):
        rec = sample_functionals(M, cfg.h, p, f, cfg.sde, threads=threads, rho_shift=cfg.rho_shift)
        for i, t in enumerate(rec.times):
            rows.append([k, p.chart_id, p.coords[0], p.coords[1], t,
                         rec.mean["fk_weight"][i], rec.stderr["fk_weight"][i],
                         rec.mean["w_norm"][i], rec.stderr["w_norm"][i],
                         rec.mean["f"][i], rec.stderr["f"][i]])
    path = os.path.join(cfg.output, "fk_curves.csv")
    atomic_write_csv(path, ["probe", "chart_id", "x1", "x2", "t", "fk_mean", "fk_stderr",
                            "w_norm_mean", "w_norm_stderr", "f_mean", "f_stderr"], rows)
    print(f"wrote {path}")


def cmd_spectrum(cfg: RunConfig, M, threads):
    op = spectral.build_operator(M, cfg.h, cfg.resolution, cfg.subdivision, cfg.rho_shift)
    eig = spectral.top_eigen(op)
    k = min(10, op.n - 2)
    mus, _, res = spectral.top_eigenpairs(op, k, potential=True)
    lap = spectral.laplacian_eigenvalues(op, k)
    wr = spectral.witten_check(M, cfg.h, cfg.resolution, cfg.subdivision)
    rows = [[i, mus[i], lap[i], wr.eig_weighted[i], wr.eig_witten[i]] for i in range(k)]
    atomic_write_csv(os.path.join(cfg.output, "eigenvalues.csv"),
                     ["index", "mu", "laplacian_h", "witten_weighted", "witten_conjugated"], rows)
    out = {"n_nodes": op.n, "mu_top": eig.mu_top, "lambda0": eig.lambda0,
           "residual": eig.residual, "criterion_holds": eig.criterion_holds,
           "mu": mus, "laplacian_h": lap,
           "witten": {"max_rel_diff": wr.max_rel_diff, "pointwise_residual": wr.pointwise_residual,
                      "passed": wr.passed}}
    atomic_write_json(os.path.join(cfg.output, "spectrum.json"), out)
    print(f"mu_top {eig.mu_top:.10g}, lambda0 {eig.lambda0:.10g}, "
          f"criterion {'holds' if eig.criterion_holds else 'fails'}")


def cmd_check(cfg: RunConfig, M, threads):
    rep = check(M, cfg.h, cfg.numerics(threads))
    atomic_write_json(os.path.join(cfg.output, "report.json"), rep.to_dict())
    atomic_write_csv(os.path.join(cfg.output, "residuals.csv"),
                     ["check", "residual", "tolerance", "passed", "error"], rep.residual_rows())
    print(f"lambda0 {rep.lambda0:.10g}: criterion {'holds' if rep.criterion_holds else 'fails'}"
          f" (consistency {'ok' if rep.consistency else 'VIOLATED'})")


def cmd_validate(args):
    from .validation import run_suite

    results = run_suite(quick=args.quick)
    if args.out is not None:
        atomic_write_json(os.path.join(args.out, "validation.json"),
                          [{"criterion": r.number, "title": r.title, "passed": r.passed,
                            "details": r.details} for r in results])
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 3 if failed else 0


COMMANDS = {"inspect": cmd_inspect, "sample": cmd_sample, "fk": cmd_fk,
            "spectrum": cmd_spectrum, "check": cmd_check}


def build_parser():
    parser = argparse.ArgumentParser(prog="myerskit", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override sde.seed")
        p.add_argument("--threads", type=int, default=1, help="Monte Carlo worker threads")
        p.add_argument("--out", help="output directory (overrides config 'output')")
        p.add_argument("--quick", action="store_true", help="reduced paths and resolution")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("must be at least 1", "--threads")
        if args.command == "validate":
            return cmd_validate(args)
        cfg = _apply_overrides(load_config(args.config), args)
        M = cfg.build_manifold()
        COMMANDS[args.command](cfg, M, args.threads)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MyersError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
