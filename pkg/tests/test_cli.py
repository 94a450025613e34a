import csv
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from myerskit.cli import load_config, main, parse_config
from myerskit.errors import ConfigError
from myerskit.io import atomic_write_text, csv_text, to_json

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_SDE = {"dt": 0.05, "t_max": 6.0, "n_paths": 200, "seed": 0, "record_stride": 2}


def _write(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _shrunk(tmp_path, name):
    data = json.loads((CONFIGS / name).read_text())
    data["sde"] = SMALL_SDE
    data["spectral"] = {"resolution": 32, "subdivision": 3}
    data.pop("output", None)
    return _write(tmp_path, name, data)


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = load_config(str(path))
        cfg.build_manifold()


def test_check_sphere_and_torus(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["check", "--config", _shrunk(tmp_path, "sphere.json"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["criterion_holds"] is True and rep["consistency"] is True
    assert rep["lambda0"] == pytest.approx(-1.0, abs=1e-3)
    assert "holds" in capsys.readouterr().out

    out = tmp_path / "t"
    assert main(["check", "--config", _shrunk(tmp_path, "torus.json"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["criterion_holds"] is False and rep["u1_spectral"]["diverged"] is True
    rows = list(csv.reader(open(out / "residuals.csv", newline="")))
    assert rows[0] == ["check", "residual", "tolerance", "passed", "error"]
    bakry = [r for r in rows if r[0] == "bakry"][0]
    assert bakry[1:4] == ["", "", ""] and "criterion fails" in bakry[4]


def test_report_is_byte_identical_across_runs_and_threads(tmp_path):
    cfg = _shrunk(tmp_path, "tilted_sphere.json")
    blobs = []
    for k, threads in enumerate(("1", "1", "4")):
        out = tmp_path / f"run{k}"
        assert main(["check", "--config", cfg, "--threads", threads, "--out", str(out)]) == 0
        blobs.append((out / "report.json").read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]
    out = tmp_path / "reseeded"
    main(["check", "--config", cfg, "--seed", "7", "--out", str(out)])
    assert (out / "report.json").read_bytes() != blobs[0]


@pytest.mark.parametrize("data,where", [
    ({"manifold": {"kind": "sphere"}, "sde": {"dtt": 0.1}}, "sde.dtt"),
    ({"manifold": {"kind": "sphere", "raduis": 1}}, "manifold.raduis"),
    ({"manifold": {"kind": "sphere"}, "hh": "0"}, "hh"),
    ({"manifold": {"kind": "sphere"}, "probes": [{"chart": 0, "coords": [0, 0]}]}, "probes[0].chart"),
    ({"manifold": {"kind": "sphere"}, "probes": [{"coords": [0]}]}, "probes[0].coords"),
    ({"manifold": {"kind": "sphere"}, "sde": {"n_paths": -5}}, "sde.n_paths"),
    ({"manifold": {"kind": "sphere"}, "sde": {"n_paths": 2.5}}, "sde.n_paths"),
    ({"manifold": {"kind": "sphere"}, "h": "0.3*cos(w)"}, "h"),
    ({"manifold": {"kind": "sphere"}, "h": "0.3*cos(v"}, "h"),
    ({"manifold": {"kind": "hyperbolic"}}, "manifold.kind"),
    ({"manifold": {"kind": "expression_metric", "g11": "1", "g12": "0"}}, "manifold.g22"),
    ({"manifold": {"kind": "expression_metric", "g11": "1", "g12": "0", "g22": "sin(u)"}},
     "manifold"),
    ({"manifold": {"kind": "flat_torus"}, "probes": [{"chart_id": 1, "coords": [0, 0]}]},
     "probes[0].chart_id"),
    ({"h": "0"}, "manifold"),
])
def test_config_errors_exit_one_and_name_the_key(tmp_path, capsys, data, where):
    code = main(["inspect", "--config", _write(tmp_path, "bad.json", data),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert where in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_config_error_carries_path():
    with pytest.raises(ConfigError) as info:
        parse_config({"manifold": {"kind": "sphere"}, "spectral": {"resolutoin": 64}})
    assert info.value.key_path == "spectral.resolutoin"


def test_unreadable_or_malformed_config(tmp_path):
    assert main(["check", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["check", "--config", str(bad)]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["check", "--threads", "0"]) == 1


def test_numerical_failure_exits_two(tmp_path, capsys):
    # the observable is undefined at the probe (u = 1), so every path is excluded
    data = {"manifold": {"kind": "flat_torus"}, "h": "0", "f": "log(u - 1)",
            "sde": {"dt": 0.1, "t_max": 0.5, "n_paths": 50},
            "probes": [{"chart_id": 0, "coords": [1.0, 1.0]}]}
    code = main(["fk", "--config", _write(tmp_path, "c.json", data), "--out", str(tmp_path)])
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err


def test_inspect_writes_curvature_grid(tmp_path):
    cfg = _write(tmp_path, "c.json", {"manifold": {"kind": "sphere"}, "h": "0.3*cos(v)",
                                      "spectral": {"subdivision": 2}})
    assert main(["inspect", "--config", cfg, "--out", str(tmp_path)]) == 0
    raw = (tmp_path / "curvature.csv").read_bytes()
    assert b"\r\n" in raw
    rows = list(csv.DictReader(open(tmp_path / "curvature.csv", newline="")))
    assert len(rows) == 162
    rho = np.array([float(r["rho_h"]) for r in rows])
    assert rho.min() == pytest.approx(0.4, abs=1e-6) and rho.max() == pytest.approx(1.6, abs=1e-6)


def test_sample_and_fk_outputs(tmp_path):
    cfg = _write(tmp_path, "c.json", {"manifold": {"kind": "sphere"},
                                      "sde": {"dt": 0.1, "t_max": 1.0, "n_paths": 40,
                                              "record_stride": 2},
                                      "probes": [{"chart_id": 0, "coords": [0.0, 0.0]},
                                                 {"chart_id": 1, "coords": [0.5, 0.0]}]})
    assert main(["sample", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert len(os.listdir(tmp_path / "paths")) == 16
    assert main(["fk", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "fk_curves.csv", newline="")))
    assert len(rows) == 2 * 6
    for r in rows:
        assert float(r["fk_mean"]) == pytest.approx(math.exp(-float(r["t"]) / 2), rel=1e-12)
        assert float(r["w_norm_mean"]) == pytest.approx(float(r["fk_mean"]), rel=1e-10)


def test_spectrum_outputs(tmp_path):
    cfg = _write(tmp_path, "c.json", {"manifold": {"kind": "flat_torus"}, "h": "0.5*cos(u)",
                                      "spectral": {"resolution": 32}})
    assert main(["spectrum", "--config", cfg, "--out", str(tmp_path)]) == 0
    spec = json.loads((tmp_path / "spectrum.json").read_text())
    assert spec["n_nodes"] == 1024 and spec["lambda0"] == 2 * spec["mu_top"]
    assert spec["witten"]["passed"] is True
    rows = list(csv.DictReader(open(tmp_path / "eigenvalues.csv", newline="")))
    assert len(rows) == 10
    assert float(rows[0]["laplacian_h"]) == pytest.approx(0.0, abs=1e-10)


def test_quick_flag_and_output_override(tmp_path):
    cfg = _write(tmp_path, "c.json", {"manifold": {"kind": "sphere"},
                                      "spectral": {"subdivision": 6}, "output": "nowhere"})
    assert main(["inspect", "--config", cfg, "--quick", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "curvature.csv").read_text().splitlines()
    assert len(rows) - 1 == 10 * 4 ** 4 + 2


# ---------------------------------------------------------------------------
# serialisation helpers

def test_json_floats_round_trip_at_17_digits():
    vals = [0.1, 1 / 3, -2.5e-300, 1e22, np.float64(np.pi)]
    text = to_json({"x": vals, "nan": float("nan"), "inf": -math.inf, "flag": np.bool_(True),
                    "n": np.int64(3)})
    back = json.loads(text)
    assert back["x"] == [float(v) for v in vals]
    assert back["nan"] is None and back["inf"] is None
    assert back["flag"] is True and back["n"] == 3
    assert "0.33333333333333331" in text
    assert to_json({"b": 1, "a": 2}) == to_json({"b": 1, "a": 2})


def test_csv_text_quoting_and_line_endings():
    text = csv_text(["a", "b"], [[1, 'x,"y"'], [0.5, None]])
    assert text == 'a,b\r\n1,"x,""y"""\r\n0.5,\r\n'


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "f.json"
    atomic_write_text(target, "one")
    atomic_write_text(target, "two")
    assert target.read_text() == "two"
    assert os.listdir(tmp_path / "sub") == ["f.json"]

    class Boom:
        def __str__(self):
            raise RuntimeError

    with pytest.raises(TypeError):
        atomic_write_text(target, Boom())
    assert target.read_text() == "two"
    assert os.listdir(tmp_path / "sub") == ["f.json"]
