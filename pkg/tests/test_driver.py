import subprocess
import sys

import numpy as np
import pytest

from fosls_seaice import cli, driver
from fosls_seaice.mesh import build_structured
from fosls_seaice.scenario import BenchmarkConfig
from fosls_seaice.vtk import export_vtk, read_vtk


def small(tmp_path, **kw):
    base = dict(n=4, dt=3600.0, t_end_days=3 / 24, output_dir=str(tmp_path), output_every_hours=1.0)
    base.update(kw)
    return BenchmarkConfig(**base)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[mesh]\nn = 8\n[time]\ndt = 900\n[physics]\np_star = 30000\nwind = off\n[output]\nvtk = no\n")
    cfg = driver.load_config(path, ["time.theta=1", "mesh.n=6"])
    assert (cfg.n, cfg.dt, cfg.theta) == (6, 900.0, 1.0)
    assert cfg.params.p_star == 30000.0 and not cfg.wind_enabled and not cfg.write_vtk
    assert cfg.params.rho_ice == 900.0


def test_default_config_text_round_trips(tmp_path):
    path = tmp_path / "default.ini"
    path.write_text(driver.default_config_text())
    assert driver.load_config(path) == BenchmarkConfig()


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("[mesh]\nn = 8\n", ["mesh.bogus=1"]),
        ("[weather]\nx = 1\n", []),
        ("[time]\ndt = fast\n", []),
        ("", ["time.dt=-5"]),
        ("", ["novalue"]),
        ("[output]\nvtk = maybe\n", []),
    ],
)
def test_config_errors(tmp_path, text, overrides):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(driver.ConfigError):
        driver.load_config(path, overrides)


def test_missing_config_file(tmp_path):
    with pytest.raises(driver.ConfigError):
        driver.load_config(tmp_path / "nope.ini")


def test_zero_end_time_dumps_initial_state(tmp_path):
    log = driver.run(small(tmp_path, t_end_days=0.0))
    assert log.records == []
    assert [p.name for p in log.snapshots] == ["state_t000.0000d.vtk"]
    assert driver.read_run_log(tmp_path / "run_log.csv") == []
    _, _, data = read_vtk(log.snapshots[0])
    assert np.all(data["A"] == 1.0)
    assert np.all(data["velocity"] == 0.0)


def test_initial_stress_is_rest_state():
    sim = driver.setup(BenchmarkConfig(n=4))
    # constant thickness: RT spaces reproduce the constant rest stress exactly
    sim.state, sim.tracers = driver.initial_state(sim.problem, height=lambda x: np.full(np.shape(x)[:-1], 0.3))
    f = driver.vertex_fields(sim)
    P = 27.5e3 * 0.3
    assert np.allclose(f["sigma_row1"], [-P / 2, 0.0], rtol=0, atol=1e-10 * P)
    assert np.allclose(f["sigma_row2"], [0.0, -P / 2], rtol=0, atol=1e-10 * P)


def test_zero_forcing_is_a_fixed_point(tmp_path):
    cfg = small(tmp_path, wind_enabled=False, ocean_enabled=False, write_vtk=False)
    sim = driver.setup(cfg)
    # uniform thickness: the oscillating default H is not an equilibrium
    sim.state, sim.tracers = driver.initial_state(sim.problem, height=lambda x: np.full(np.shape(x)[:-1], 0.3))
    A0, H0 = sim.tracers.A.copy(), sim.tracers.H.copy()
    log = driver.run(cfg, sim=sim)
    assert len(log.records) == 3
    assert np.abs(sim.state.u).max() <= 1e-9
    assert np.abs(sim.tracers.A - A0).max() <= 1e-9
    assert np.abs(sim.tracers.H - H0).max() <= 1e-9


def test_run_log_contents(tmp_path):
    log = driver.run(small(tmp_path))
    rows = driver.read_run_log(tmp_path / "run_log.csv")
    assert len(rows) == len(log.records) == 3
    assert list(rows[0]) == driver.LOG_COLUMNS
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert np.all(np.diff([r["time_days"] for r in rows]) > 0)
    assert all(r["phases"] == "advect>momentum" for r in rows)
    for r in rows:
        assert 0.0 <= r["min_A"] <= r["max_A"] <= 1.0 and r["min_H"] >= 0.0
        assert np.isfinite([r["F_m"], r["F_c"], r["F_e"]]).all()
    assert [p.name for p in log.snapshots] == [driver.snapshot_name(h / 24) for h in range(4)]
    assert (tmp_path / "timings.csv").read_text().startswith("step,wall_time_s")


def test_run_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    driver.run(small(a))
    driver.run(small(b))
    assert (a / "run_log.csv").read_bytes() == (b / "run_log.csv").read_bytes()
    for f in sorted(a.glob("*.vtk")):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_schema_mismatch(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("step,time\n1,2\n")
    with pytest.raises(ValueError):
        driver.read_run_log(p)


def test_vtk_single_cell_mesh(tmp_path):
    m = build_structured(1)
    path = export_vtk(tmp_path / "m.vtk", m.vertices, m.triangles, {"s": np.arange(4.0), "u": np.ones((4, 2))})
    text = path.read_text()
    assert "POINTS 4" in text and "CELLS 2 8" in text and "CELL_TYPES 2" in text
    assert "SCALARS s double 1" in text and "VECTORS u double" in text
    pts, cells, data = read_vtk(path)
    assert np.array_equal(pts[:, :2], m.vertices) and np.all(pts[:, 2] == 0)
    assert np.array_equal(cells, m.triangles)
    assert data["u"].shape == (4, 3) and np.all(data["u"][:, 2] == 0)


def test_vtk_round_trip_exact(tmp_path, rng):
    m = build_structured(3)
    s = rng.normal(size=m.n_vertices) * 10.0 ** rng.integers(-20, 20, m.n_vertices)
    v = rng.normal(size=(m.n_vertices, 2))
    p1 = export_vtk(tmp_path / "a.vtk", m.vertices, m.triangles, {"s": s, "v": v})
    _, _, data = read_vtk(p1)
    assert np.array_equal(data["s"], s) and np.array_equal(data["v"][:, :2], v)
    p2 = export_vtk(tmp_path / "b.vtk", m.vertices, m.triangles, {"s": s, "v": v})
    assert p1.read_bytes() == p2.read_bytes()


def test_vtk_errors(tmp_path):
    m = build_structured(1)
    with pytest.raises(OSError, match="nodir"):
        export_vtk(tmp_path / "nodir" / "x.vtk", m.vertices, m.triangles, {"s": np.zeros(4)})
    with pytest.raises(ValueError):
        export_vtk(tmp_path / "x.vtk", m.vertices, m.triangles, {"s": np.zeros(3)})


def test_cli_mesh_info(capsys):
    assert cli.main(["mesh-info", "2"]) == 0
    out = capsys.readouterr().out
    assert "vertices   9" in out and "edges      16 (8 on the boundary)" in out and "triangles  8" in out


def test_cli_config(capsys):
    assert cli.main(["config", "--set", "mesh.n=12"]) == 0
    assert "n = 12" in capsys.readouterr().out
    assert cli.main(["config", "--set", "mesh.q=1"]) == 2


def test_cli_verify_elements(capsys):
    assert cli.main(["verify", "elements"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 5


def test_cli_run_subprocess(tmp_path):
    cmd = [sys.executable, "-m", "fosls_seaice", "run", "--set", f"output.directory={tmp_path}",
           "--set", "mesh.n=2", "--set", "time.t_end_days=0.0416666666666667", "--set", "time.dt=3600"]
    res = subprocess.run(cmd, capture_output=True, text=True, timeout=120)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "run_log.csv").exists()
    bad = subprocess.run([sys.executable, "-m", "fosls_seaice", "run", str(tmp_path / "missing.ini")], capture_output=True, text=True)
    assert bad.returncode == 2
