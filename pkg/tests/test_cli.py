import csv
import xml.etree.ElementTree as ET

import pytest

from westervelt_fem import cli
from westervelt_fem.models import ModelKind


def _summary(path):
    with open(path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["quantity", "value"]
    return dict(rows[1:])


def _header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def test_list_scenarios(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) >= 6
    kinds = {cli.load_config(p).kind for p in cli.list_scenarios()}
    assert kinds == set(ModelKind)
    assert any("lens" in line for line in out)


def test_linear_wave_conserves_energy(tmp_path):
    assert cli.main(["run", "linear_wave_1d", "--out", str(tmp_path)]) == 0
    s = _summary(tmp_path)
    assert float(s["E0_max_relative_drift"]) < 1e-4
    assert _header(tmp_path / "solve_report.csv") == ["step", "t", "newton_iters", "newton_residual",
                                                      "degeneracy_margin"]
    assert _header(tmp_path / "snapshots.csv") == ["t", "node", "component", "x0", "u", "ut"]
    assert _header(tmp_path / "energy.csv")[:6] == ["t", "E0", "E1", "EW1", "D_grad", "D_q"]
    root = ET.parse(tmp_path / "energy.svg").getroot()
    assert root.tag.endswith("svg") and root.get("version") == "1.1"


def test_plaplace_decay_summary(tmp_path):
    assert cli.main(["run", "plaplace_decay_1d", "--out", str(tmp_path)]) == 0
    s = _summary(tmp_path)
    assert float(s["omega"]) > 0 and float(s["r_squared"]) >= 0.98


def test_fixed_point_outputs(tmp_path):
    assert cli.main(["run", "viscosity_fixed_point_1d", "--out", str(tmp_path)]) == 0
    assert _header(tmp_path / "contraction.csv") == ["outer_iteration", "difference", "ratio"]
    ET.parse(tmp_path / "contraction.svg")
    s = _summary(tmp_path)
    assert s["outer_converged"] == "True" and s["admissibility_member"] == "True"


def test_malformed_key_is_config_error(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[model]\nkind = PRESSURE_VISCOSITY\nbogus = 1\n[mesh]\nn = 8\n[time]\nT = 1\ndt = 0.5\n")
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == cli.EXIT_CONFIG
    assert not out.exists()


@pytest.mark.parametrize("body", [
    "[model]\nkind = NOPE\n[mesh]\nn = 8\n[time]\nT = 1\ndt = 0.5\n",
    "[model]\nkind = ELASTIC_COUPLED\n[mesh]\nn = 8\n[time]\nT = 1\ndt = 0.5\n",
    "[model]\nkind = PRESSURE_PLAPLACE\n[mesh]\nn = 8\n[material]\np = 0.5\n[time]\nT = 1\ndt = 0.5\n",
    "[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nn = 8\n[time]\nT = 1\ndt = 0.3\n",
    "[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nn = 8\n[time]\nT = 1\ndt = abc\n",
    "[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nn = 8\n[time]\nT = 1\ndt = 0.5\n[extra]\na = 1\n",
    "[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nn = 8\n",
    "[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nn = 8\n[time]\nT = 1\ndt = 0.5\n[initial]\nprofile = WAVY\n",
    "[model]\nkind = ACOUSTIC_COUPLED\n[mesh]\nn = 8\n[material]\nk = 1\nb = 0\n[time]\nT = 1\ndt = 0.5\n",
])
def test_invalid_configs(tmp_path, body):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(body)
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == cli.EXIT_CONFIG
    assert not out.exists()


def test_missing_file_is_config_error(tmp_path):
    assert cli.main(["run", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_degeneracy_exit_code(tmp_path, capsys):
    assert cli.main(["run", "degeneracy_1d", "--out", str(tmp_path)]) == cli.EXIT_DEGENERACY
    err = capsys.readouterr().err
    assert "t=" in err and "margin" in err
    s = _summary(tmp_path)
    assert s["status"] == "degeneracy" and "abort_margin" in s


def test_solver_failure_exit_code(tmp_path):
    cfg = tmp_path / "hard.ini"
    cfg.write_text("[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nn = 16\n[material]\nk = 1\nq = 3\n"
                   "delta = 0.5\n[initial]\nprofile = SINE\namplitude = 0.1\n[time]\nT = 0.1\ndt = 0.05\n"
                   "[solver]\nnewton_maxiter = 1\nnewton_atol = 0\nnewton_rtol = 0\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_SOLVER


def test_runs_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "potential_viscosity_1d", "--out", str(a), "--seed", "5"]) == 0
    assert cli.main(["run", "potential_viscosity_1d", "--out", str(b), "--seed", "5"]) == 0
    for name in ("energy.csv", "solve_report.csv", "snapshots.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    sa = {k: v for k, v in _summary(a).items() if k != "runtime_seconds"}
    sb = {k: v for k, v in _summary(b).items() if k != "runtime_seconds"}
    assert sa == sb


def test_refinement_study_rates(tmp_path):
    assert cli.main(["run", "manufactured_1d", "--out", str(tmp_path)]) == 0
    s = _summary(tmp_path)
    assert 1.8 <= float(s["rate_level2"]) <= 2.2


def test_elastic_and_lens_scenarios(tmp_path):
    for name in ("elastic_chain_2d", "lens_coupling_1d"):
        out = tmp_path / name
        assert cli.main(["run", name, "--out", str(out)]) == 0
        assert _summary(out)["status"] == "ok"
    with open(tmp_path / "elastic_chain_2d" / "snapshots.csv") as fh:
        rows = list(csv.reader(fh))
    assert {r[2] for r in rows[1:]} == {"0", "1"}


def test_mesh_file_and_file_profile(tmp_path):
    from westervelt_fem.mesh import interval_mesh, write_mesh_text
    import numpy as np
    m = interval_mesh(8)
    write_mesh_text(m, tmp_path / "m.txt")
    x = m.nodes[:, 0]
    np.savetxt(tmp_path / "init.csv", np.c_[0.01 * x * (1 - x), 0 * x], delimiter=",", header="u,ut",
               comments="")
    cfg = tmp_path / "f.ini"
    cfg.write_text("[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nfile = m.txt\n[initial]\nprofile = FILE\n"
                   "velocity_profile = FILE\nvelocity_amplitude = 1\nfile = init.csv\n[time]\nT = 0.1\ndt = 0.05\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_svg_plot_escapes_and_handles_empty():
    svg = cli.svg_line_plot([([0, 1], [0, 0], "a<b")], "t&t", "x", "y", logy=True)
    root = ET.fromstring(svg.split("\n", 2)[2])
    assert root.get("width") == "640"


def test_malformed_mesh_file_is_config_error(tmp_path):
    (tmp_path / "bad.msh").write_text("garbage\n")
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[model]\nkind = PRESSURE_VISCOSITY\n[mesh]\nfile = bad.msh\n"
                   "[time]\nT = 1\ndt = 0.5\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
