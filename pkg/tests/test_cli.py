import json
import os
import subprocess
import sys

import numpy as np
import pytest

from noon_faraday import cli, metrology, tomography
from noon_faraday.config import ConfigError, RunConfig

SMALL = """
[cell]
slices = 21

[grid]
bmax_mT = 40.0
points = 5

[metrology]
sql_starts = 4

[tomography]
points = 10
starts = 3
t_int_s = 100.0

[spectra]
temperatures_C = [22.0, 83.0]
fields_mT = [0.0, 30.0]
detuning_points = 101
"""


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(SMALL)
    return str(path)


def run(args, tmp_path, name="out"):
    out = tmp_path / name
    rc = cli.main(args + ["--out", str(out)])
    return rc, out


def read_all(folder):
    return {p: (folder / p).read_bytes() for p in sorted(os.listdir(folder)) if (folder / p).is_file()}


# -- exit codes and input errors -------------------------------------------


def test_bad_flag_exit_code(capsys):
    assert cli.main(["fisher", "--nonsense"]) == cli.EXIT_INPUT
    assert cli.main([]) == cli.EXIT_INPUT


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[cell]\ncolour = 3\n")
    assert cli.main(["fisher", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert "colour" in capsys.readouterr().err
    assert cli.main(["fisher", "--config", str(tmp_path / "missing.toml")]) == cli.EXIT_INPUT
    assert cli.main(["fisher", "--fidelity", "0.2", "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT


def test_malformed_dataset_exit_code(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("B_mT,t_int_s,N_HH,N_HV,N_VV\n0,1,1,1,1\n1,1,oops,1,1\n")
    assert cli.main(["tomo", "--data", str(data), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert "line 3" in capsys.readouterr().err
    assert cli.main(["tomo", "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert cli.main(["tomo", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT


def test_too_few_points_is_numeric_failure(tmp_path, small_cfg, capsys):
    rc, _ = run(["tomo", "--simulate", "--config", small_cfg, "--grid", "5"], tmp_path)
    # --grid sets the scan grid, not the tomography grid: still runs
    assert rc == cli.EXIT_OK
    short = tmp_path / "short.csv"
    short.write_text("B_mT,t_int_s,N_HH,N_HV,N_VV\n" + "".join(f"{b},1,10,10,10\n" for b in range(4)))
    assert cli.main(["tomo", "--data", str(short), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "noon_faraday", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "tomo" in r.stdout


# -- outputs ---------------------------------------------------------------


def test_spectra_files(tmp_path, small_cfg):
    rc, out = run(["spectra", "--config", small_cfg], tmp_path)
    assert rc == 0
    csvs = sorted(os.listdir(out / "spectra"))
    assert len(csvs) == 4 and "spectrum_T83C_B30mT.csv" in csvs
    assert (out / "spectra_T22C.svg").exists() and (out / "config.toml").exists()
    rows = np.loadtxt(out / "spectra" / csvs[0], delimiter=",", skiprows=1)
    assert rows.shape == (101, 4)
    assert np.all((rows[:, 1:] >= 0) & (rows[:, 1:] <= 1))


def test_spectra_default_count(tmp_path):
    cfg = RunConfig()
    assert len(cfg.spectra.temperatures_C) * len(cfg.spectra.fields_mT) == 18


def test_config_echo_round_trips(tmp_path, small_cfg):
    rc, out = run(["fisher", "--config", small_cfg, "--temp", "65", "--phi", "0.3"], tmp_path)
    assert rc == 0
    echo = RunConfig.load(out / "config.toml")
    assert echo.cell.temperature_C == 65.0 and echo.state.phi == 0.3 and echo.grid.points == 5
    assert echo.run.out == str(out)


def test_fisher_matches_library(tmp_path, small_cfg):
    rc, out = run(["fisher", "--config", small_cfg], tmp_path)
    cfg = RunConfig.load(out / "config.toml")
    curve = cli.fisher_data(cfg)
    table = np.loadtxt(out / "fisher.csv", delimiter=",", skiprows=1)
    assert np.array_equal(table[:, 4], curve.fi)
    assert np.array_equal(table[:, -2], curve.scattering)
    payload = json.loads((out / "fisher.json").read_text())
    assert payload["fi"] == curve.fi.tolist()


def test_fringes_outputs(tmp_path, small_cfg):
    rc, out = run(["fringes", "--config", small_cfg], tmp_path)
    table = np.loadtxt(out / "fringes.csv", delimiter=",", skiprows=1)
    assert table.shape == (5, 9)
    np.testing.assert_allclose(table[:, 6:], 1000.0 * table[:, 1:4], rtol=1e-12)
    vis = json.loads((out / "fringes.json").read_text())["visibility"]
    assert set(vis) == {"HH", "HV", "VV"}


def test_advantage_matches_library(tmp_path, small_cfg):
    rc, out = run(["advantage", "--config", small_cfg, "--field", "20"], tmp_path)
    assert rc == 0
    cfg = RunConfig.load(out / "config.toml")
    lib = metrology.advantage_ratios(
        0.02, cfg.cell_config(), cli.noon_state(cfg), frequency=cfg.frequency(),
        optimize_rotation=True, efficiency=cfg.efficiency_model(), n_starts=4, seed=0, step=1e-5,
    )
    got = json.loads((out / "advantage.json").read_text())
    assert got == json.loads(cli.json_text(lib.to_dict()))


def test_tomo_simulate_outputs(tmp_path, small_cfg):
    rc, out = run(["tomo", "--simulate", "--config", small_cfg], tmp_path)
    assert rc == 0
    ds = tomography.CoincidenceDataset.read(out / "dataset.csv")
    assert len(ds) == 10
    res = json.loads((out / "tomography.json").read_text())
    assert res["truth"]["fidelity_to_reconstruction"] > 0.98
    band = res["fi_band"]
    assert band["fi_min"] <= band["fi"] <= band["fi_max"]
    # the simulated file reconstructs to the same answer
    rc2, out2 = run(["tomo", "--data", str(out / "dataset.csv"), "--config", small_cfg], tmp_path, "again")
    again = json.loads((out2 / "tomography.json").read_text())
    assert again["rho_real"] == res["rho_real"] and again["chi2"] == res["chi2"]


# -- determinism -----------------------------------------------------------


@pytest.mark.parametrize("command", [
    ["fringes"], ["fisher"], ["sql"], ["advantage", "--field", "25"], ["tomo", "--simulate"],
])
def test_repeat_and_thread_identical(tmp_path, small_cfg, command):
    base = command + ["--config", small_cfg, "--seed", "3"]
    outs = []
    for i, threads in enumerate(("1", "1", "3")):
        rc, out = run(base + ["--threads", threads], tmp_path, f"r{i}")
        assert rc == 0
        files = read_all(out)
        files.pop("config.toml")  # echoes out dir and threads
        outs.append(files)
    assert outs[0] == outs[1] == outs[2]


# -- config ----------------------------------------------------------------


def test_config_round_trip():
    cfg = RunConfig().replace("cell", temperature_C=55.5).replace("spectra", fields_mT=[1.0, 2.0])
    assert RunConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("text", [
    "[nosuch]\na = 1\n",
    "[cell]\nslices = 10\n",
    "[cell]\ntemperature_C = 'hot'\n",
    "[grid]\nbmin_mT = 5.0\nbmax_mT = 1.0\n",
    "[run]\nthreads = 0\n",
    "not toml ===",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        RunConfig.loads(text)
