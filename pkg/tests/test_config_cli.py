import csv
import json
import os
import shutil

import numpy as np
import pytest

from moed import cli
from moed.config import PRESETS, build_config, load_config
from moed.errors import ConfigError, FactorizationError, GuardError
from moed.forward import AdvectionDiffusion


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


# -- config -----------------------------------------------------------------------


def test_presets():
    desk = load_config(None, "desk")
    assert (desk.grid["nx"], desk.grid["ny"], desk.grid["n_m"]) == (24, 24, 65)
    assert desk.sensor_coords().shape == (25, 2)
    assert (desk.study["n_b_samples"], desk.study["n_noise_samples"]) == (20, 50)
    big = load_config(None, "paper5")
    assert big.grid["n_m"] == 257
    assert (big.study["n_b_samples"], big.study["n_noise_samples"]) == (200, 500)
    assert big.optimizer["sensors"] == 20
    for cfg in (desk, big):
        assert cfg.pde["kappa"] == 1e-3 and cfg.pde["v0"] == 1.0
        assert cfg.prior_m == {"sigma": 80.0, "ell": 0.17, "mean": 65.0}
        assert cfg.prior_b["eps"] == 4.5e-3 and cfg.prior_b["alpha"] == 2.2e-1
        assert cfg.prior_b["mean"] == 50.0 and cfg.robin is None
        assert cfg.sensors["window"] == [0.95, 0.99] and cfg.sensors["noise_sigma"] == 0.25


def test_config_file_overrides(tmp_path):
    path = write(tmp_path / "c.toml", 'preset = "desk"\n[pde]\nkappa = 2e-3\n[sensors]\ncoords = [[0.5, 0.5], [0.2, 0.7]]\n')
    cfg = load_config(path)
    assert cfg.pde["kappa"] == 2e-3 and cfg.pde["v0"] == 1.0
    assert cfg.sensor_coords().tolist() == [[0.5, 0.5], [0.2, 0.7]]
    again = load_config(write(tmp_path / "d.toml", cfg.dumps()))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("body, line, fragment", [
    ("[grid]\nnx = 24\n\n[pde]\nkappa = -1.0\n", 5, "[pde] kappa: must be positive"),
    ("[optimizer]\nmethod = 'newton'\n", 2, "[optimizer] method"),
    ("[prior_m]\nsigma = 80.0\nell = 0.0\n", 3, "[prior_m] ell"),
    ("[sensors]\nwindow = [0.99, 0.95]\n", 2, "[sensors] window"),
    ("[optimizer]\nschedule = [0.1, 1.0]\n", 2, "strictly decreasing"),
    ("[grid]\nnx = 24\nbogus = 1\n", 3, "unknown key"),
    ("[stuff]\nx = 1\n", 1, "unknown section"),
])
def test_config_errors_name_the_line(tmp_path, body, line, fragment):
    path = write(tmp_path / "bad.toml", body)
    with pytest.raises(ConfigError) as err:
        load_config(path)
    msg = str(err.value)
    assert msg.startswith(f"{path}:{line}: ")
    assert fragment in msg


def test_config_syntax_and_preset_errors(tmp_path):
    with pytest.raises(ConfigError, match="line 1"):
        load_config(write(tmp_path / "x.toml", "[grid\n"))
    with pytest.raises(ConfigError, match="unknown preset"):
        build_config({}, preset="huge")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "missing.toml"))


def test_fingerprint_tracks_kernel_inputs_only():
    base = build_config({})
    assert base.fingerprint() == build_config({}).fingerprint()
    assert base.fingerprint() != build_config({"pde": {"kappa": 2e-3}}).fingerprint()
    assert base.fingerprint() != build_config({"sensors": {"lattice": 4}}).fingerprint()
    assert base.fingerprint() == build_config({"optimizer": {"sensors": 3}}).fingerprint()
    assert base.fingerprint() == build_config({"study": {"seed": 9}}).fingerprint()


def test_presets_unchanged_by_builds():
    snapshot = json.dumps(PRESETS, sort_keys=True)
    build_config({"grid": {"nx": 10}})
    assert json.dumps(PRESETS, sort_keys=True) == snapshot


# -- CLI ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def assembled(tmp_path_factory):
    run = str(tmp_path_factory.mktemp("desk"))
    before = AdvectionDiffusion.step_solves
    assert cli.main(["assemble", "--preset", "desk", "--out", run]) == 0
    return run, AdvectionDiffusion.step_solves - before


def copy_run(src, dst):
    shutil.copytree(src, dst)
    return str(dst)


def test_assemble_records_counts(assembled, desk):
    run, steps = assembled
    meta = json.load(open(os.path.join(run, "kernels", "meta.json")))
    assert (meta["forward_solves"], meta["adjoint_solves"]) == (75, 50)
    # each map application is one sweep up to the last observed time node (63 of 64)
    last = int(np.flatnonzero(desk.maps.obs_weights)[-1])
    assert last == 63
    assert steps == (75 + 50) * last
    assert os.path.exists(os.path.join(run, "config.snapshot"))
    for name in cli.KERNEL_FILES:
        assert os.path.exists(os.path.join(run, "kernels", f"{name}.csv"))


def test_assemble_cache_hit(assembled):
    run, _ = assembled
    command, _, out, steps = cli.run(["assemble", "--preset", "desk", "--out", run])
    assert out["cache_hit"] and out["pde_solves"] == 0 and steps == 0
    assert (out["recorded_forward_solves"], out["recorded_adjoint_solves"]) == (75, 50)


def test_cached_kernels_round_trip(assembled, desk):
    run, _ = assembled
    k, _ = cli.load_kernels(run, desk.cfg)
    for name in ("C", "D", "CF", "F_adj", "G_adj", "time_weights", "space_weights"):
        assert np.array_equal(getattr(k, name), getattr(desk.kernels, name))


def test_corrupted_cache_fails_cleanly(assembled, tmp_path, capsys):
    run = copy_run(assembled[0], tmp_path / "r")
    path = os.path.join(run, "kernels", "D.csv")
    with open(path, "a") as fh:
        fh.write("0\n")
    assert cli.main(["design", "--preset", "desk", "--out", run]) == cli.EXIT_IO
    assert "checksum mismatch" in capsys.readouterr().err
    assert cli.main(["assemble", "--preset", "desk", "--out", run]) == cli.EXIT_IO


def test_fingerprint_mismatch(assembled, tmp_path, capsys):
    run = copy_run(assembled[0], tmp_path / "r")
    cfg = write(tmp_path / "k.toml", "[pde]\nkappa = 2e-3\n")
    assert cli.main(["design", "--config", cfg, "--out", run]) == cli.EXIT_IO
    assert "fingerprint mismatch" in capsys.readouterr().err
    _, _, out, steps = cli.run(["assemble", "--config", cfg, "--out", run])
    assert not out["cache_hit"] and steps > 0


def test_missing_cache(tmp_path, capsys):
    assert cli.main(["design", "--preset", "desk", "--out", str(tmp_path)]) == cli.EXIT_IO
    assert "run 'moed assemble' first" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write(tmp_path / "bad.toml", "[pde]\nkappa = 0\n")
    assert cli.main(["assemble", "--config", bad, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert f"{bad}:2:" in capsys.readouterr().err
    assert cli.main(["design", "--sensors", "0", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit):
        cli.main(["design", "--sensors", "3", "--gamma", "1.0"])


def test_numeric_and_guard_exit_codes(monkeypatch, assembled):
    run, _ = assembled

    def boom(exc):
        def f(*a, **k):
            raise exc
        return f

    monkeypatch.setattr(cli, "cmd_design", boom(FactorizationError("indefinite")))
    assert cli.main(["design", "--out", run]) == cli.EXIT_NUMERIC
    monkeypatch.setattr(cli, "cmd_design", boom(GuardError("too big")))
    assert cli.main(["design", "--out", run]) == cli.EXIT_GUARD


@pytest.fixture(scope="module")
def greedy_run(assembled, tmp_path_factory):
    run = copy_run(assembled[0], tmp_path_factory.mktemp("g") / "r")
    _, _, out, steps = cli.run(["design", "--method", "greedy", "--sensors", "10", "--out", run])
    assert steps == 0
    return run, out


def test_greedy_design_report(greedy_run):
    run, out = greedy_run
    for kind in ("moed", "classical"):
        rep = json.load(open(os.path.join(run, "design", f"{kind}.json")))
        assert rep["n_active"] == 10 and sum(rep["weights"]) == 10
        assert rep["n_evals"] == 205 and rep["pde_solves"] == 0
        assert rep["Phi"] == pytest.approx(rep["prior_trace"] + rep["Psi"])
    assert out["moed"]["Phi"] <= out["classical"]["Phi"]
    with open(os.path.join(run, "design", "weights.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sensor", "x", "y", "w_moed", "w_classical"] and len(rows) == 26


def test_l0_design_hits_target(assembled, tmp_path):
    run = copy_run(assembled[0], tmp_path / "r")
    _, _, out, steps = cli.run(["design", "--method", "l0", "--sensors", "10", "--trace", "--out", run])
    assert steps == 0
    for kind in ("moed", "classical"):
        assert abs(out[kind]["n_active"] - 10) <= 1
        assert out[kind]["converged"]
        assert out[kind]["search_evals"] >= out[kind]["n_evals"]
        assert os.path.exists(os.path.join(run, "design", f"trace_{kind}.csv"))


def test_l1_with_gamma_and_greedy_rejects_gamma(assembled, tmp_path):
    run = copy_run(assembled[0], tmp_path / "r")
    _, _, out, _ = cli.run(["design", "--method", "l1", "--gamma", "1.0", "--out", run])
    assert out["moed"]["epsilon_schedule"] == [] and out["moed"]["gamma"] == 1.0
    assert cli.main(["design", "--method", "greedy", "--gamma", "1.0", "--out", run]) == cli.EXIT_CONFIG


def test_map_outputs(greedy_run, tmp_path, desk):
    run = copy_run(greedy_run[0], tmp_path / "r")
    _, _, out, steps = cli.run(["map", "--out", run])
    assert steps == 0
    assert out["weighted_variance_sum"] == pytest.approx(out["Phi"], rel=1e-8)
    assert out["min_variance"] >= 0
    assert out["Phi"] == pytest.approx(greedy_run[1]["moed"]["Phi"], rel=1e-10)
    body = cli.read_csv(os.path.join(run, "map", "m_map.csv"))
    assert body.shape == (65, 4)
    assert np.all(body[:, 2] <= body[:, 3] * (1 + 1e-12))
    assert cli.read_csv(os.path.join(run, "map", "b_map.csv")).shape == (576, 3)
    # the written data reproduce the same estimate
    m_first = body[:, 1].copy()
    cli.run(["map", "--out", run, "--data", os.path.join(run, "map", "data.csv")])
    assert np.array_equal(cli.read_csv(os.path.join(run, "map", "m_map.csv"))[:, 1], m_first)


def test_map_without_sensors_returns_prior_std(greedy_run, tmp_path):
    run = copy_run(greedy_run[0], tmp_path / "r")
    path = os.path.join(run, "design", "moed.json")
    rep = json.load(open(path))
    rep["weights"] = [0.0] * 25
    cli.write_json(path, rep)
    cli.run(["map", "--out", run])
    body = cli.read_csv(os.path.join(run, "map", "m_map.csv"))
    assert np.array_equal(body[:, 2], body[:, 3])


def test_map_rejects_wrong_data_length(greedy_run, tmp_path):
    run = copy_run(greedy_run[0], tmp_path / "r")
    data = str(tmp_path / "y.csv")
    cli.write_vector(data, "y", np.zeros(3))
    assert cli.main(["map", "--out", run, "--data", data]) == cli.EXIT_CONFIG


def test_study_rerun_is_identical(greedy_run, tmp_path):
    run = copy_run(greedy_run[0], tmp_path / "r")
    _, _, first, steps = cli.run(["study", "--out", run])
    assert steps == 0
    blob = open(os.path.join(run, "study", "replicates.csv"), "rb").read()
    _, _, second, _ = cli.run(["study", "--out", run])
    assert open(os.path.join(run, "study", "replicates.csv"), "rb").read() == blob
    assert first == second
    assert first["moed_identical_across_b"]
    with open(os.path.join(run, "study", "replicates.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["noise_sample", "b_sample", "kind", "relative_error"]
    assert len(rows) == 1 + 50 * (2 + 20)
    _, _, other, _ = cli.run(["study", "--seed", "1", "--out", run])
    assert other != first


def test_output_formats(tmp_path):
    path = str(tmp_path / "v.csv")
    cli.write_vector(path, "v", [0.1, 1 / 3])
    text = open(path).read().splitlines()
    assert text == ["v", "0.10000000000000001", "0.33333333333333331"]
    assert cli.read_csv(path).ravel().tolist() == [0.1, 1 / 3]
    jpath = str(tmp_path / "o.json")
    cli.write_json(jpath, {"b": 1, "a": "Φ"})
    raw = open(jpath, encoding="utf-8").read()
    assert raw.index('"a"') < raw.index('"b"') and "Φ" in raw
    bad = str(tmp_path / "bad.csv")
    open(bad, "w").write("x\nnot-a-number\n")
    with pytest.raises(cli.CacheError):
        cli.read_csv(bad)


@pytest.mark.slow
def test_paper_scale_greedy(tmp_path):
    run = str(tmp_path)
    assert cli.main(["assemble", "--preset", "paper5", "--out", run]) == 0
    meta = json.load(open(os.path.join(run, "kernels", "meta.json")))
    assert (meta["forward_solves"], meta["adjoint_solves"]) == (3 * 49, 2 * 49)
    _, _, out, steps = cli.run(["design", "--preset", "paper5", "--method", "greedy", "--out", run])
    assert steps == 0
    assert out["moed"]["n_active"] == 20 and out["classical"]["n_active"] == 20
