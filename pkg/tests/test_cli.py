import json
import math

import numpy as np
import pytest

from bnspec.cli import RunConfig, csv_text, json_text, load_config, main, parse_value
from bnspec.errors import ConfigError


def run(tmp_path, command, text, *extra):
    config = tmp_path / "run.cfg"
    config.write_text(text)
    out = tmp_path / "out"
    return main([command, "--config", str(config), "--out", str(out), *extra]), out


def test_parse_value_accepts_arithmetic_lists_and_words():
    assert parse_value("0.9 * 4 * pi**2") == pytest.approx(0.9 * 4 * math.pi**2)
    assert parse_value("[1, -2.5, pi/2]") == [1, -2.5, math.pi / 2]
    assert parse_value("true") is True
    assert parse_value("Box3D") == "Box3D"
    with pytest.raises(ConfigError):
        parse_value("__import__('os')")


def test_load_config_defaults_and_overrides():
    config = load_config("domain.kind = Box3D\ndomain.resolution = 12\nproblem.lambda = 3*pi**2\nseed = 4\n")
    assert isinstance(config, RunConfig)
    assert config.domain.kind == "Box3D" and config.domain.resolution == 12
    assert config.problem.lambda_ == pytest.approx(3 * math.pi**2)
    assert config.seed == 4
    assert config.relax_options().polish is True


@pytest.mark.parametrize(
    "text",
    [
        "domain.resolutoin = 10",
        "nosection = 3",
        "domain.kind = Torus",
        "domain.resolution = 10.5",
        "relax.damping = 2",
        "relax.eps_schedule = [1e-1, 1e-2]",
        "mass.probe_margin = 1",
        "problem.lambda_grid = [3, 1]",
        "domain.resolution = 10\ndomain.resolution = 12",
        "just some words",
        "output.formats = [xml]",
    ],
)
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        load_config(text)


def test_malformed_key_exits_2_without_files(tmp_path, capsys):
    code, out = run(tmp_path, "spectrum", "domain.resolutoin = 400\n")
    assert code == 2
    assert not out.exists()
    assert "unknown key" in capsys.readouterr().err


def test_spectrum_output_format(tmp_path):
    code, out = run(tmp_path, "spectrum", "domain.kind = Box3D\ndomain.resolution = 8\nproblem.count = 4\n")
    assert code == 0
    raw = (out / "spectrum.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "index,lambda,Lambda_cluster,multiplicity"
    assert [line.split(",")[3] for line in lines[1:]] == ["1", "3", "3", "3"]
    # 17 significant digits round-trip exactly.
    value = float(lines[1].split(",")[1])
    assert repr(value) == repr(float("%.17g" % value))


def test_minimize_is_byte_identical_across_runs(tmp_path):
    text = "domain.resolution = 150\nproblem.i = 0\nproblem.lambda = 0.8*pi**2\n"
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    code_a, out_a = run(tmp_path / "a", "minimize", text)
    code_b, out_b = run(tmp_path / "b", "minimize", text)
    assert code_a == code_b == 0
    for name in ("minimizer.json", "solution.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    payload = json.loads((out_a / "minimizer.json").read_text())
    assert payload["attained"] is True and payload["nodal_count"] == 1
    assert payload["energy"] < 12.81
    assert "wall_time" not in payload


def test_minimize_rejects_lambda_in_other_interval(tmp_path):
    code, out = run(tmp_path, "minimize", "domain.resolution = 100\nproblem.i = 1\nproblem.lambda = 5\n")
    assert code == 2 and not out.exists()


def test_solver_failure_exits_3(tmp_path, capsys):
    text = "domain.resolution = 100\nproblem.lambda = 5\nrelax.max_iters = 1\nrelax.polish = false\n"
    code, out = run(tmp_path, "minimize", text)
    assert code == 3 and not out.exists()
    assert "solver error" in capsys.readouterr().err


def test_mass_and_lambda_star(tmp_path):
    code, out = run(tmp_path, "mass", "domain.resolution = 300\nproblem.lambda_grid = [2, 4, 6, 8]\n")
    assert code == 0
    rows = (out / "mass.csv").read_text().splitlines()
    assert rows[0] == "lambda,r,m_lambda"
    values = [float(row.split(",")[2]) for row in rows[1:]]
    assert values == sorted(values)
    code, out = run(tmp_path, "lambda-star", "domain.resolution = 300\nproblem.i = 0\n")
    payload = json.loads((out / "lambda_star.json").read_text())
    assert code == 0 and payload["lambda_star"] == pytest.approx(math.pi**2 / 4, rel=1e-2)
    assert payload["bracket"][0] < payload["lambda_star"] < payload["bracket"][1]


def test_probe_near_boundary_exits_2(tmp_path, capsys):
    text = "domain.kind = Box3D\ndomain.resolution = 12\nproblem.lambda = 10\nmass.probes = [[0.05, 0.5, 0.5]]\n"
    code, out = run(tmp_path, "mass", text)
    assert code == 2 and not out.exists()
    assert "[0.05, 0.5, 0.5]" in capsys.readouterr().err


def test_sweep_columns(tmp_path):
    code, out = run(tmp_path, "sweep", "domain.resolution = 100\nproblem.lambda_grid = [4, 8]\n")
    assert code == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "lambda,i,k,mu_star,energy,attained,wall_time"
    assert rows[1].split(",")[5] in ("true", "false")


def test_verify_passes_skips_and_flags_injected_fault(tmp_path):
    text = "domain.resolution = 200\nproblem.i = 1\n"
    code, out = run(tmp_path, "verify", text)
    report = json.loads((out / "verify.json").read_text())
    assert code == 0 and report["failed"] == 0 and report["passed"] >= 10

    code, out = run(tmp_path, "verify", text, "--inject-fault")
    assert code == 1
    assert json.loads((out / "verify.json").read_text())["failed"] == 1

    on_spectrum = "domain.resolution = 200\nproblem.i = 1\nproblem.lambda = 39.4784\n"
    code, out = run(tmp_path, "verify", on_spectrum)
    report = json.loads((out / "verify.json").read_text())
    skipped = [c for c in report["checks"] if c["status"] == "skip"]
    assert code == 0 and report["failed"] == 0
    assert {"greenmass.mass_derivative", "greenmass.mass_increasing"} <= {c["name"] for c in skipped}
    assert all("spectrum" in c["detail"] for c in skipped)


def test_writers_are_deterministic():
    assert csv_text(["a", "b"], [[0.1, True], [np.float64(2.0), False]]) == "a,b\n0.10000000000000001,true\n2,false\n"
    text = json_text({"b": float("nan"), "a": [1, np.int64(2)]})
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [1, 2], "b": None}


def test_inline_comments_and_format_filter(tmp_path):
    text = "domain.resolution = 100  # shells\nproblem.count = 3\noutput.formats = [json]\n"
    code, out = run(tmp_path, "spectrum", text)
    assert code == 0
    assert not (out / "spectrum.csv").exists()
