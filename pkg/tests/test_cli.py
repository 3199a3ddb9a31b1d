import json

import pytest
from typer.testing import CliRunner

from reglab.config import default_config, parse_config
from reglab.main import EXIT_ERROR, EXIT_VERDICT_FAILED, app

runner = CliRunner()

DECOUPLING = """\
[run]
experiment = decoupling

[model]
kind = hypercube
R = 3.0
d = 3

[measurement]
indices = 1, 3
sigma = 0.1

[guidance]
steps = 4096
"""


@pytest.fixture
def preset(tmp_path):
    def write(text, name="preset.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return write


def test_show_config_prints_parseable_defaults():
    result = runner.invoke(app, ["show-config", "decoupling"])
    assert result.exit_code == 0, result.output
    assert parse_config(result.stdout) == default_config("decoupling")


def test_show_config_reads_presets_by_name():
    result = runner.invoke(app, ["show-config", "--config", "contraction"])
    assert result.exit_code == 0, result.output
    assert "mdps_form = time_consistent" in result.output


def test_verify_writes_a_passing_report(tmp_path, preset):
    out = tmp_path / "out"
    result = runner.invoke(app, ["verify", "decoupling", "--config", preset(DECOUPLING), "--out", str(out)])
    assert result.exit_code == 0, result.output
    text = (out / "decoupling.csv").read_text()
    assert "section,name,value,threshold,comparison,passed" in text
    assert text.rstrip().endswith("result,passed,true,,,")
    assert not (out / "failure.json").exists()


def test_reruns_without_timing_are_byte_identical(tmp_path, preset):
    config = preset(DECOUPLING)
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(app, ["verify", "decoupling", "-c", config, "--out", str(out), "--no-timing"])
        assert result.exit_code == 0, result.output
        texts.append((out / "decoupling.csv").read_bytes())
    assert texts[0] == texts[1]


def test_json_format(tmp_path, preset):
    out = tmp_path / "out"
    args = ["verify", "decoupling", "-c", preset(DECOUPLING), "--out", str(out), "--format", "json"]
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    data = json.loads((out / "decoupling.json").read_text())
    assert data["experiment"] == "decoupling"
    assert data["passed"] is True


def test_unknown_experiment_or_command():
    assert runner.invoke(app, ["verify", "nonsense"]).exit_code == EXIT_ERROR
    assert runner.invoke(app, ["frobnicate"]).exit_code != 0


def test_bad_format_is_a_config_error(tmp_path, preset):
    result = runner.invoke(app, ["verify", "decoupling", "-c", preset(DECOUPLING), "--format", "xml"])
    assert result.exit_code == EXIT_ERROR


def test_invalid_config_reports_key_path(preset):
    result = runner.invoke(app, ["run", "--config", preset("[run]\nexperiment = decoupling\n[measurement]\nsigma = -1\n")])
    assert result.exit_code == EXIT_ERROR
    assert "measurement.sigma > 0" in result.output


def test_config_for_another_experiment_is_rejected(preset):
    result = runner.invoke(app, ["verify", "projection", "-c", preset(DECOUPLING)])
    assert result.exit_code == EXIT_ERROR


def test_failed_verdict_exits_one(tmp_path, preset):
    out = tmp_path / "out"
    text = DECOUPLING + "\n[experiment]\ngap_tolerance = -1\n"
    result = runner.invoke(app, ["run", "-c", preset(text), "--out", str(out)])
    assert result.exit_code == EXIT_VERDICT_FAILED
    failure = json.loads((out / "failure.json").read_text())
    assert {f["verdict"] for f in failure["failed"]} == {"latent extraction decouples", "guided ODE decouples"}
    assert (out / "decoupling.csv").exists()


def test_runtime_error_exits_two(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["verify", "dps-bias", "--trials", "10", "--out", str(out)])
    assert result.exit_code == EXIT_ERROR
    failure = json.loads((out / "failure.json").read_text())
    assert failure["experiment"] == "dps-bias"
    assert failure["error"].startswith("InsufficientTrialsError")


def test_dump_trajectories(tmp_path, preset):
    out = tmp_path / "out"
    result = runner.invoke(
        app, ["verify", "decoupling", "-c", preset(DECOUPLING), "--out", str(out), "--dump-trajectories"]
    )
    assert result.exit_code == 0, result.output
    header = (out / "trajectories" / "decoupling_guided.csv").read_text().splitlines()[0]
    assert header == "t,x_0,x_1,x_2,reward,tanh_diag,meas_proj"


def test_show_config_rejects_unknown_experiment():
    result = runner.invoke(app, ["show-config", "nonsense"])
    assert result.exit_code == EXIT_ERROR
    assert "run.experiment" in result.output
