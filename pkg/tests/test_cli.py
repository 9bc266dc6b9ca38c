import pytest

from chiller_horizon.cli import build_parser, main


@pytest.fixture
def config_file(bench_config, tmp_path):
    path = tmp_path / "bench.json"
    path.write_text(bench_config.model_dump_json(), encoding="utf-8")
    return path


def test_missing_samples_file(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "fit-curves", str(tmp_path / "missing.csv")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_bad_config_path(tmp_path):
    assert main(["--config", str(tmp_path / "nope.json"), "oracle"]) == 2


def test_invalid_config_contents(tmp_path):
    path = tmp_path / "bench.json"
    path.write_text('{"ppo": {"clip_ratio": 2.0}}', encoding="utf-8")
    assert main(["--config", str(path), "oracle"]) == 2


def test_oracle_command(config_file, tmp_path, capsys):
    code = main(["--config", str(config_file), "--out", str(tmp_path / "out"), "--deterministic", "oracle"])
    assert code == 0
    assert "oracle energy" in capsys.readouterr().out
    assert (tmp_path / "out" / "oracle_steps.csv").exists()


def test_gen_data_then_fit_curves(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["--config", str(config_file), "--out", str(out), "gen-data", "--curves", "--sigma", "0"]) == 0
    assert main(["--out", str(out), "fit-curves", str(out / "curve_samples.csv")]) == 0
    report = capsys.readouterr().out
    assert "R2" in report
    assert "ERROR" not in report


def test_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["dance"])
