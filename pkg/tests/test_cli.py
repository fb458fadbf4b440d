import json

import pandas as pd
import pytest
from fixtures.scenarios import SMALL_TOML
from loguru import logger

from jm_scan import ModelSpec
from jm_scan.cli import EXIT_MODEL, EXIT_OK, EXIT_USAGE, build_parser, main
from jm_scan.params import omega_size


@pytest.fixture(autouse=True)
def reset_logger():
    # main() installs a stderr sink bound to the captured stream of the running test
    yield
    logger.remove()


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.toml"
    path.write_text(SMALL_TOML)
    return path


@pytest.fixture
def simulated(tmp_path, scenario_file):
    out = tmp_path / "data"
    args = ["simulate", "--scenario", str(scenario_file), "--n", "40", "--seed", "3"]
    code = main([*args, "--out", str(out)])
    assert code == EXIT_OK
    return out


def fit_args(data, out, *extra):
    return [
        "fit",
        "--long",
        str(data / "long.csv"),
        "--surv",
        str(data / "surv.csv"),
        "--spec",
        str(data / "spec.toml"),
        "--out",
        str(out),
        *extra,
    ]


def test_simulate(simulated, capsys):
    for name in ("long.csv", "surv.csv", "spec.toml"):
        assert (simulated / name).exists()
    surv = pd.read_csv(simulated / "surv.csv")
    assert len(surv) == 40
    assert ModelSpec.from_file(simulated / "spec.toml").G == 2


def test_simulate_summary_line(tmp_path, scenario_file, capsys):
    main(["simulate", "--scenario", str(scenario_file), "--n", "10", "--out", str(tmp_path / "x")])
    assert capsys.readouterr().out.startswith("Simulated 10 subjects: censoring")


def test_fit(tmp_path, simulated, capsys):
    out = tmp_path / "fit"
    code = main(fit_args(simulated, out, "--max-iter", "1"))
    assert code == EXIT_OK
    assert "EM did not converge after 1 iterations" in capsys.readouterr().out

    with open(out / "fit.json") as f:
        document = json.load(f)
    assert document["converged"] is False
    assert document["iterations"] == 1

    spec = ModelSpec.from_file(simulated / "spec.toml")
    estimates = pd.read_csv(out / "estimates.csv")
    assert len(estimates) == omega_size(spec)
    assert estimates.columns.tolist()[1:] == ["parameter", "estimate", "se", "ci_lower", "ci_upper"]


def test_fit_warm_start(tmp_path, simulated, capsys):
    first = tmp_path / "first"
    assert main(fit_args(simulated, first, "--max-iter", "2")) == EXIT_OK
    second = tmp_path / "second"
    code = main(fit_args(simulated, second, "--max-iter", "1", "--init", str(first / "fit.json")))
    assert code == EXIT_OK
    assert (second / "fit.json").exists()


def test_fit_freeze_alpha(tmp_path, simulated):
    out = tmp_path / "frozen"
    assert main(fit_args(simulated, out, "--max-iter", "2", "--freeze-alpha")) == EXIT_OK
    estimates = pd.read_csv(out / "estimates.csv").set_index("parameter")
    alpha = estimates[estimates.index.str.startswith("alpha.")]
    assert (alpha["estimate"] == 0).all()
    assert alpha["se"].isna().all()


def test_fit_missing_file(tmp_path, simulated, capsys):
    args = fit_args(simulated, tmp_path / "fit")
    args[2] = str(tmp_path / "absent.csv")
    assert main(args) == EXIT_USAGE
    assert "file not found" in capsys.readouterr().err


def test_fit_empty_survival_file(tmp_path, simulated, capsys):
    (simulated / "surv.csv").write_text("")
    assert main(fit_args(simulated, tmp_path / "fit")) == EXIT_USAGE
    assert "Cannot parse" in capsys.readouterr().err


def test_fit_directory_as_file(tmp_path, simulated, capsys):
    args = fit_args(simulated, tmp_path / "fit")
    args[2] = str(simulated)
    args[4] = str(simulated)
    assert main(args) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("error:")


def test_fit_bad_spec(tmp_path, simulated, capsys):
    (simulated / "spec.toml").write_text("causes = [")
    assert main(fit_args(simulated, tmp_path / "fit")) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("error:")


def test_fit_without_events(tmp_path, simulated, capsys):
    surv = pd.read_csv(simulated / "surv.csv")
    surv["cause"] = 0
    surv.to_csv(simulated / "surv.csv", index=False)
    assert main(fit_args(simulated, tmp_path / "fit")) == EXIT_MODEL
    assert "uncensored event" in capsys.readouterr().err


def test_replicate_study(tmp_path, scenario_file, capsys):
    out = tmp_path / "study" / "summary.csv"
    args = [
        "replicate-study",
        "--scenario",
        str(scenario_file),
        "--n",
        "30",
        "--replicates",
        "1",
        "--max-iter",
        "2",
        "--quiet",
        "--out",
        str(out),
    ]
    assert main(args) == EXIT_OK
    assert "of 1 replicates succeeded" in capsys.readouterr().out
    frame = pd.read_csv(out)
    assert frame.columns.tolist()[:3] == ["schema_version", "parameter", "truth"]


def test_benchmark(tmp_path, scenario_file):
    out = tmp_path / "bench.csv"
    args = [
        "benchmark",
        "--scenario",
        str(scenario_file),
        "--n",
        "20",
        "40",
        "--engine",
        "scan",
        "naive",
        "--max-iter",
        "1",
        "--out",
        str(out),
    ]
    assert main(args) == EXIT_OK
    frame = pd.read_csv(out)
    assert len(frame) == 4
    assert sorted(set(frame["engine"])) == ["naive", "scan"]


def test_usage_errors():
    parser = build_parser()
    with pytest.raises(SystemExit) as e:
        parser.parse_args(["fit", "--long", "a.csv"])
    assert e.value.code == 2

    with pytest.raises(SystemExit) as e:
        main(["simulate", "--out", "x", "--n", "0"])
    assert e.value.code == 2

    with pytest.raises(SystemExit):
        main([])
