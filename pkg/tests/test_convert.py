import json

import numpy as np
import pandas as pd
import pytest

from jm_scan import FitResult, omega_labels, pack_omega, read_params, write_fit_result
from jm_scan.convert import estimates_frame, params_from_dict, params_to_dict
from jm_scan.errors import SchemaError


@pytest.fixture
def result(problem):
    labels = omega_labels(problem.spec)
    se = np.linspace(0.1, 0.5, len(labels))
    se[1] = np.nan
    return FitResult(
        params=problem.params,
        se=se,
        cov=np.diag(se**2),
        iterations=3,
        loglik_trace=[-120.5, -110.25, -109.0],
        converged=False,
        labels=labels,
        timings={"e_step": 0.5},
        op_count=42,
    )


def test_params_round_trip(problem):
    document = json.loads(json.dumps(params_to_dict(problem.params, problem.spec)))
    again = params_from_dict(document, problem.spec)

    assert np.array_equal(pack_omega(again), pack_omega(problem.params))
    for ours, theirs in zip(again.hazards, problem.params.hazards):
        assert np.array_equal(ours.times, theirs.times)
        assert np.array_equal(ours.jumps, theirs.jumps)
        assert np.array_equal(ours.counts, theirs.counts)


def test_params_document_layout(problem):
    document = params_to_dict(problem.params, problem.spec)
    assert list(document) == ["schema_version", "omega", "hazards"]
    assert list(document["omega"]) == omega_labels(problem.spec)
    first = document["hazards"][0]
    assert first["cause"] == 1
    assert first["times"] == sorted(first["times"])


def test_params_schema_errors(problem):
    document = params_to_dict(problem.params, problem.spec)

    with pytest.raises(SchemaError, match="schema version"):
        params_from_dict({**document, "schema_version": 2}, problem.spec)

    omega = dict(document["omega"])
    del omega["sigma2.y1"]
    with pytest.raises(SchemaError, match="sigma2.y1"):
        params_from_dict({**document, "omega": omega}, problem.spec)

    with pytest.raises(SchemaError, match="Malformed"):
        params_from_dict({"schema_version": 1}, problem.spec)


def test_write_and_read_fit_result(tmp_path, problem, result):
    write_fit_result(result, problem.spec, tmp_path / "fit.json", tmp_path / "estimates.csv")

    with open(tmp_path / "fit.json") as f:
        document = json.load(f)
    expected = {
        "schema_version": 1,
        "converged": False,
        "iterations": 3,
        "loglik_trace": [-120.5, -110.25, -109.0],
        "op_count": 42,
        "timings": {"e_step": 0.5},
    }
    for key, value in expected.items():
        assert document[key] == value
    assert document["se"][result.labels[1]] is None
    assert document["se"][result.labels[0]] == pytest.approx(0.1)

    params = read_params(tmp_path / "fit.json", problem.spec)
    assert np.array_equal(pack_omega(params), pack_omega(problem.params))


def test_read_params_unparsable(tmp_path, problem):
    path = tmp_path / "fit.json"
    path.write_text("{")
    with pytest.raises(SchemaError, match="Cannot parse"):
        read_params(path, problem.spec)


def test_estimates_frame(result):
    frame = estimates_frame(result)
    assert frame.columns.tolist() == [
        "schema_version",
        "parameter",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
    ]
    np.testing.assert_allclose(frame["ci_upper"] - frame["estimate"], 1.96 * result.se)
    np.testing.assert_allclose(frame["estimate"] - frame["ci_lower"], 1.96 * result.se)
    assert frame.loc[1, ["se", "ci_lower", "ci_upper"]].isna().all()


def test_estimates_csv(tmp_path, problem, result):
    write_fit_result(result, problem.spec, tmp_path / "fit.json", tmp_path / "estimates.csv")
    frame = pd.read_csv(tmp_path / "estimates.csv")
    assert len(frame) == len(result.labels)
    assert frame["parameter"].tolist() == result.labels
    assert np.isnan(frame["se"][1])
