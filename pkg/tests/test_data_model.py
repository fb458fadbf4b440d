from copy import deepcopy

import numpy as np
import pandas as pd
import pytest
from fixtures import errors
from fixtures.toy import LONG, SPEC_TOML, SURV

from jm_scan import Dataset, ModelSpec, build_designs, load_dataset, write_dataset
from jm_scan.data_model import BiomarkerSpec
from jm_scan.errors import SchemaError, ValidityError


def dense_direct_sum(blocks):
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def test_load_toy_files(toy_files, toy_spec):
    ds = load_dataset(*toy_files, toy_spec)

    assert ds.n == 2
    assert [s.id for s in ds.subjects] == ["1", "2"]
    assert [s.n_obs for s in ds.subjects] == [(2, 1), (1, 2)]
    assert ds.T.tolist() == [2.0, 3.0]
    assert ds.D.tolist() == [1, 0]
    assert ds.W.tolist() == [[0.5], [-1.0]]
    assert ds.dropped_rows == 0


def test_observations(toy):
    observations = list(toy.observations())
    assert len(observations) == 6
    first = observations[0]
    expected = {"subject_id": "1", "biomarker": 1, "time": 0.0, "value": 1.0}
    for key, value in expected.items():
        assert getattr(first, key) == value
    assert first.fixed_covariates.tolist() == [1.0, 0.0]
    assert first.random_covariates.tolist() == [1.0]


def test_summary(toy):
    expected = {
        "subjects": 2,
        "measurements": [3, 3],
        "mean_profile_length": 1.5,
        "censoring_rate": 0.5,
        "event_rates": [0.5, 0.0],
        "dropped_rows": 0,
    }
    assert toy.summary() == expected


def test_unknown_cause_index(toy_spec):
    surv = deepcopy(SURV)
    surv[1] = errors.SURV_UNKNOWN_CAUSE
    with pytest.raises(ValidityError, match="unknown cause index"):
        Dataset.from_frames(pd.DataFrame(LONG), pd.DataFrame(surv), toy_spec)


def test_unknown_biomarker_index(toy_spec):
    long = deepcopy(LONG) + [errors.LONG_UNKNOWN_BIOMARKER]
    with pytest.raises(ValidityError, match="unknown biomarker index"):
        Dataset.from_frames(pd.DataFrame(long), pd.DataFrame(SURV), toy_spec)


def test_duplicate_survival_record(toy_spec):
    surv = deepcopy(SURV) + [errors.SURV_DUPLICATE]
    with pytest.raises(ValidityError, match="duplicate survival record"):
        Dataset.from_frames(pd.DataFrame(LONG), pd.DataFrame(surv), toy_spec)


def test_missing_survival_record(toy_spec):
    long = deepcopy(LONG) + [errors.LONG_UNKNOWN_SUBJECT]
    with pytest.raises(ValidityError, match="No survival record"):
        Dataset.from_frames(pd.DataFrame(long), pd.DataFrame(SURV), toy_spec)


def test_missing_column(toy_spec):
    surv = pd.DataFrame(SURV).drop(columns="w")
    with pytest.raises(SchemaError, match="missing column"):
        Dataset.from_frames(pd.DataFrame(LONG), surv, toy_spec)


def test_empty_file(toy_files, toy_spec):
    long_file, surv_file = toy_files
    surv_file.write_text("")
    with pytest.raises(SchemaError, match="Cannot parse"):
        load_dataset(long_file, surv_file, toy_spec)


def test_ragged_csv_row(toy_files, toy_spec):
    long_file, surv_file = toy_files
    surv_file.write_text("subject,time,cause,w\n1,2.0,1,0.5\n2,3.0,0,-1.0,7,8\n")
    with pytest.raises(SchemaError, match="Cannot parse"):
        load_dataset(long_file, surv_file, toy_spec)


def test_non_numeric_cell(toy_spec):
    long = deepcopy(LONG) + [errors.LONG_NON_NUMERIC]
    with pytest.raises(SchemaError, match="non-numeric cell"):
        Dataset.from_frames(pd.DataFrame(long), pd.DataFrame(SURV), toy_spec)


def test_post_event_row_dropped(toy_spec, caplog):
    long = deepcopy(LONG) + [errors.LONG_AFTER_EVENT]
    surv = deepcopy(SURV)
    surv[0]["time"] = 4.0
    ds = Dataset.from_frames(pd.DataFrame(long), pd.DataFrame(surv), toy_spec)

    assert ds.dropped_rows == 1
    assert ds.subjects[0].n_obs == (2, 1)
    assert "Dropped 1 longitudinal rows" in caplog.text


def test_post_event_row_rejected(toy_spec):
    long = deepcopy(LONG) + [errors.LONG_AFTER_EVENT]
    with pytest.raises(ValidityError, match="longitudinal time after T_i"):
        Dataset.from_frames(
            pd.DataFrame(long), pd.DataFrame(SURV), toy_spec, drop_post_event=False
        )


def test_subjects_sorted_numerically(toy_spec):
    long = [dict(row, subject="10" if row["subject"] == "1" else row["subject"]) for row in LONG]
    surv = [dict(row, subject="10" if row["subject"] == "1" else row["subject"]) for row in SURV]
    ds = Dataset.from_frames(pd.DataFrame(long[::-1]), pd.DataFrame(surv[::-1]), toy_spec)

    assert [s.id for s in ds.subjects] == ["2", "10"]
    assert ds.subjects[1].blocks[0].times.tolist() == [0.0, 1.0]


def test_subject_without_biomarker_rows(toy_spec):
    long = [row for row in LONG if not (row["subject"] == "2" and row["biomarker"] == 1)]
    ds = Dataset.from_frames(pd.DataFrame(long), pd.DataFrame(SURV), toy_spec)

    assert ds.subjects[1].n_obs == (0, 2)
    assert ds.subjects[1].blocks[0].X.shape == (0, 2)


def test_build_designs_block_diagonal(toy, toy_spec):
    designs = build_designs(toy, toy_spec)
    first = designs[0]

    expected_X = np.array(
        [
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.5],
        ]
    )
    expected_Z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(first.X, expected_X)
    assert np.array_equal(first.Z, expected_Z)
    assert first.y.tolist() == [1.0, 2.0, 3.0]
    assert first.row_sigma2(np.array([0.5, 2.0])).tolist() == [0.5, 0.5, 2.0]
    assert designs.counts.tolist() == [[2, 1], [1, 2]]


def test_build_designs_single_biomarker():
    spec = ModelSpec.from_dict(
        {"causes": 1, "biomarkers": [{"fixed": ["intercept", "time"], "random": ["intercept"]}]}
    )
    long = pd.DataFrame([row for row in LONG if row["biomarker"] == 1])
    surv = pd.DataFrame(SURV).drop(columns="w")
    surv["cause"] = [1, 0]
    ds = Dataset.from_frames(long, surv, spec)
    designs = build_designs(ds, spec)

    block = ds.subjects[0].blocks[0]
    assert np.array_equal(designs[0].X, block.X)
    assert np.array_equal(designs[0].Z, block.Z)


def test_build_designs_match_dense_direct_sum():
    from fixtures.instances import random_problem

    problem = random_problem(seed=3, n=10, G=3)
    rng = np.random.default_rng(0)
    for subject in problem.designs.subjects:
        X = dense_direct_sum(subject.X_blocks)
        Z = dense_direct_sum(subject.Z_blocks)
        assert np.array_equal(subject.X, X)
        assert np.array_equal(subject.Z, Z)

        v = rng.normal(size=len(subject.y))
        beta = rng.normal(size=problem.spec.p)
        b = rng.normal(size=problem.spec.q)
        np.testing.assert_allclose(subject.x_rmatvec(v), X.T @ v, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(subject.z_rmatvec(v), Z.T @ v, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(subject.x_matvec(beta), X @ beta, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(subject.z_matvec(b), Z @ b, rtol=1e-12, atol=1e-14)


def test_cross_products(problem):
    designs = problem.designs
    for g in range(problem.spec.G):
        for i, subject in enumerate(designs.subjects):
            X, Z, y = subject.X_blocks[g], subject.Z_blocks[g], subject.y_blocks[g]
            np.testing.assert_allclose(designs.xtx[g][i], X.T @ X)
            np.testing.assert_allclose(designs.xtz[g][i], X.T @ Z)
            np.testing.assert_allclose(designs.zty[g][i], Z.T @ y)
            assert designs.yty[g][i] == pytest.approx(y @ y)


def test_build_designs_dimension_mismatch(toy):
    other = ModelSpec.from_dict(
        {
            "causes": 2,
            "survival": ["w"],
            "biomarkers": [
                {"name": "y1", "fixed": ["intercept"], "random": ["intercept"]},
                {"name": "y2", "fixed": ["intercept", "time"], "random": ["intercept"]},
            ],
        }
    )
    with pytest.raises(ValidityError, match="dimension mismatch"):
        build_designs(toy, other)


def test_write_dataset_round_trip(tmp_path, toy_files, toy_spec):
    ds = load_dataset(*toy_files, toy_spec)
    write_dataset(ds, tmp_path / "long2.csv", tmp_path / "surv2.csv")
    again = load_dataset(tmp_path / "long2.csv", tmp_path / "surv2.csv", toy_spec)

    pd.testing.assert_frame_equal(ds.long_frame, again.long_frame)
    pd.testing.assert_frame_equal(ds.surv_frame, again.surv_frame)


def test_model_spec_from_file(tmp_path, toy_spec):
    path = tmp_path / "spec.toml"
    path.write_text(SPEC_TOML)
    spec = ModelSpec.from_file(path)

    assert spec == toy_spec
    assert (spec.G, spec.K, spec.p, spec.q, spec.w) == (2, 2, 4, 2, 1)
    assert spec.beta_slices == (slice(0, 2), slice(2, 4))


def test_model_spec_dumps_round_trip(tmp_path, toy_spec):
    path = tmp_path / "spec.toml"
    path.write_text(toy_spec.dumps())
    assert ModelSpec.from_file(path) == toy_spec


def test_model_spec_invalid():
    with pytest.raises(ValidityError) as e:
        ModelSpec(biomarkers=(BiomarkerSpec("y1", ("intercept",), ()),), n_causes=0)
    assert "random term" in str(e.value)
    assert "causes" in str(e.value)


def test_model_spec_schema_error(tmp_path):
    path = tmp_path / "spec.toml"
    path.write_text('causes = 2\n[[biomarkers]]\nname = "y1"\n')
    with pytest.raises(SchemaError):
        ModelSpec.from_file(path)
