from copy import deepcopy

import pandas as pd
import pytest
from fixtures.instances import random_problem
from fixtures.scenarios import INDEPENDENT, SMALL
from fixtures.toy import LONG as TOY_LONG
from fixtures.toy import SPEC as TOY_SPEC
from fixtures.toy import SURV as TOY_SURV
from loguru import logger

from jm_scan import Dataset, FitOptions, ModelSpec, ScenarioConfig, fit, generate


@pytest.fixture(autouse=True, scope="session")
def enable_logging():
    logger.enable("jm_scan")


@pytest.fixture
def toy_tables():
    return pd.DataFrame(deepcopy(TOY_LONG)), pd.DataFrame(deepcopy(TOY_SURV))


@pytest.fixture
def toy_spec():
    return ModelSpec.from_dict(deepcopy(TOY_SPEC))


@pytest.fixture
def toy(toy_tables, toy_spec):
    long, surv = toy_tables
    return Dataset.from_frames(long, surv, toy_spec)


@pytest.fixture
def toy_files(tmp_path, toy_tables):
    long, surv = toy_tables
    long.to_csv(tmp_path / "long.csv", index=False)
    surv.to_csv(tmp_path / "surv.csv", index=False)
    return tmp_path / "long.csv", tmp_path / "surv.csv"


@pytest.fixture
def problem():
    return random_problem(seed=11)


@pytest.fixture
def small_scenario():
    return ScenarioConfig.from_dict(deepcopy(SMALL))


@pytest.fixture
def independent_scenario():
    return ScenarioConfig.from_dict(deepcopy(INDEPENDENT))


@pytest.fixture(scope="module")
def small_dataset():
    return generate(ScenarioConfig.from_dict(deepcopy(SMALL)), seed=7)


@pytest.fixture(scope="module")
def small_fit(small_dataset):
    spec = small_dataset.spec
    return fit(small_dataset, spec, FitOptions())
