"""
Simulation of joint longitudinal and competing-risks data.

Each subject gets baseline covariates X1 ~ Bernoulli(p) and X2 ~ Uniform(a, b), random effects
b_i ~ N(0, Σ), biomarker measurements on the visit grid 0, h, 2h, … and, for every cause, a latent
event time from a constant baseline hazard

    λ_k(t | X, b) = λ₀k exp(W_iᵀγ_k + α_kᵀb_i)

sampled by exponential inverse transform. Censoring is uniform and measurements after the observed
time are discarded.

Each subject draws from its own Philox stream spawned from the seed, so results do not depend on the
number of worker threads.
"""
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from .data_model import INTERCEPT, TIME, BiomarkerSpec, Dataset, ModelSpec
from .errors import SchemaError, ValidityError
from .params import Params

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COVARIATES = ("X1", "X2")
DEFAULT_FIXED = (INTERCEPT, "X1", "X2", TIME)
DEFAULT_RANDOM = (INTERCEPT, TIME)


@dataclass(frozen=True)
class SimBiomarker:
    """Truth of one simulated biomarker: fixed effects for ``fixed`` terms, random terms."""

    name: str
    beta: tuple[float, ...]
    fixed: tuple[str, ...] = DEFAULT_FIXED
    random: tuple[str, ...] = DEFAULT_RANDOM


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """
    A data-generating scenario.

    Args:
        biomarkers (tuple[SimBiomarker, ...]): Longitudinal submodels.
        sigma2 (tuple[float, ...]): Residual variances, one per biomarker.
        Sigma (np.ndarray): Random-effects covariance.
        gamma (np.ndarray): Survival covariate effects, shape (K, len(survival)).
        alpha (np.ndarray): Associations, shape (K, q).
        baseline_hazards (tuple[float, ...]): Constant baseline hazard λ₀k per cause.
        survival (tuple[str, ...]): Covariates forming W.
        n (int): Number of subjects.
        censoring (tuple[float, float]): Bounds of the uniform censoring distribution.
        visit_step (float): Spacing of the measurement grid.
        x1_probability (float): Success probability of X1.
        x2_range (tuple[float, float]): Bounds of X2.
    """

    biomarkers: tuple[SimBiomarker, ...]
    sigma2: tuple[float, ...]
    Sigma: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    baseline_hazards: tuple[float, ...]
    survival: tuple[str, ...] = COVARIATES
    n: int = 800
    censoring: tuple[float, float] = (4.0, 8.0)
    visit_step: float = 0.7
    x1_probability: float = 0.5
    x2_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        for name in ("Sigma", "gamma", "alpha"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))

    def valid(self, why: bool = False):
        errors = []
        q = sum(len(bm.random) for bm in self.biomarkers)
        K = len(self.baseline_hazards)
        for bm in self.biomarkers:
            if len(bm.beta) != len(bm.fixed):
                errors.append(f"Biomarker {bm.name}: {len(bm.beta)} effects for {len(bm.fixed)} terms")
            unknown = set(bm.fixed + bm.random) - set(COVARIATES) - {INTERCEPT, TIME}
            if unknown:
                errors.append(f"Biomarker {bm.name} uses unknown terms {sorted(unknown)}")
        if set(self.survival) - set(COVARIATES):
            errors.append(f"Survival covariates must be among {COVARIATES}")
        if len(self.sigma2) != len(self.biomarkers) or any(s <= 0 for s in self.sigma2):
            errors.append("One positive residual variance per biomarker is required")
        if self.Sigma.shape != (q, q):
            errors.append(f"Sigma has shape {self.Sigma.shape}, expected {(q, q)}")
        elif not np.allclose(self.Sigma, self.Sigma.T) or np.linalg.eigvalsh(self.Sigma).min() < -1e-12:
            errors.append("Sigma must be symmetric positive semidefinite")
        if self.gamma.shape != (K, len(self.survival)):
            errors.append(f"gamma has shape {self.gamma.shape}, expected {(K, len(self.survival))}")
        if self.alpha.shape != (K, q):
            errors.append(f"alpha has shape {self.alpha.shape}, expected {(K, q)}")
        if any(h < 0 for h in self.baseline_hazards):
            errors.append("Baseline hazards must be nonnegative")
        if self.n < 1:
            errors.append("At least one subject is required")
        low, high = self.censoring
        if not 0 < low <= high:
            errors.append("Censoring bounds must satisfy 0 < low <= high")
        if self.visit_step <= 0:
            errors.append("Visit step must be positive")

        if why:
            return (not errors, errors)
        return not errors

    def check(self) -> "ScenarioConfig":
        ok, errors = self.valid(why=True)
        if not ok:
            raise ValidityError("Invalid scenario:\n\t* " + "\n\t* ".join(errors))
        return self

    @property
    def K(self) -> int:
        return len(self.baseline_hazards)

    def model_spec(self) -> ModelSpec:
        """The model specification matching the generated data."""
        return ModelSpec(
            biomarkers=tuple(
                BiomarkerSpec(name=bm.name, fixed=bm.fixed, random=bm.random)
                for bm in self.biomarkers
            ),
            n_causes=self.K,
            survival=self.survival,
        )

    def true_params(self) -> Params:
        """Ω used to generate the data; the baseline hazards are continuous and left empty."""
        return Params(
            beta=np.concatenate([bm.beta for bm in self.biomarkers]),
            sigma2=np.array(self.sigma2),
            Sigma=self.Sigma.copy(),
            gamma=self.gamma.copy(),
            alpha=self.alpha.copy(),
        )

    def replace(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        defaults = default_scenario()
        try:
            biomarkers = tuple(
                SimBiomarker(
                    name=str(bm.get("name", f"y{i + 1}")),
                    beta=tuple(float(x) for x in bm["beta"]),
                    fixed=tuple(bm.get("fixed", DEFAULT_FIXED)),
                    random=tuple(bm.get("random", DEFAULT_RANDOM)),
                )
                for i, bm in enumerate(data["biomarkers"])
            )
            q = sum(len(bm.random) for bm in biomarkers)
            Sigma = data.get("Sigma", "identity")
            scenario = cls(
                biomarkers=biomarkers,
                sigma2=tuple(float(x) for x in data["sigma2"]),
                Sigma=np.eye(q) if Sigma == "identity" else np.array(Sigma, dtype=float),
                gamma=np.array(data["gamma"], dtype=float),
                alpha=np.array(data["alpha"], dtype=float),
                baseline_hazards=tuple(float(x) for x in data["baseline_hazards"]),
                survival=tuple(data.get("survival", defaults.survival)),
                n=int(data.get("n", defaults.n)),
                censoring=tuple(data.get("censoring", defaults.censoring)),
                visit_step=float(data.get("visit_step", defaults.visit_step)),
                x1_probability=float(data.get("x1_probability", defaults.x1_probability)),
                x2_range=tuple(data.get("x2_range", defaults.x2_range)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"Scenario is missing or mistypes a key: {e}") from e
        return scenario.check()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        """Read a TOML scenario. Omitted optional keys take the default scenario's values."""
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise SchemaError(f"Cannot parse scenario {path}: {e}") from e
        return cls.from_dict(data)


def default_scenario() -> ScenarioConfig:
    """Five biomarkers, two competing causes, random intercepts and slopes (q = 10)."""
    betas = [
        (5.0, 1.5, 2.0, 1.0),
        (10.0, 1.0, 2.0, 1.0),
        (10.0, -2.0, 1.0, 0.5),
        (7.0, -2.0, 2.0, 1.0),
        (5.0, 1.0, 2.0, 2.0),
    ]
    association = [0.5, 0.7, -0.5, 0.5, 0.1, 0.5, -0.1, 0.4, 0.2, 0.3]
    return ScenarioConfig(
        biomarkers=tuple(SimBiomarker(name=f"y{g + 1}", beta=beta) for g, beta in enumerate(betas)),
        sigma2=(0.5,) * 5,
        Sigma=np.eye(10),
        gamma=np.array([[1.0, 0.5], [-0.5, 0.5]]),
        alpha=np.array([association, association]),
        baseline_hazards=(0.05, 0.025),
    )


@dataclass(eq=False)
class _SubjectDraw:
    survival: dict
    rows: list[dict] = field(default_factory=list)


def latent_event_times(rng: np.random.Generator, rates: np.ndarray) -> np.ndarray:
    """Exponential inverse transform, one latent time per cause; infinite for a zero rate."""
    rates = np.asarray(rates, dtype=float)
    uniform = rng.uniform(size=rates.shape)
    with np.errstate(divide="ignore"):
        return np.where(rates > 0, -np.log1p(-uniform) / rates, np.inf)


def _term_values(term: str, covariates: dict, times: np.ndarray) -> np.ndarray:
    if term == INTERCEPT:
        return np.ones_like(times)
    if term == TIME:
        return times
    return np.full_like(times, covariates[term])


def _draw_subject(scn: ScenarioConfig, index: int, stream: np.random.SeedSequence) -> _SubjectDraw:
    rng = np.random.Generator(np.random.Philox(stream))
    covariates = {
        "X1": float(rng.binomial(1, scn.x1_probability)),
        "X2": float(rng.uniform(*scn.x2_range)),
    }
    q = scn.Sigma.shape[0]
    b = rng.multivariate_normal(np.zeros(q), scn.Sigma, method="svd")

    w = np.array([covariates[c] for c in scn.survival])
    rates = np.array(scn.baseline_hazards) * np.exp(scn.gamma @ w + scn.alpha @ b)
    latent = latent_event_times(rng, rates)
    censor = float(rng.uniform(*scn.censoring))
    first = int(np.argmin(latent)) if len(latent) else 0
    if len(latent) and latent[first] < censor:
        time, cause = float(latent[first]), first + 1
    else:
        time, cause = censor, 0

    sid = str(index + 1)
    draw = _SubjectDraw(survival={"subject": sid, "time": time, "cause": cause, **covariates})
    visits = np.arange(int(np.floor(time / scn.visit_step)) + 1) * scn.visit_step
    visits = visits[visits <= time]
    offset = 0
    for g, bm in enumerate(scn.biomarkers):
        X = np.column_stack([_term_values(t, covariates, visits) for t in bm.fixed])
        Z = np.column_stack([_term_values(t, covariates, visits) for t in bm.random])
        b_g = b[offset : offset + len(bm.random)]
        offset += len(bm.random)
        noise = rng.normal(0.0, np.sqrt(scn.sigma2[g]), size=len(visits))
        values = X @ np.asarray(bm.beta) + Z @ b_g + noise
        draw.rows.extend(
            {"subject": sid, "biomarker": g + 1, "time": t, "value": y, **covariates}
            for t, y in zip(visits, values)
        )
    return draw


def generate(
    scn: ScenarioConfig,
    seed: int | np.random.SeedSequence,
    n: int | None = None,
    threads: int = 1,
) -> Dataset:
    """
    Draw one dataset from a scenario.

    Args:
        scn (ScenarioConfig): Scenario.
        seed (int | np.random.SeedSequence): Root seed; subject i uses the i-th spawned stream.
        n (int, optional): Number of subjects, ``scn.n`` when omitted.
        threads (int): Worker threads.

    Returns:
        Dataset: Validated dataset, identical for identical seeds regardless of ``threads``.

    Raises:
        ValidityError: If the scenario is inconsistent, e.g. Σ is not positive semidefinite.
    """
    scn.check()
    n = scn.n if n is None else n
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(n)

    def draw(i: int) -> _SubjectDraw:
        return _draw_subject(scn, i, streams[i])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            draws = list(executor.map(draw, range(n)))
    else:
        draws = [draw(i) for i in range(n)]

    long_columns = ["subject", "biomarker", "time", "value", *COVARIATES]
    long_df = pd.DataFrame([row for d in draws for row in d.rows], columns=long_columns)
    surv_df = pd.DataFrame([d.survival for d in draws], columns=["subject", "time", "cause", *COVARIATES])
    ds = Dataset.from_frames(long_df, surv_df, scn.model_spec(), drop_post_event=False)
    logger.debug(f"Generated {n} subjects: {ds.summary()}")
    return ds
