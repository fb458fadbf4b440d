"""
Domain types, validation and CSV ingestion for longitudinal and competing-risks survival data.

Longitudinal data come in long format, one row per measurement::

    subject,biomarker,time,value,<covariate columns...>

and survival data one row per subject::

    subject,time,cause,<covariate columns...>

with ``cause = 0`` for a censored subject. Which columns enter which design is declared by a
:class:`ModelSpec`, read from a small TOML file.
"""
import sys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import block_diag

from .errors import SchemaError, ValidityError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

INTERCEPT = "intercept"
TIME = "time"
SPECIAL_TERMS = (INTERCEPT, TIME)

LONG_COLUMNS = ["subject", "biomarker", "time", "value"]
SURV_COLUMNS = ["subject", "time", "cause"]


@dataclass(frozen=True)
class BiomarkerSpec:
    """
    Fixed and random design terms of one biomarker.

    Terms are column names of the longitudinal file, or the special terms ``intercept``
    (a column of ones) and ``time`` (the measurement time).
    """

    name: str
    fixed: tuple[str, ...]
    random: tuple[str, ...]

    @property
    def p(self) -> int:
        return len(self.fixed)

    @property
    def q(self) -> int:
        return len(self.random)

    @property
    def covariate_columns(self) -> set[str]:
        return {term for term in self.fixed + self.random if term not in SPECIAL_TERMS}


@dataclass(frozen=True)
class ModelSpec:
    """
    Mapping from input columns to the designs of the joint model.

    Args:
        biomarkers (tuple[BiomarkerSpec, ...]): One entry per longitudinal biomarker, in the order of
            the ``biomarker`` index column (1-based).
        n_causes (int): Number of competing causes K.
        survival (tuple[str, ...]): Survival-file columns forming W.

    Raises:
        ValidityError: If any dimension invariant is violated.
    """

    biomarkers: tuple[BiomarkerSpec, ...]
    n_causes: int
    survival: tuple[str, ...] = ()

    def __post_init__(self):
        ok, errors = self.valid(why=True)
        if not ok:
            raise ValidityError("Invalid model specification:\n\t* " + "\n\t* ".join(errors))

    def valid(self, why: bool = False):
        errors = []
        if not self.biomarkers:
            errors.append("At least one biomarker is required")
        if self.n_causes < 1:
            errors.append("``causes`` must be at least 1")
        names = [bm.name for bm in self.biomarkers]
        if len(set(names)) != len(names):
            errors.append("Biomarker names must be unique")
        for bm in self.biomarkers:
            if bm.p < 1:
                errors.append(f"Biomarker {bm.name} needs at least one fixed term")
            if bm.q < 1:
                errors.append(f"Biomarker {bm.name} needs at least one random term")
            if len(set(bm.fixed)) != bm.p or len(set(bm.random)) != bm.q:
                errors.append(f"Biomarker {bm.name} repeats a design term")
        if set(self.survival) & set(SPECIAL_TERMS):
            errors.append("Survival covariates cannot contain ``intercept`` or ``time``")
        if len(set(self.survival)) != len(self.survival):
            errors.append("Survival covariates repeat a column")

        if why:
            return (not errors, errors)
        return not errors

    @property
    def G(self) -> int:
        return len(self.biomarkers)

    @property
    def K(self) -> int:
        return self.n_causes

    @property
    def p_g(self) -> tuple[int, ...]:
        return tuple(bm.p for bm in self.biomarkers)

    @property
    def q_g(self) -> tuple[int, ...]:
        return tuple(bm.q for bm in self.biomarkers)

    @property
    def p(self) -> int:
        return sum(self.p_g)

    @property
    def q(self) -> int:
        return sum(self.q_g)

    @property
    def w(self) -> int:
        return len(self.survival)

    @cached_property
    def beta_slices(self) -> tuple[slice, ...]:
        return _slices(self.p_g)

    @cached_property
    def b_slices(self) -> tuple[slice, ...]:
        return _slices(self.q_g)

    @property
    def long_columns(self) -> list[str]:
        """Covariate columns the longitudinal file must provide."""
        columns = set()
        for bm in self.biomarkers:
            columns |= bm.covariate_columns
        return sorted(columns)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        try:
            biomarkers = tuple(
                BiomarkerSpec(
                    name=str(bm.get("name", f"y{i + 1}")),
                    fixed=tuple(bm["fixed"]),
                    random=tuple(bm["random"]),
                )
                for i, bm in enumerate(data["biomarkers"])
            )
            return cls(
                biomarkers=biomarkers,
                n_causes=int(data["causes"]),
                survival=tuple(data.get("survival", ())),
            )
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Model specification is missing or mistypes a key: {e}") from e

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelSpec":
        """Read a TOML model specification."""
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise SchemaError(f"Cannot parse model specification {path}: {e}") from e
        return cls.from_dict(data)

    def dumps(self) -> str:
        """Serialize to the TOML layout understood by :meth:`from_file`."""

        def array(items):
            return "[" + ", ".join(f'"{item}"' for item in items) + "]"

        lines = [f"causes = {self.n_causes}", f"survival = {array(self.survival)}", ""]
        for bm in self.biomarkers:
            lines += [
                "[[biomarkers]]",
                f'name = "{bm.name}"',
                f"fixed = {array(bm.fixed)}",
                f"random = {array(bm.random)}",
                "",
            ]
        return "\n".join(lines)


def _slices(sizes) -> tuple[slice, ...]:
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))


@dataclass(frozen=True, eq=False)
class LongObs:
    """A single longitudinal measurement Y_ig(t_ijg) with its design rows."""

    subject_id: str
    biomarker: int
    time: float
    value: float
    fixed_covariates: np.ndarray
    random_covariates: np.ndarray


@dataclass(frozen=True, eq=False)
class SurvRecord:
    """Observed competing-risks outcome (T_i, D_i) with baseline covariates W_i. Cause 0 is censoring."""

    subject_id: str
    time: float
    cause: int
    covariates: np.ndarray


@dataclass(frozen=True, eq=False)
class LongBlock:
    """All measurements of one biomarker for one subject."""

    times: np.ndarray
    values: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class Subject:
    id: str
    blocks: tuple[LongBlock, ...]
    surv: SurvRecord

    @property
    def n_obs(self) -> tuple[int, ...]:
        return tuple(block.n for block in self.blocks)


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Validated longitudinal and survival data, sorted by subject id.

    Instances are immutable and can be shared between threads.
    """

    spec: ModelSpec
    subjects: tuple[Subject, ...]
    long_frame: pd.DataFrame = field(repr=False)
    surv_frame: pd.DataFrame = field(repr=False)
    dropped_rows: int = 0

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def T(self) -> np.ndarray:
        return np.array([s.surv.time for s in self.subjects], dtype=float)

    @cached_property
    def D(self) -> np.ndarray:
        return np.array([s.surv.cause for s in self.subjects], dtype=int)

    @cached_property
    def W(self) -> np.ndarray:
        return np.array([s.surv.covariates for s in self.subjects], dtype=float).reshape(
            self.n, self.spec.w
        )

    def observations(self) -> Iterator[LongObs]:
        """Iterate over all longitudinal measurements in dataset order."""
        for subject in self.subjects:
            for g, block in enumerate(subject.blocks):
                for j in range(block.n):
                    yield LongObs(
                        subject_id=subject.id,
                        biomarker=g + 1,
                        time=float(block.times[j]),
                        value=float(block.values[j]),
                        fixed_covariates=block.X[j],
                        random_covariates=block.Z[j],
                    )

    def summary(self) -> dict:
        """Counts and rates describing the dataset."""
        counts = np.array([s.n_obs for s in self.subjects]).reshape(self.n, self.spec.G)
        return {
            "subjects": self.n,
            "measurements": counts.sum(axis=0).tolist(),
            "mean_profile_length": float(counts.mean()) if self.n else 0.0,
            "censoring_rate": float(np.mean(self.D == 0)) if self.n else 0.0,
            "event_rates": [float(np.mean(self.D == k)) if self.n else 0.0
                            for k in range(1, self.spec.K + 1)],
            "dropped_rows": self.dropped_rows,
        }

    @classmethod
    def from_frames(
        cls,
        long_df: pd.DataFrame,
        surv_df: pd.DataFrame,
        spec: ModelSpec,
        drop_post_event: bool = True,
    ) -> "Dataset":
        """
        Validate longitudinal and survival tables and build a dataset.

        Args:
            long_df (pd.DataFrame): Longitudinal table.
            surv_df (pd.DataFrame): Survival table.
            spec (ModelSpec): Model specification naming the covariate columns.
            drop_post_event (bool, optional): Drop measurements taken after T_i instead of raising.
                Defaults to True.

        Returns:
            Dataset: The validated dataset.

        Raises:
            SchemaError: Missing columns or non-numeric cells.
            ValidityError: Any other violated invariant.
        """
        long_df = Validate.columns(long_df, LONG_COLUMNS + spec.long_columns, "longitudinal")
        surv_df = Validate.columns(surv_df, SURV_COLUMNS + list(spec.survival), "survival")

        long_df = Validate.numeric(long_df, LONG_COLUMNS[1:] + spec.long_columns, "longitudinal")
        surv_df = Validate.numeric(surv_df, SURV_COLUMNS[1:] + list(spec.survival), "survival")

        Validate.integer_column(long_df, "biomarker", 1, spec.G, "unknown biomarker index")
        Validate.integer_column(surv_df, "cause", 0, spec.K, "unknown cause index")
        long_df["biomarker"] = long_df["biomarker"].astype(int)
        surv_df["cause"] = surv_df["cause"].astype(int)

        if not (np.isfinite(long_df["time"]) & (long_df["time"] >= 0)).all():
            raise ValidityError("Longitudinal times must be finite and nonnegative")
        if not np.isfinite(long_df["value"]).all():
            raise ValidityError("Longitudinal values must be finite")
        if not (np.isfinite(surv_df["time"]) & (surv_df["time"] > 0)).all():
            raise ValidityError("Survival times must be finite and positive")

        duplicated = surv_df["subject"][surv_df["subject"].duplicated()]
        if len(duplicated):
            raise ValidityError(f"duplicate survival record for subject(s) {sorted(set(duplicated))}")

        missing = set(long_df["subject"]) - set(surv_df["subject"])
        if missing:
            raise ValidityError(f"No survival record for subject(s) {sorted(missing)}")

        event_time = long_df["subject"].map(surv_df.set_index("subject")["time"])
        late = long_df["time"] > event_time
        dropped = int(late.sum())
        if dropped and not drop_post_event:
            raise ValidityError(
                f"longitudinal time after T_i in {dropped} row(s), e.g. subject "
                f"{long_df.loc[late, 'subject'].iloc[0]}"
            )
        if dropped:
            logger.info(f"Dropped {dropped} longitudinal rows measured after the survival time")
            long_df = long_df.loc[~late]

        order = Validate.subject_order(surv_df["subject"])
        surv_df = surv_df.set_index("subject").loc[order].reset_index()
        rank = {sid: i for i, sid in enumerate(order)}
        long_df = (
            long_df.assign(_rank=long_df["subject"].map(rank))
            .sort_values(["_rank", "biomarker", "time"], kind="mergesort")
            .drop(columns="_rank")
            .reset_index(drop=True)
        )

        subjects = Build.subjects(long_df, surv_df, spec)
        logger.debug(f"Built dataset with {len(subjects)} subjects and {len(long_df)} measurements")
        return cls(
            spec=spec,
            subjects=subjects,
            long_frame=long_df,
            surv_frame=surv_df,
            dropped_rows=dropped,
        )


class Validate:
    """Checks applied to raw input tables before a :class:`Dataset` is built."""

    @staticmethod
    def columns(df: pd.DataFrame, required: list[str], label: str) -> pd.DataFrame:
        missing = [column for column in required if column not in df.columns]
        if missing:
            raise SchemaError(f"missing column(s) {missing} in {label} data")
        df = df.copy()
        df["subject"] = df["subject"].astype(str)
        return df

    @staticmethod
    def numeric(df: pd.DataFrame, columns: list[str], label: str) -> pd.DataFrame:
        for column in columns:
            converted = pd.to_numeric(df[column], errors="coerce")
            bad = converted.isna()
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise SchemaError(
                    f"non-numeric cell {df[column].iloc[row]!r} in column {column!r} "
                    f"of {label} data (row {row + 1})"
                )
            df[column] = converted.astype(float)
        covariates = [c for c in columns if c not in ("time", "value", "biomarker", "cause")]
        if covariates and not np.isfinite(df[covariates].to_numpy()).all():
            raise ValidityError(f"Covariates of {label} data must be finite")
        return df

    @staticmethod
    def integer_column(df: pd.DataFrame, column: str, low: int, high: int, message: str):
        values = df[column].to_numpy()
        bad = (values != np.round(values)) | (values < low) | (values > high)
        if bad.any():
            raise ValidityError(f"{message}: {values[bad][0]:g} (allowed {low}..{high})")

    @staticmethod
    def subject_order(ids: pd.Series) -> list[str]:
        """Sort ids numerically when they all are integers, lexicographically otherwise."""
        ids = list(ids)
        try:
            return sorted(ids, key=lambda x: (int(x), x))
        except ValueError:
            return sorted(ids)


class Build:
    """Construction of per-subject blocks and stacked designs."""

    @staticmethod
    def term_matrix(rows: pd.DataFrame, terms: tuple[str, ...]) -> np.ndarray:
        columns = []
        for term in terms:
            if term == INTERCEPT:
                columns.append(np.ones(len(rows)))
            elif term == TIME:
                columns.append(rows["time"].to_numpy(dtype=float))
            else:
                columns.append(rows[term].to_numpy(dtype=float))
        return np.column_stack(columns) if columns else np.empty((len(rows), 0))

    @staticmethod
    def subjects(long_df: pd.DataFrame, surv_df: pd.DataFrame, spec: ModelSpec) -> tuple[Subject, ...]:
        grouped = {key: rows for key, rows in long_df.groupby(["subject", "biomarker"], sort=False)}
        empty = long_df.iloc[0:0]

        subjects = []
        for record in surv_df.to_dict("records"):
            sid = record["subject"]
            blocks = []
            for g, bm in enumerate(spec.biomarkers):
                rows = grouped.get((sid, g + 1), empty)
                blocks.append(
                    LongBlock(
                        times=rows["time"].to_numpy(dtype=float),
                        values=rows["value"].to_numpy(dtype=float),
                        X=Build.term_matrix(rows, bm.fixed),
                        Z=Build.term_matrix(rows, bm.random),
                    )
                )
            surv = SurvRecord(
                subject_id=sid,
                time=float(record["time"]),
                cause=int(record["cause"]),
                covariates=np.array([float(record[c]) for c in spec.survival]),
            )
            subjects.append(Subject(id=sid, blocks=tuple(blocks), surv=surv))
        return tuple(subjects)

    @staticmethod
    def cross_products(designs: list["SubjectDesign"], spec: ModelSpec) -> dict:
        """Per-biomarker XᵀX, Xᵀy, XᵀZ, ZᵀZ, Zᵀy and yᵀy stacked over subjects."""
        n = len(designs)
        products = {key: [] for key in ("xtx", "xty", "xtz", "ztz", "zty", "yty")}
        for g in range(spec.G):
            p, q = spec.p_g[g], spec.q_g[g]
            X = [d.X_blocks[g] for d in designs]
            Z = [d.Z_blocks[g] for d in designs]
            y = [d.y_blocks[g] for d in designs]
            products["xtx"].append(np.array([x.T @ x for x in X]).reshape(n, p, p))
            products["xty"].append(np.array([x.T @ v for x, v in zip(X, y)]).reshape(n, p))
            products["xtz"].append(np.array([x.T @ z for x, z in zip(X, Z)]).reshape(n, p, q))
            products["ztz"].append(np.array([d.ztz_blocks[g] for d in designs]).reshape(n, q, q))
            products["zty"].append(np.array([z.T @ v for z, v in zip(Z, y)]).reshape(n, q))
            products["yty"].append(np.array([float(v @ v) for v in y]).reshape(n))
        return {key: tuple(value) for key, value in products.items()}


def _read_csv(path: str | Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={"subject": str})
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise SchemaError(f"Cannot parse {path}: {e}") from e


def load_dataset(
    long_file: str | Path,
    surv_file: str | Path,
    spec: ModelSpec,
    drop_post_event: bool = True,
) -> Dataset:
    """
    Read and validate the longitudinal and survival CSV files.

    Args:
        long_file (str | Path): Longitudinal CSV.
        surv_file (str | Path): Survival CSV.
        spec (ModelSpec): Model specification.
        drop_post_event (bool, optional): Drop measurements after T_i instead of raising.

    Returns:
        Dataset: Validated dataset sorted by subject id.

    Raises:
        SchemaError: If a file is empty, cannot be parsed as CSV or lacks required columns.
        ValidityError: If the data violate the model specification.
    """
    logger.debug(f"Reading {long_file} and {surv_file}")
    long_df = _read_csv(long_file)
    surv_df = _read_csv(surv_file)
    return Dataset.from_frames(long_df, surv_df, spec, drop_post_event=drop_post_event)


def write_dataset(ds: Dataset, long_file: str | Path, surv_file: str | Path) -> None:
    """Write a dataset to the two CSV files read by :func:`load_dataset`."""
    long_columns = LONG_COLUMNS + ds.spec.long_columns
    surv_columns = SURV_COLUMNS + list(ds.spec.survival)

    long_df = ds.long_frame[long_columns].copy()
    long_df["biomarker"] = long_df["biomarker"].astype(int)
    long_df.to_csv(long_file, index=False)

    surv_df = ds.surv_frame[surv_columns].copy()
    surv_df["cause"] = surv_df["cause"].astype(int)
    surv_df.to_csv(surv_file, index=False)
    logger.info(f"Wrote {ds.n} subjects to {long_file} and {surv_file}")


@dataclass(frozen=True, eq=False)
class SubjectDesign:
    """
    Stacked designs of one subject.

    Design matrices are stored row-major (n_i x p and n_i x q), i.e. they are the transposes of the
    column-stacked ``X_i`` / ``Z_i`` of the model formulas, so that ``X @ beta`` is the fixed part of
    the mean. The residual covariance V_i is diagonal with σ²_g on the rows of block g and is never
    materialized.
    """

    spec: ModelSpec
    y_blocks: tuple[np.ndarray, ...]
    X_blocks: tuple[np.ndarray, ...]
    Z_blocks: tuple[np.ndarray, ...]
    time: float
    cause: int
    w: np.ndarray

    @property
    def n_g(self) -> tuple[int, ...]:
        return tuple(len(y) for y in self.y_blocks)

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate(self.y_blocks) if self.y_blocks else np.empty(0)

    @cached_property
    def X(self) -> np.ndarray:
        return block_diag(*self.X_blocks)

    @cached_property
    def Z(self) -> np.ndarray:
        return block_diag(*self.Z_blocks)

    def row_sigma2(self, sigma2: np.ndarray) -> np.ndarray:
        return np.repeat(np.asarray(sigma2, dtype=float), self.n_g)

    def x_matvec(self, beta: np.ndarray) -> np.ndarray:
        return np.concatenate([X @ beta[s] for X, s in zip(self.X_blocks, self.spec.beta_slices)])

    def z_matvec(self, b: np.ndarray) -> np.ndarray:
        return np.concatenate([Z @ b[s] for Z, s in zip(self.Z_blocks, self.spec.b_slices)])

    def _row_slices(self) -> tuple[slice, ...]:
        return _slices(self.n_g)

    def x_rmatvec(self, v: np.ndarray) -> np.ndarray:
        """X_iᵀ v computed block by block."""
        return np.concatenate([X.T @ v[s] for X, s in zip(self.X_blocks, self._row_slices())])

    def z_rmatvec(self, v: np.ndarray) -> np.ndarray:
        """Z_iᵀ v computed block by block."""
        return np.concatenate([Z.T @ v[s] for Z, s in zip(self.Z_blocks, self._row_slices())])

    @cached_property
    def ztz_blocks(self) -> tuple[np.ndarray, ...]:
        return tuple(Z.T @ Z for Z in self.Z_blocks)


@dataclass(frozen=True, eq=False)
class DesignSet:
    """
    Per-subject designs plus per-biomarker cross products stacked over subjects.

    The cross products (arrays with a leading subject axis) feed the closed-form M-step updates and
    the score vectors.
    """

    spec: ModelSpec
    subjects: tuple[SubjectDesign, ...]
    T: np.ndarray
    D: np.ndarray
    W: np.ndarray
    xtx: tuple[np.ndarray, ...]
    xty: tuple[np.ndarray, ...]
    xtz: tuple[np.ndarray, ...]
    ztz: tuple[np.ndarray, ...]
    zty: tuple[np.ndarray, ...]
    yty: tuple[np.ndarray, ...]
    counts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.subjects)

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> SubjectDesign:
        return self.subjects[i]


def build_designs(ds: Dataset, spec: ModelSpec) -> DesignSet:
    """
    Stack each subject's per-biomarker designs into block-diagonal direct sums.

    Args:
        ds (Dataset): Validated dataset.
        spec (ModelSpec): Model specification; must match the one the dataset was built with.

    Returns:
        DesignSet: Per-subject designs and stacked cross products.

    Raises:
        ValidityError: If covariate dimensions do not match the specification.
    """
    if ds.spec.p_g != spec.p_g or ds.spec.q_g != spec.q_g or ds.spec.w != spec.w:
        raise ValidityError("dimension mismatch between dataset covariates and model specification")

    designs = []
    for subject in ds.subjects:
        for g, block in enumerate(subject.blocks):
            if block.X.shape[1] != spec.p_g[g] or block.Z.shape[1] != spec.q_g[g]:
                raise ValidityError(
                    f"dimension mismatch for subject {subject.id}, biomarker {g + 1}: "
                    f"X has {block.X.shape[1]} columns (expected {spec.p_g[g]}), "
                    f"Z has {block.Z.shape[1]} columns (expected {spec.q_g[g]})"
                )
        if len(subject.surv.covariates) != spec.w:
            raise ValidityError(f"dimension mismatch in survival covariates of subject {subject.id}")
        designs.append(
            SubjectDesign(
                spec=spec,
                y_blocks=tuple(block.values for block in subject.blocks),
                X_blocks=tuple(block.X for block in subject.blocks),
                Z_blocks=tuple(block.Z for block in subject.blocks),
                time=subject.surv.time,
                cause=subject.surv.cause,
                w=subject.surv.covariates,
            )
        )

    return DesignSet(
        spec=spec,
        subjects=tuple(designs),
        T=ds.T.copy(),
        D=ds.D.copy(),
        W=ds.W.copy(),
        counts=np.array([d.n_g for d in designs], dtype=int).reshape(len(designs), spec.G),
        **Build.cross_products(designs, spec),
    )
