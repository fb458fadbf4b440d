"""
Standard errors from the profile likelihood.

With the baseline hazards profiled out, the per-subject score ∇_Ω l^(i) is approximated by the
derivative of the expected complete-data log-likelihood at the fitted parameters, using the normal
approximations of the last E-step. The covariance of Ω̂ is the inverse of Σ_i ∇l^(i) ∇l^(i)ᵀ.

The profiled survival scores need, per cause, the risk-set sums

    S0(t) = Σ_{R(t)} e_r,  S1γ(t) = Σ_{R(t)} e_r W_r,  S1α(t) = Σ_{R(t)} e_r (Σ̂_rα + b̂_r)

with e_r = exp(W_rᵀγ) E_r[exp(αᵀb_r)], and the step-function lookups B(T_i) of
b1 = d/S0, b2 = d S1γ/S0², b3 = d S1α/S0². All of them come from the risk-set engine.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from loguru import logger

from .data_model import DesignSet
from .errors import SingularMatrixError, ValidityError
from .mstep import expected_residual_ss, risk_weights
from .params import Params, omega_blocks, omega_size
from .posterior import PosteriorSet, Prior
from .riskset_scan import Engine


@dataclass(frozen=True, eq=False)
class ScanTables:
    """Risk-set aggregates of one cause at the fitted parameters, in subject order where per subject."""

    weights: np.ndarray
    shifted: np.ndarray
    S0: np.ndarray
    S1_gamma: np.ndarray
    S1_alpha: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray
    ratio_gamma: np.ndarray
    ratio_alpha: np.ndarray


def build_scan_tables(
    designs: DesignSet, params: Params, posteriors: PosteriorSet, engine: Engine
) -> list[ScanTables]:
    """One :class:`ScanTables` per cause."""
    tables = []
    for k in range(designs.spec.K):
        weights = risk_weights(designs, params, posteriors, k)
        shifted = posteriors.shifted_modes(params.alpha[k])
        S0 = engine.riskset_sums(k, weights)
        S1_gamma = engine.riskset_sums(k, weights[:, None] * designs.W)
        S1_alpha = engine.riskset_sums(k, weights[:, None] * shifted)
        if len(S0) and not np.all(S0 > 0):
            raise ValidityError(f"Empty risk-set weights for cause {k + 1}")
        d = engine.event_counts(k).astype(float)
        tables.append(
            ScanTables(
                weights=weights,
                shifted=shifted,
                S0=S0,
                S1_gamma=S1_gamma,
                S1_alpha=S1_alpha,
                B1=engine.step_values(k, d / S0),
                B2=engine.step_values(k, (d / S0**2)[:, None] * S1_gamma),
                B3=engine.step_values(k, (d / S0**2)[:, None] * S1_alpha),
                ratio_gamma=engine.at_event(k, S1_gamma / S0[:, None]),
                ratio_alpha=engine.at_event(k, S1_alpha / S0[:, None]),
            )
        )
    return tables


def score_matrix(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    tables: list[ScanTables],
    rows: np.ndarray | None = None,
) -> np.ndarray:
    """
    Per-subject scores ∇_Ω l^(i) for the subjects in ``rows`` (all by default), in packed Ω order.

    Raises:
        ValidityError: If ``tables`` does not hold one entry per cause.
    """
    spec = designs.spec
    if len(tables) != spec.K:
        raise ValidityError(f"Expected scan tables for {spec.K} causes, got {len(tables)}")
    rows = np.arange(designs.n) if rows is None else np.asarray(rows, dtype=int)
    sub = _Subset(posteriors, rows)
    blocks = omega_blocks(spec)
    scores = np.zeros((len(rows), omega_size(spec)))

    beta_columns, sigma2_columns = [], []
    for g in range(spec.G):
        sigma2 = params.sigma2[g]
        modes = sub.modes[:, spec.b_slices[g]]
        residual = (
            designs.xty[g][rows]
            - designs.xtx[g][rows] @ params.beta_g(spec, g)
            - np.einsum("ipq,iq->ip", designs.xtz[g][rows], modes)
        )
        beta_columns.append(residual / sigma2)
        rss = expected_residual_ss(designs, params, posteriors, g, rows)
        sigma2_columns.append(rss / (2 * sigma2**2) - designs.counts[rows, g] / (2 * sigma2))
    scores[:, blocks["beta"]] = np.hstack(beta_columns)
    scores[:, blocks["sigma2"]] = np.column_stack(sigma2_columns)

    Sigma_inv = Prior.from_params(params).Sigma_inv
    M = Sigma_inv @ sub.second_moments @ Sigma_inv - Sigma_inv
    # ½(2M − M∘I): off-diagonal entries stand for both symmetric positions
    diagonal = np.arange(spec.q)
    M[:, diagonal, diagonal] *= 0.5
    lower = np.tril_indices(spec.q)
    scores[:, blocks["Sigma"]] = M[:, lower[0], lower[1]]

    W = designs.W[rows]
    gamma_columns, alpha_columns = [], []
    for k, table in enumerate(tables):
        events = (designs.D[rows] == k + 1).astype(float)[:, None]
        weights = table.weights[rows][:, None]
        B1 = table.B1[rows][:, None]
        gamma_columns.append(
            events * (W - table.ratio_gamma[rows]) - weights * (B1 * W - table.B2[rows])
        )
        alpha_columns.append(
            events * (sub.modes - table.ratio_alpha[rows])
            - weights * (B1 * table.shifted[rows] - table.B3[rows])
        )
    scores[:, blocks["gamma"]] = np.hstack(gamma_columns)
    scores[:, blocks["alpha"]] = np.hstack(alpha_columns)
    return scores


class _Subset:
    def __init__(self, posteriors: PosteriorSet, rows: np.ndarray):
        self.modes = posteriors.modes[rows]
        covs = posteriors.covs[rows]
        self.second_moments = covs + self.modes[:, :, None] * self.modes[:, None, :]


def score_vector(
    i: int,
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    tables: list[ScanTables],
) -> np.ndarray:
    """∇_Ω l^(i) of a single subject."""
    return score_matrix(designs, params, posteriors, tables, rows=np.array([i]))[0]


@dataclass(frozen=True, eq=False)
class FisherResult:
    se: np.ndarray
    cov: np.ndarray
    min_eigenvalue: float
    information: np.ndarray


def empirical_fisher(scores: np.ndarray, free: np.ndarray | None = None) -> FisherResult:
    """
    Invert the empirical Fisher information Σ_i s_i s_iᵀ.

    Args:
        scores (np.ndarray): Score matrix, one row per subject.
        free (np.ndarray, optional): Boolean mask of the columns to include. Excluded components get
            NaN standard errors and covariances.

    Returns:
        FisherResult: Standard errors, covariance, and the minimal eigenvalue of the information.

    Raises:
        SingularMatrixError: If the information is singular.
    """
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValidityError("Score matrix contains non-finite entries")
    size = scores.shape[1]
    free = np.ones(size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    kept = scores[:, free]

    information = kept.T @ kept
    information = (information + information.T) / 2
    eigenvalues = np.linalg.eigvalsh(information)
    min_eigenvalue = float(eigenvalues.min()) if len(eigenvalues) else float("nan")
    if len(eigenvalues) and min_eigenvalue <= 1e-12 * max(1.0, float(eigenvalues.max())):
        raise SingularMatrixError("Empirical Fisher information is singular", min_eigenvalue)

    inverse = np.linalg.solve(information, np.eye(len(information)))
    inverse = (inverse + inverse.T) / 2
    cov = np.full((size, size), np.nan)
    cov[np.ix_(free, free)] = inverse
    se = np.full(size, np.nan)
    se[free] = np.sqrt(np.diag(inverse))
    logger.debug(f"Empirical Fisher information min eigenvalue {min_eigenvalue:.3e}")
    return FisherResult(se=se, cov=cov, min_eigenvalue=min_eigenvalue, information=information)


def standard_errors(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    engine: Engine,
    freeze_alpha: bool = False,
    threads: int = 1,
    chunk_size: int = 512,
) -> FisherResult:
    """
    Score matrix and empirical Fisher information at the fitted parameters.

    Scores of subject chunks may be computed in parallel; chunks are concatenated in subject order.
    """
    tables = build_scan_tables(designs, params, posteriors, engine)
    chunks = [
        np.arange(start, min(start + chunk_size, designs.n))
        for start in range(0, designs.n, chunk_size)
    ]

    def compute(rows: np.ndarray) -> np.ndarray:
        return score_matrix(designs, params, posteriors, tables, rows)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            parts = list(executor.map(compute, chunks))
    else:
        parts = [compute(rows) for rows in chunks]
    scores = np.vstack(parts)

    free = np.ones(scores.shape[1], dtype=bool)
    if freeze_alpha:
        free[omega_blocks(designs.spec)["alpha"]] = False
    return empirical_fisher(scores, free)
