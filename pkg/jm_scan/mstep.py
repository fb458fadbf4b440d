"""
M-step of the EM algorithm.

β, σ²_g, Σ and the baseline hazards have closed-form updates given the normal approximations of the
E-step. The survival regression parameters φ_k = (γ_k, α_k) take a single Newton-Raphson step per
M-step. All risk-set quantities go through a risk-set engine.
"""
import numpy as np
from loguru import logger

from .data_model import DesignSet
from .errors import (
    NumericOverflowError,
    SingularMatrixError,
    ValidityError,
    ZeroDenominatorError,
)
from .params import BaselineHazard, Params, floor_Sigma, floor_sigma2
from .posterior import LOG_2PI, PosteriorSet, Prior
from .riskset_scan import Engine

PHI_RIDGE = 1e-8
PHI_MIN_EIGENVALUE = 1e-10
PHI_MAX_HALVINGS = 10


def expected_residual_ss(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    g: int,
    rows: np.ndarray | None = None,
) -> np.ndarray:
    """
    E_i‖Y_ig − X_igβ_g − Z_ig b_ig‖² per subject (restricted to ``rows`` when given).

    Equals rᵀr − 2 b̂ᵀZᵀr + tr{ZᵀZ(Σ̂_gg + b̂b̂ᵀ)} with r = Y_ig − X_igβ_g, built from the stacked cross
    products.
    """
    spec = designs.spec
    beta = params.beta_g(spec, g)
    s = spec.b_slices[g]
    rows = slice(None) if rows is None else rows
    modes = posteriors.modes[rows][:, s]
    covs = posteriors.covs[rows][:, s, s]
    second = covs + modes[:, :, None] * modes[:, None, :]

    quadratic = np.einsum("p,ipr,r->i", beta, designs.xtx[g][rows], beta)
    rtr = designs.yty[g][rows] - 2 * designs.xty[g][rows] @ beta + quadratic
    ztr = designs.zty[g][rows] - np.einsum("ipq,p->iq", designs.xtz[g][rows], beta)
    trace = np.einsum("iqr,irq->i", designs.ztz[g][rows], second)
    return rtr - 2 * np.sum(modes * ztr, axis=1) + trace


def update_beta(designs: DesignSet, params: Params, posteriors: PosteriorSet) -> np.ndarray:
    """
    β̂_g = (Σ_i X_igᵀX_ig)⁻¹ Σ_i X_igᵀ(Y_ig − Z_ig b̂_ig) for every biomarker.

    V_i is block diagonal, so σ²_g cancels within each block and the biomarkers decouple.

    Raises:
        SingularMatrixError: If the normal equations of some biomarker are singular.
    """
    spec = designs.spec
    betas = []
    for g, bm in enumerate(spec.biomarkers):
        modes = posteriors.modes[:, spec.b_slices[g]]
        A = designs.xtx[g].sum(axis=0)
        c = (designs.xty[g] - np.einsum("ipq,iq->ip", designs.xtz[g], modes)).sum(axis=0)
        eigenvalues = np.linalg.eigvalsh(A)
        if eigenvalues.min() <= 1e-10 * max(1.0, eigenvalues.max()):
            raise SingularMatrixError(
                f"Singular normal equations for biomarker {bm.name}", eigenvalues.min()
            )
        betas.append(np.linalg.solve(A, c))
    return np.concatenate(betas)


def update_sigma2(designs: DesignSet, params: Params, posteriors: PosteriorSet) -> np.ndarray:
    """
    σ̂²_g = Σ_i E_i‖Y_ig − X_igβ_g − Z_ig b_ig‖² / Σ_i n_ig, floored.

    Raises:
        ValidityError: If some biomarker has no measurements.
    """
    sigma2 = []
    for g, bm in enumerate(designs.spec.biomarkers):
        count = int(designs.counts[:, g].sum())
        if not count:
            raise ValidityError(f"Biomarker {bm.name} has no measurements")
        sigma2.append(expected_residual_ss(designs, params, posteriors, g).sum() / count)
    return floor_sigma2(sigma2)


def update_Sigma(posteriors: PosteriorSet) -> np.ndarray:
    """Σ̂ = Σ_i(Σ̂_i + b̂_ib̂_iᵀ) / n, symmetrized and eigenvalue-floored."""
    return floor_Sigma(posteriors.second_moments().mean(axis=0))


def risk_weights(
    designs: DesignSet, params: Params, posteriors: PosteriorSet, k: int
) -> np.ndarray:
    """exp(W_iᵀγ_k) E_i[exp(α_kᵀb_i)] for every subject."""
    return posteriors.mgf(params.alpha[k], offset=designs.W @ params.gamma[k])


def update_baseline_hazard(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    k: int,
    engine: Engine,
) -> BaselineHazard:
    """
    Breslow update ΔΛ̂₀k(t_kl) = d_kl / Σ_{r ∈ R(t_kl)} exp(W_rᵀγ_k) E_r[exp(α_kᵀb_r)].

    Args:
        designs (DesignSet): Stacked designs.
        params (Params): Current parameters.
        posteriors (PosteriorSet): Normal approximations of the E-step.
        k (int): Cause, 0-based.
        engine (Engine): Risk-set engine.

    Returns:
        BaselineHazard: Jumps at all cause-k event times; empty without cause-k events.

    Raises:
        ZeroDenominatorError: If some risk-set sum vanishes or is not finite.
    """
    times = engine.event_times(k)
    if not len(times):
        return BaselineHazard.empty()
    counts = engine.event_counts(k)
    denominators = engine.riskset_sums(k, risk_weights(designs, params, posteriors, k))
    if not np.all(np.isfinite(denominators) & (denominators > 0)):
        raise ZeroDenominatorError(
            f"Risk-set weights of cause {k + 1} vanished at "
            f"{int(np.sum(~(denominators > 0)))} event time(s)"
        )
    return BaselineHazard(times=times, jumps=counts / denominators, counts=counts)


def phi_objective(
    designs: DesignSet,
    posteriors: PosteriorSet,
    gamma: np.ndarray,
    alpha: np.ndarray,
    cum_hazard: np.ndarray,
    k: int,
) -> float:
    """Σ_i E_i[δ_ik(W_iᵀγ + αᵀb_i) − Λ₀k(T_i) exp(W_iᵀγ + αᵀb_i)], the φ_k part of Q."""
    events = designs.D == k + 1
    linpred = designs.W @ gamma
    weights = cum_hazard * posteriors.mgf(alpha, offset=linpred)
    return float(np.sum(linpred[events]) + np.sum(posteriors.modes[events] @ alpha) - weights.sum())


def phi_score_information(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    k: int,
    cum_hazard: np.ndarray,
    freeze_alpha: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Score and information of φ_k = (γ_k, α_k) with the baseline hazard held fixed.

    Args:
        designs (DesignSet): Stacked designs.
        params (Params): Current parameters.
        posteriors (PosteriorSet): Normal approximations of the E-step.
        k (int): Cause, 0-based.
        cum_hazard (np.ndarray): Λ₀k(T_i) for every subject.
        freeze_alpha (bool): Restrict both to the γ_k block.

    Returns:
        tuple[np.ndarray, np.ndarray]: Score vector and information matrix.
    """
    W = designs.W
    events = (designs.D == k + 1).astype(float)
    weights = cum_hazard * risk_weights(designs, params, posteriors, k)

    score_gamma = events @ W - weights @ W
    info_gamma = (W.T * weights) @ W
    if freeze_alpha:
        return score_gamma, info_gamma

    u = posteriors.shifted_modes(params.alpha[k])
    score_alpha = events @ posteriors.modes - weights @ u
    info_alpha = np.einsum("i,ijk->jk", weights, u[:, :, None] * u[:, None, :] + posteriors.covs)
    info_cross = (W.T * weights) @ u
    score = np.concatenate([score_gamma, score_alpha])
    info = np.block([[info_gamma, info_cross], [info_cross.T, info_alpha]])
    return score, (info + info.T) / 2


def update_phi(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    k: int,
    engine: Engine,
    freeze_alpha: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """
    One Newton-Raphson step φ̂_k = φ_k + I_φk⁻¹ S_φk.

    The step is halved (at most ten times) while it decreases the φ_k part of Q; if no halving
    helps, φ_k is kept. A ridge is added to an information matrix with a tiny minimal eigenvalue.

    Args:
        designs (DesignSet): Stacked designs.
        params (Params): Current parameters, with the updated baseline hazard of cause k.
        posteriors (PosteriorSet): Normal approximations of the E-step.
        k (int): Cause, 0-based.
        engine (Engine): Risk-set engine for Λ₀k(T_i).
        freeze_alpha (bool): Keep α_k at its current value.

    Returns:
        tuple[np.ndarray, np.ndarray]: New γ_k and α_k.

    Raises:
        SingularMatrixError: If the information stays singular after the ridge.
        ValidityError: If the score is not finite.
    """
    gamma, alpha = params.gamma[k], params.alpha[k]
    cum_hazard = engine.cum_hazard(k, params.hazards[k])
    score, info = phi_score_information(designs, params, posteriors, k, cum_hazard, freeze_alpha)
    if not np.all(np.isfinite(score)):
        raise ValidityError(f"Non-finite score for the survival parameters of cause {k + 1}")
    if not len(score):
        return gamma.copy(), alpha.copy()

    min_eigenvalue = np.linalg.eigvalsh(info).min()
    if min_eigenvalue < PHI_MIN_EIGENVALUE:
        logger.warning(
            f"Information of cause {k + 1} has min eigenvalue {min_eigenvalue:.3e}, adding ridge"
        )
        info = info + PHI_RIDGE * np.eye(len(info))
        min_eigenvalue = np.linalg.eigvalsh(info).min()
        if min_eigenvalue <= 0:
            raise SingularMatrixError(
                f"Singular information matrix for cause {k + 1}", min_eigenvalue
            )
    step = np.linalg.solve(info, score)

    w = len(gamma)
    current = phi_objective(designs, posteriors, gamma, alpha, cum_hazard, k)
    scale = 1.0
    for _ in range(PHI_MAX_HALVINGS + 1):
        new_gamma = gamma + scale * step[:w]
        new_alpha = alpha if freeze_alpha else alpha + scale * step[w:]
        try:
            candidate = phi_objective(designs, posteriors, new_gamma, new_alpha, cum_hazard, k)
        except NumericOverflowError:
            candidate = -np.inf
        if candidate >= current - 1e-12 * abs(current):
            return new_gamma, np.array(new_alpha, dtype=float)
        scale /= 2
    logger.warning(f"Step-halving exhausted for cause {k + 1}, keeping survival parameters")
    return gamma.copy(), alpha.copy()


def m_step(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    engine: Engine,
    freeze_alpha: bool = False,
) -> Params:
    """
    All M-step updates in the order β, σ², Σ, then Λ₀k and φ_k for each cause.

    Each update uses the freshest available components.
    """
    current = params.replace(beta=update_beta(designs, params, posteriors))
    current = current.replace(sigma2=update_sigma2(designs, current, posteriors))
    current = current.replace(Sigma=update_Sigma(posteriors))

    gamma, alpha = current.gamma.copy(), current.alpha.copy()
    hazards = list(current.hazards)
    for k in range(designs.spec.K):
        hazards[k] = update_baseline_hazard(designs, current, posteriors, k, engine)
        current = current.replace(hazards=tuple(hazards))
        gamma[k], alpha[k] = update_phi(designs, current, posteriors, k, engine, freeze_alpha)
        current = current.replace(gamma=gamma.copy(), alpha=alpha.copy())
    logger.debug(f"M-step done, sigma2 {np.round(current.sigma2, 4).tolist()}")
    return current


def expected_longitudinal_loglik(
    designs: DesignSet, params: Params, posteriors: PosteriorSet
) -> float:
    """Σ_i E_i[log f(Y_i | b_i)]."""
    total = 0.0
    for g in range(designs.spec.G):
        rss = expected_residual_ss(designs, params, posteriors, g)
        count = designs.counts[:, g]
        sigma2 = params.sigma2[g]
        total -= 0.5 * float(np.sum(count * (LOG_2PI + np.log(sigma2)) + rss / sigma2))
    return total


def expected_prior_loglik(params: Params, posteriors: PosteriorSet) -> float:
    """Σ_i E_i[log f(b_i)]."""
    prior = Prior.from_params(params)
    q = params.Sigma.shape[0]
    traces = np.einsum("jk,ikj->i", prior.Sigma_inv, posteriors.second_moments())
    return -0.5 * float(np.sum(q * LOG_2PI + prior.logdet + traces))


def expected_survival_loglik(
    designs: DesignSet,
    params: Params,
    posteriors: PosteriorSet,
    engine: Engine,
) -> float:
    """Σ_i E_i[log f(T_i, D_i | b_i)], including the log hazard jumps of the events."""
    total = 0.0
    for k in range(designs.spec.K):
        hazard = params.hazards[k]
        cum_hazard = engine.cum_hazard(k, hazard)
        total += phi_objective(designs, posteriors, params.gamma[k], params.alpha[k], cum_hazard, k)
        if len(hazard):
            total += float(np.sum(hazard.counts * np.log(hazard.jumps)))
    return total
