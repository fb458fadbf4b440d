"""
E-step of the EM algorithm.

The conditional distribution of the random effects b_i given the observed data is replaced by a
normal distribution centred at its mode b̂_i, with covariance Σ̂_i equal to the inverse of the negated
Hessian of the complete-data log-density at the mode. Under that approximation every expectation the
M-step needs is available in closed form through the moment-generating function of b_i.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from loguru import logger

from .data_model import DesignSet, SubjectDesign
from .errors import ConvergenceError, NumericOverflowError, SingularMatrixError, ValidityError
from .params import Params, cum_hazard_at
from .riskset_scan import Engine

EXPONENT_GUARD = 700.0
# a line search may stall this far above the gradient tolerance before the mode search fails
STALLED_GRADIENT_FACTOR = 1e3
LOG_2PI = np.log(2 * np.pi)


def guarded_exp(exponent, where: str = "") -> np.ndarray:
    """``exp`` that raises instead of overflowing."""
    exponent = np.asarray(exponent, dtype=float)
    if exponent.size and np.max(exponent) > EXPONENT_GUARD:
        raise NumericOverflowError(float(np.max(exponent)), where)
    return np.exp(exponent)


@dataclass(frozen=True, eq=False)
class Prior:
    """Σ⁻¹ and log det Σ, computed once per E-step."""

    Sigma_inv: np.ndarray
    logdet: float

    @classmethod
    def from_params(cls, params: Params) -> "Prior":
        try:
            chol = np.linalg.cholesky(params.Sigma)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "Random-effects covariance is not positive definite",
                float(np.linalg.eigvalsh(params.Sigma).min()),
            ) from None
        inv_chol = np.linalg.inv(chol)
        return cls(Sigma_inv=inv_chol.T @ inv_chol, logdet=2 * float(np.log(np.diag(chol)).sum()))


@dataclass(frozen=True, eq=False)
class SubjectSurvival:
    """
    Survival quantities of one subject that do not depend on b.

    Args:
        cum_hazard (np.ndarray): Λ₀k(T_i) for every cause.
        linpred (np.ndarray): W_iᵀγ_k for every cause.
        cause (int): D_i, 0 when censored.
        log_jump (float): log ΔΛ₀D_i(T_i) for an event, 0 when censored.
    """

    cum_hazard: np.ndarray
    linpred: np.ndarray
    cause: int
    log_jump: float = 0.0

    @classmethod
    def from_params(cls, subject: SubjectDesign, params: Params) -> "SubjectSurvival":
        """Direct evaluation from the baseline hazards, without a risk-set engine."""
        K = params.gamma.shape[0]
        cum_hazard = np.array(
            [cum_hazard_at(h, subject.time) for h in params.hazards]
            if params.hazards
            else np.zeros(K)
        )
        log_jump = 0.0
        if subject.cause:
            jump = (
                params.hazards[subject.cause - 1].jump_at(subject.time) if params.hazards else 0.0
            )
            if jump <= 0:
                raise ValidityError(
                    f"No hazard jump at the event time {subject.time} of cause {subject.cause}"
                )
            log_jump = float(np.log(jump))
        return cls(
            cum_hazard=cum_hazard,
            linpred=params.gamma @ subject.w,
            cause=subject.cause,
            log_jump=log_jump,
        )


def survival_terms(designs: DesignSet, params: Params, engine: Engine) -> list[SubjectSurvival]:
    """:class:`SubjectSurvival` for all subjects, with Λ₀k(T_i) found by linear scans."""
    K = params.gamma.shape[0]
    cum_hazard = np.column_stack([engine.cum_hazard(k, params.hazards[k]) for k in range(K)])
    linpred = designs.W @ params.gamma.T
    log_jump = np.zeros(designs.n)
    for k in range(K):
        events = engine.event_rank(k) >= 0
        jumps = engine.at_event(k, params.hazards[k].jumps)[events]
        if np.any(jumps <= 0):
            raise ValidityError(f"Non-positive hazard jump at a cause {k + 1} event time")
        log_jump[events] = np.log(jumps)
    return [
        SubjectSurvival(
            cum_hazard=cum_hazard[i],
            linpred=linpred[i],
            cause=int(designs.D[i]),
            log_jump=float(log_jump[i]),
        )
        for i in range(designs.n)
    ]


def complete_logdensity_in_b(
    subject: SubjectDesign,
    params: Params,
    b: np.ndarray,
    survival: SubjectSurvival | None = None,
    prior: Prior | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    log f(Y_i, T_i, D_i, b | Ψ) with its gradient and Hessian in b.

    The value includes every normalizing constant, so that it can enter the Laplace approximation of
    the observed-data log-likelihood. A biomarker without measurements contributes nothing.

    Args:
        subject (SubjectDesign): Designs of subject i.
        params (Params): Current parameters.
        b (np.ndarray): Random effects, length q.
        survival (SubjectSurvival, optional): Precomputed survival terms; derived from
            ``params.hazards`` when omitted.
        prior (Prior, optional): Precomputed Σ⁻¹ and log det Σ.

    Returns:
        tuple[float, np.ndarray, np.ndarray]: Value, gradient and Hessian.

    Raises:
        NumericOverflowError: If some exponent W_iᵀγ_k + α_kᵀb exceeds the overflow guard.
    """
    survival = survival if survival is not None else SubjectSurvival.from_params(subject, params)
    prior = prior if prior is not None else Prior.from_params(params)
    b = np.asarray(b, dtype=float)
    q = b.size

    sigma2_rows = subject.row_sigma2(params.sigma2)
    residual = subject.y - subject.x_matvec(params.beta) - subject.z_matvec(b)
    scaled = residual / sigma2_rows
    n_g = np.array(subject.n_g)
    value = -0.5 * float(np.sum(n_g * (LOG_2PI + np.log(params.sigma2))) + residual @ scaled)
    gradient = subject.z_rmatvec(scaled)
    hessian = np.zeros((q, q))
    for s, ztz, sigma2 in zip(subject.spec.b_slices, subject.ztz_blocks, params.sigma2):
        hessian[s, s] -= ztz / sigma2

    exponent = survival.linpred + params.alpha @ b
    rate = survival.cum_hazard * guarded_exp(exponent, "complete-data log-density")
    value -= float(rate.sum())
    gradient -= params.alpha.T @ rate
    hessian -= (params.alpha.T * rate) @ params.alpha
    if survival.cause:
        k = survival.cause - 1
        value += survival.log_jump + float(exponent[k])
        gradient += params.alpha[k]

    Sb = prior.Sigma_inv @ b
    value -= 0.5 * (q * LOG_2PI + prior.logdet + float(b @ Sb))
    gradient -= Sb
    hessian -= prior.Sigma_inv
    return value, gradient, hessian


@dataclass(frozen=True, eq=False)
class PosteriorApprox:
    """Normal approximation N(b̂_i, Σ̂_i) of the posterior of b_i."""

    mode: np.ndarray
    cov: np.ndarray
    iterations: int = 0


def _newton_direction(hessian: np.ndarray, gradient: np.ndarray, ridge: float) -> np.ndarray:
    """Solve (-H) d = g by Cholesky, adding a ridge once if -H is not positive definite."""
    negated = -hessian
    try:
        chol = np.linalg.cholesky(negated)
    except np.linalg.LinAlgError:
        logger.debug(f"Negated Hessian not positive definite, adding ridge {ridge:g}")
        try:
            chol = np.linalg.cholesky(negated + ridge * np.eye(len(gradient)))
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "Hessian of the complete-data log-density is not negative definite",
                float(np.linalg.eigvalsh(negated).min()),
            ) from None
    return np.linalg.solve(chol.T, np.linalg.solve(chol, gradient))


def posterior_mode(
    subject: SubjectDesign,
    params: Params,
    b_init: np.ndarray | None = None,
    survival: SubjectSurvival | None = None,
    prior: Prior | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    ridge: float = 1e-8,
    max_halvings: int = 30,
) -> PosteriorApprox:
    """
    Newton iterations with step-halving for the mode of the complete-data log-density in b.

    Args:
        subject (SubjectDesign): Designs of subject i.
        params (Params): Current parameters.
        b_init (np.ndarray, optional): Starting point, zeros when omitted.
        survival (SubjectSurvival, optional): Precomputed survival terms.
        prior (Prior, optional): Precomputed Σ⁻¹ and log det Σ.
        tol (float): Stopping tolerance on the largest absolute gradient entry.
        max_iter (int): Maximum number of Newton iterations.
        ridge (float): Ridge added to a negated Hessian that is not positive definite.
        max_halvings (int): Maximum number of step halvings per iteration.

    Returns:
        PosteriorApprox: Mode and the inverse negated Hessian at the mode.

    Raises:
        ConvergenceError: If the gradient does not drop below ``tol`` within ``max_iter`` steps, or
            step-halving finds no ascent while it is still above ``STALLED_GRADIENT_FACTOR * tol``.
        SingularMatrixError: If the Hessian stays indefinite after the ridge.
    """
    survival = survival if survival is not None else SubjectSurvival.from_params(subject, params)
    prior = prior if prior is not None else Prior.from_params(params)
    q = prior.Sigma_inv.shape[0]
    b = np.zeros(q) if b_init is None else np.array(b_init, dtype=float)

    value, gradient, hessian = complete_logdensity_in_b(subject, params, b, survival, prior)
    iterations = 0
    while np.max(np.abs(gradient)) >= tol:
        if iterations == max_iter:
            raise ConvergenceError(
                f"Posterior mode not found within {max_iter} Newton steps "
                f"(max |gradient| {np.max(np.abs(gradient)):.3e})"
            )
        iterations += 1
        direction = _newton_direction(hessian, gradient, ridge)
        step = 1.0
        for _ in range(max_halvings + 1):
            candidate = b + step * direction
            try:
                result = complete_logdensity_in_b(subject, params, candidate, survival, prior)
            except NumericOverflowError:
                step /= 2
                continue
            if result[0] >= value:
                break
            step /= 2
        else:
            largest = np.max(np.abs(gradient))
            if largest > STALLED_GRADIENT_FACTOR * tol:
                raise ConvergenceError(
                    f"Step-halving exhausted after {max_halvings} halvings at max |gradient| "
                    f"{largest:.3e}"
                )
            # no ascent left in floating point, b is stationary to working precision
            logger.debug(f"Step-halving exhausted at max |gradient| {largest:.3e}")
            break
        b = candidate
        value, gradient, hessian = result

    cov = _inverse_negated_hessian(hessian, ridge)
    return PosteriorApprox(mode=b, cov=cov, iterations=iterations)


def _inverse_negated_hessian(hessian: np.ndarray, ridge: float) -> np.ndarray:
    negated = -hessian
    try:
        chol = np.linalg.cholesky(negated)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(negated + ridge * np.eye(len(negated)))
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "Posterior curvature is not positive definite",
                float(np.linalg.eigvalsh(negated).min()),
            ) from None
    cov = np.linalg.solve(chol.T, np.linalg.inv(chol))
    return (cov + cov.T) / 2


def _mgf_exponent(pa: PosteriorApprox, alpha: np.ndarray) -> float:
    return float(alpha @ pa.mode + 0.5 * alpha @ pa.cov @ alpha)


def mgf_exp(pa: PosteriorApprox, alpha: np.ndarray) -> float:
    """E_i[exp(αᵀb_i)] = exp(αᵀb̂_i + ½αᵀΣ̂_iα)."""
    return float(guarded_exp(_mgf_exponent(pa, alpha), "moment-generating function"))


def mgf_exp_b(pa: PosteriorApprox, alpha: np.ndarray) -> np.ndarray:
    """E_i[b_i exp(αᵀb_i)], the gradient of the MGF."""
    return mgf_exp(pa, alpha) * (pa.cov @ alpha + pa.mode)


def mgf_exp_bbT(pa: PosteriorApprox, alpha: np.ndarray) -> np.ndarray:
    """E_i[b_i b_iᵀ exp(αᵀb_i)], the Hessian of the MGF."""
    u = pa.cov @ alpha + pa.mode
    return mgf_exp(pa, alpha) * (np.outer(u, u) + pa.cov)


@dataclass(frozen=True, eq=False)
class PosteriorSet:
    """
    Normal approximations of all subjects, stacked for vectorized expectations.

    Args:
        modes (np.ndarray): Shape (n, q).
        covs (np.ndarray): Shape (n, q, q).
        iterations (np.ndarray): Newton steps used per subject.
    """

    modes: np.ndarray
    covs: np.ndarray
    iterations: np.ndarray

    @classmethod
    def from_approximations(cls, approximations: list[PosteriorApprox]) -> "PosteriorSet":
        return cls(
            modes=np.array([pa.mode for pa in approximations]),
            covs=np.array([pa.cov for pa in approximations]),
            iterations=np.array([pa.iterations for pa in approximations], dtype=int),
        )

    @property
    def n(self) -> int:
        return len(self.modes)

    def __len__(self):
        return self.n

    def __getitem__(self, i: int) -> PosteriorApprox:
        return PosteriorApprox(
            mode=self.modes[i], cov=self.covs[i], iterations=int(self.iterations[i])
        )

    def shifted_modes(self, alpha: np.ndarray) -> np.ndarray:
        """Σ̂_iα + b̂_i for all subjects."""
        return self.covs @ alpha + self.modes

    def mgf(self, alpha: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        """exp(offset_i + αᵀb̂_i + ½αᵀΣ̂_iα) for all subjects."""
        exponent = self.modes @ alpha + 0.5 * np.einsum("j,ijk,k->i", alpha, self.covs, alpha)
        if offset is not None:
            exponent = exponent + offset
        return guarded_exp(exponent, "moment-generating function")

    def mgf_b(self, alpha: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        return self.mgf(alpha, offset)[:, None] * self.shifted_modes(alpha)

    def mgf_bbT(self, alpha: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        u = self.shifted_modes(alpha)
        return self.mgf(alpha, offset)[:, None, None] * (u[:, :, None] * u[:, None, :] + self.covs)

    def second_moments(self) -> np.ndarray:
        """E_i[b_i b_iᵀ] = Σ̂_i + b̂_i b̂_iᵀ."""
        return self.covs + self.modes[:, :, None] * self.modes[:, None, :]


def e_step(
    designs: DesignSet,
    params: Params,
    engine: Engine,
    previous: PosteriorSet | None = None,
    threads: int = 1,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PosteriorSet:
    """
    Posterior approximations for all subjects.

    Args:
        designs (DesignSet): Stacked designs.
        params (Params): Current parameters.
        engine (Engine): Risk-set engine for Λ₀k(T_i).
        previous (PosteriorSet, optional): Modes of the previous iteration, used as starting points.
        threads (int): Worker threads; subjects are independent and results keep subject order.
        tol (float): Newton tolerance.
        max_iter (int): Newton iteration limit.

    Returns:
        PosteriorSet: One normal approximation per subject.
    """
    survival = survival_terms(designs, params, engine)
    prior = Prior.from_params(params)
    starts = previous.modes if previous is not None else np.zeros((designs.n, params.Sigma.shape[0]))

    def solve(i: int) -> PosteriorApprox:
        return posterior_mode(
            designs[i], params, starts[i], survival[i], prior, tol=tol, max_iter=max_iter
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            approximations = list(executor.map(solve, range(designs.n)))
    else:
        approximations = [solve(i) for i in range(designs.n)]

    posteriors = PosteriorSet.from_approximations(approximations)
    logger.debug(
        f"E-step: median {np.median(posteriors.iterations):.0f}, "
        f"max {posteriors.iterations.max()} Newton steps"
    )
    return posteriors
