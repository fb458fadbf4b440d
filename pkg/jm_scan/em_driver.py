import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from .data_model import Dataset, DesignSet, ModelSpec, build_designs
from .errors import JointModelError, SingularMatrixError, ValidityError
from .params import Params, init_params, omega_labels, pack_omega
from .posterior import PosteriorSet, Prior, complete_logdensity_in_b, e_step, survival_terms
from .mstep import m_step
from .riskset_scan import Engine, OpCounter, engines, make_engine
from .signals import em_iteration_finished
from .stderr import standard_errors


@dataclass(frozen=True)
class FitOptions:
    """
    Settings of one EM fit.

    Args:
        max_iter (int): Maximum number of EM iterations.
        tol (float): Convergence tolerance on the largest relative change of Ω.
        min_iter (int): Iterations before convergence may be declared.
        threads (int): Worker threads for the per-subject E-step and scores.
        engine (str): Risk-set engine, a key of :data:`jm_scan.riskset_scan.engines`.
        freeze_alpha (bool): Hold the association parameters at zero.
        newton_tol (float): Gradient tolerance of the posterior-mode search.
        newton_max_iter (int): Newton iteration limit of the posterior-mode search.
        compute_se (bool): Compute standard errors after the last iteration.
    """

    max_iter: int = 500
    tol: float = 1e-4
    min_iter: int = 2
    threads: int = 1
    engine: str = "scan"
    freeze_alpha: bool = False
    newton_tol: float = 1e-8
    newton_max_iter: int = 100
    compute_se: bool = True

    def __post_init__(self):
        ok, errors = self.valid(why=True)
        if not ok:
            raise ValidityError("Invalid fit options:\n\t* " + "\n\t* ".join(errors))

    def valid(self, why: bool = False):
        errors = []
        if self.max_iter < 1:
            errors.append("``max_iter`` must be at least 1")
        if self.tol <= 0:
            errors.append("``tol`` must be positive")
        if self.threads < 1:
            errors.append("``threads`` must be at least 1")
        if self.engine not in engines:
            errors.append(f"Unknown engine {self.engine!r}, choose from {sorted(engines)}")

        if why:
            return (not errors, errors)
        return not errors


@dataclass(eq=False)
class FitResult:
    """
    Outcome of :func:`fit`.

    ``se`` and ``cov`` follow the packed Ω order of :func:`~jm_scan.params.pack_omega`; ``labels``
    names each entry. Standard errors are NaN for frozen or unavailable components.
    """

    params: Params
    se: np.ndarray
    cov: np.ndarray
    iterations: int
    loglik_trace: list[float]
    converged: bool
    labels: list[str]
    timings: dict[str, float] = field(default_factory=dict)
    op_count: int = 0
    fisher_min_eigenvalue: float = float("nan")
    posteriors: PosteriorSet | None = field(default=None, repr=False)

    @property
    def estimates(self) -> np.ndarray:
        return pack_omega(self.params)


class PhaseTimer:
    """Accumulates wall time per named phase."""

    def __init__(self):
        self.totals = defaultdict(float)

    @contextmanager
    def __call__(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[phase] += time.perf_counter() - start


def convergence_criterion(old: np.ndarray, new: np.ndarray) -> float:
    """max_j |θ_new − θ_old| / (|θ_old| + 1e-3) over the packed Ω vectors."""
    return float(np.max(np.abs(new - old) / (np.abs(old) + 1e-3)))


def approx_observed_loglik(
    designs: DesignSet, params: Params, posteriors: PosteriorSet, engine: Engine
) -> float:
    """
    Laplace approximation of the observed-data log-likelihood.

    Σ_i [log f(Y_i, T_i, D_i, b̂_i | Ψ) + (q/2) log 2π + ½ log det Σ̂_i], exact when the complete-data
    log-density is quadratic in b.

    Raises:
        SingularMatrixError: If some Σ̂_i is not positive definite.
    """
    survival = survival_terms(designs, params, engine)
    prior = Prior.from_params(params)
    q = params.Sigma.shape[0]
    sign, logdets = np.linalg.slogdet(posteriors.covs)
    if np.any(sign <= 0):
        bad = int(np.flatnonzero(sign <= 0)[0])
        raise SingularMatrixError(
            f"Posterior covariance of subject {bad} is not positive definite",
            float(np.linalg.eigvalsh(posteriors.covs[bad]).min()),
        )
    total = 0.0
    for i in range(designs.n):
        value, _, _ = complete_logdensity_in_b(
            designs[i], params, posteriors.modes[i], survival[i], prior
        )
        total += value
    return total + 0.5 * designs.n * q * np.log(2 * np.pi) + 0.5 * float(logdets.sum())


def fit(
    ds: Dataset,
    spec: ModelSpec,
    opts: FitOptions | None = None,
    init: Params | None = None,
) -> FitResult:
    """
    Fit the joint model by approximate EM.

    Args:
        ds (Dataset): Validated dataset.
        spec (ModelSpec): Model specification.
        opts (FitOptions, optional): Fit settings, defaults when omitted.
        init (Params, optional): Starting value of Ω. Baseline hazards always start from the
            Nelson–Aalen estimates of ``ds``.

    Returns:
        FitResult: Final (or best, when not converged) parameters with standard errors.

    Raises:
        ValidityError: If no subject has an observed event.
    """
    opts = opts or FitOptions()
    timer = PhaseTimer()
    counter = OpCounter()

    with timer("setup"):
        designs = build_designs(ds, spec)
        if not np.any(designs.D > 0):
            raise ValidityError("At least one uncensored event is required")
        engine = make_engine(opts.engine, designs.T, designs.D, spec.K, counter)
        params = init_params(designs, spec, engine)
        if init is not None:
            init.check(spec)
            params = init.replace(hazards=params.hazards)
        if opts.freeze_alpha:
            params = params.replace(alpha=np.zeros_like(params.alpha))
    logger.info(f"Fitting {ds.n} subjects with the {opts.engine} engine")

    def expectation(current: Params, previous: PosteriorSet | None) -> PosteriorSet:
        with timer("e_step"):
            return e_step(
                designs,
                current,
                engine,
                previous,
                threads=opts.threads,
                tol=opts.newton_tol,
                max_iter=opts.newton_max_iter,
            )

    posteriors = expectation(params, None)
    with timer("loglik"):
        loglik = approx_observed_loglik(designs, params, posteriors, engine)
    best = (loglik, params, posteriors)

    trace, converged, iteration = [], False, 0
    for iteration in range(1, opts.max_iter + 1):
        with timer("m_step"):
            new = m_step(designs, params, posteriors, engine, freeze_alpha=opts.freeze_alpha)
        criterion = convergence_criterion(pack_omega(params), pack_omega(new))
        params = new
        posteriors = expectation(params, posteriors)
        with timer("loglik"):
            loglik = approx_observed_loglik(designs, params, posteriors, engine)
        trace.append(loglik)
        em_iteration_finished.send(
            opts, iteration=iteration, loglik=loglik, criterion=criterion, params=params
        )
        if loglik >= best[0]:
            best = (loglik, params, posteriors)
        if iteration >= opts.min_iter and criterion < opts.tol:
            converged = True
            break

    if converged:
        logger.info(f"Converged after {iteration} iterations, log-likelihood {trace[-1]:.4f}")
    else:
        logger.warning(
            f"No convergence within {opts.max_iter} iterations, returning the best iterate "
            f"(log-likelihood {best[0]:.4f})"
        )
        _, params, posteriors = best

    labels = omega_labels(spec)
    size = len(labels)
    se, cov, min_eigenvalue = np.full(size, np.nan), np.full((size, size), np.nan), float("nan")
    if opts.compute_se:
        with timer("stderr"):
            try:
                fisher = standard_errors(
                    designs,
                    params,
                    posteriors,
                    engine,
                    freeze_alpha=opts.freeze_alpha,
                    threads=opts.threads,
                )
                se, cov, min_eigenvalue = fisher.se, fisher.cov, fisher.min_eigenvalue
            except JointModelError as e:
                logger.warning(f"Standard errors unavailable: {e}")

    timings = dict(timer.totals)
    logger.debug(f"Phase timings {({k: round(v, 3) for k, v in timings.items()})}")
    return FitResult(
        params=params,
        se=se,
        cov=cov,
        iterations=iteration,
        loglik_trace=trace,
        converged=converged,
        labels=labels,
        timings=timings,
        op_count=counter.ops,
        fisher_min_eigenvalue=min_eigenvalue,
        posteriors=posteriors,
    )
