from copy import deepcopy

import numpy as np
import pandas as pd
import pytest
from fixtures.instances import random_problem
from fixtures.toy import LONG, SURV
from scipy.integrate import quad
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from jm_scan import (
    Dataset,
    FitOptions,
    ModelSpec,
    build_designs,
    default_scenario,
    e_step,
    fit,
    generate,
    make_engine,
)
from jm_scan.em_driver import approx_observed_loglik, convergence_criterion
from jm_scan.errors import ValidityError
from jm_scan.params import BaselineHazard, Params, omega_blocks, omega_size
from jm_scan.posterior import SubjectSurvival, complete_logdensity_in_b
from jm_scan.signals import em_iteration_finished

QUICK = {"max_iter": 3, "tol": 1e-12, "compute_se": False}


def test_fit_options_invalid():
    with pytest.raises(ValidityError) as e:
        FitOptions(max_iter=0, tol=0.0, engine="fast")
    message = str(e.value)
    for reason in ("max_iter", "tol", "Unknown engine"):
        assert reason in message


def test_convergence_criterion():
    old = np.array([1.0, 0.0])
    new = np.array([1.1, 0.001])
    assert convergence_criterion(old, new) == pytest.approx(1.0)
    assert convergence_criterion(old, old) == 0


def test_fit_requires_an_event(toy_spec):
    surv = deepcopy(SURV)
    for row in surv:
        row["cause"] = 0
    ds = Dataset.from_frames(pd.DataFrame(LONG), pd.DataFrame(surv), toy_spec)
    with pytest.raises(ValidityError, match="uncensored event"):
        fit(ds, toy_spec)


def test_laplace_exact_without_association():
    problem = random_problem(seed=21, n=20)
    params = problem.params.replace(alpha=np.zeros_like(problem.params.alpha))
    posteriors = e_step(problem.designs, params, problem.engine)

    expected = 0.0
    for subject in problem.designs.subjects:
        V = np.diag(subject.row_sigma2(params.sigma2))
        marginal = subject.Z @ params.Sigma @ subject.Z.T + V
        if len(subject.y):
            expected += multivariate_normal(subject.X @ params.beta, marginal).logpdf(subject.y)
        survival = SubjectSurvival.from_params(subject, params)
        expected -= float(np.sum(survival.cum_hazard * np.exp(survival.linpred)))
        if survival.cause:
            expected += survival.log_jump + survival.linpred[survival.cause - 1]

    value = approx_observed_loglik(problem.designs, params, posteriors, problem.engine)
    assert value == pytest.approx(expected, rel=1e-9)


def random_intercept_problem():
    """One biomarker with a random intercept, one cause, five subjects."""
    spec = ModelSpec.from_dict(
        {
            "causes": 1,
            "survival": ["w"],
            "biomarkers": [{"name": "y1", "fixed": ["intercept", "time"], "random": ["intercept"]}],
        }
    )
    rng = np.random.default_rng(5)
    times = [1.0, 2.0, 2.5, 3.0, 4.0]
    surv = pd.DataFrame(
        {
            "subject": ["1", "2", "3", "4", "5"],
            "time": times,
            "cause": [1, 0, 1, 1, 0],
            "w": [0.5, -1.0, 0.0, 1.0, -0.5],
        }
    )
    rows = [
        {
            "subject": str(i + 1),
            "biomarker": 1,
            "time": t,
            "value": 1.3 + 0.5 * t + rng.normal(0, 0.7),
        }
        for i, T in enumerate(times)
        for t in np.linspace(0, T, 4, endpoint=False)
    ]
    ds = Dataset.from_frames(pd.DataFrame(rows), surv, spec)
    designs = build_designs(ds, spec)
    engine = make_engine("scan", designs.T, designs.D, spec.K)
    hazard = BaselineHazard(
        times=engine.event_times(0),
        jumps=np.full(len(engine.event_times(0)), 0.2),
        counts=engine.event_counts(0),
    )
    params = Params(
        beta=[1.0, 0.5],
        sigma2=[0.5],
        Sigma=[[1.0]],
        gamma=[[0.3]],
        alpha=[[0.6]],
        hazards=(hazard,),
    )
    return designs, params, engine


def test_laplace_matches_numerical_integration():
    designs, params, engine = random_intercept_problem()
    posteriors = e_step(designs, params, engine)

    expected = 0.0
    for i, subject in enumerate(designs.subjects):
        mode = posteriors.modes[i][0]
        scale = np.sqrt(posteriors.covs[i][0, 0])

        def logdensity(b):
            return complete_logdensity_in_b(subject, params, np.array([b]))[0]

        peak = logdensity(mode)
        integral, _ = quad(
            lambda b: np.exp(logdensity(b) - peak),
            mode - 15 * scale,
            mode + 15 * scale,
            epsabs=0,
            epsrel=1e-11,
        )
        expected += peak + np.log(integral)

    value = approx_observed_loglik(designs, params, posteriors, engine)
    assert value != expected
    assert value == pytest.approx(expected, rel=1e-4)


def test_single_iteration(small_dataset):
    result = fit(small_dataset, small_dataset.spec, FitOptions(max_iter=1, compute_se=False))
    assert result.iterations == 1
    assert len(result.loglik_trace) == 1
    assert not result.converged
    assert np.all(np.isnan(result.se))
    assert result.labels[0] == "beta.y1.intercept"


def test_small_fit(small_fit, small_dataset):
    spec = small_dataset.spec
    assert small_fit.converged
    assert small_fit.iterations == len(small_fit.loglik_trace)
    assert small_fit.loglik_trace[-1] >= small_fit.loglik_trace[0]
    assert small_fit.params.valid(spec)
    assert len(small_fit.labels) == omega_size(spec) == len(small_fit.se)
    assert np.all(np.isfinite(small_fit.se))
    assert np.all(small_fit.se > 0)
    assert small_fit.fisher_min_eigenvalue > 0
    for phase in ("setup", "e_step", "m_step", "loglik", "stderr"):
        assert small_fit.timings[phase] >= 0
    assert small_fit.op_count > 0
    assert small_fit.posteriors.n == small_dataset.n


def test_warm_start_converges_quickly(small_fit, small_dataset):
    result = fit(
        small_dataset,
        small_dataset.spec,
        FitOptions(compute_se=False),
        init=small_fit.params,
    )
    assert result.converged
    assert result.iterations <= 5
    np.testing.assert_allclose(result.estimates, small_fit.estimates, rtol=1e-2, atol=1e-2)


def test_fit_deterministic(small_dataset):
    spec = small_dataset.spec
    one = fit(small_dataset, spec, FitOptions(**QUICK))
    again = fit(small_dataset, spec, FitOptions(**QUICK))
    threaded = fit(small_dataset, spec, FitOptions(threads=3, **QUICK))

    assert np.array_equal(one.estimates, again.estimates)
    assert np.array_equal(one.estimates, threaded.estimates)
    assert one.loglik_trace == threaded.loglik_trace


def test_engines_agree(small_dataset):
    spec = small_dataset.spec
    scan = fit(small_dataset, spec, FitOptions(engine="scan", **QUICK))
    naive = fit(small_dataset, spec, FitOptions(engine="naive", **QUICK))

    np.testing.assert_allclose(scan.estimates, naive.estimates, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(scan.loglik_trace, naive.loglik_trace, rtol=1e-10)
    assert scan.op_count < naive.op_count


def test_iteration_signal(small_dataset):
    received = []

    def receiver(sender, iteration, loglik, criterion, params):
        received.append((iteration, loglik))

    em_iteration_finished.connect(receiver)
    try:
        result = fit(small_dataset, small_dataset.spec, FitOptions(**QUICK))
    finally:
        em_iteration_finished.disconnect(receiver)

    assert [i for i, _ in received] == [1, 2, 3]
    assert [value for _, value in received] == result.loglik_trace


def test_iteration_logging(small_dataset, caplog):
    fit(small_dataset, small_dataset.spec, FitOptions(max_iter=2, tol=1e-12, compute_se=False))
    assert "EM iteration 2: log-likelihood" in caplog.text
    assert "No convergence within 2 iterations" in caplog.text


def test_freeze_alpha(independent_scenario):
    ds = generate(independent_scenario, seed=5, n=200)
    result = fit(ds, ds.spec, FitOptions(max_iter=20, freeze_alpha=True))
    alpha = omega_blocks(ds.spec)["alpha"]

    assert np.all(result.params.alpha == 0)
    assert np.all(np.isnan(result.se[alpha]))
    assert np.all(np.isnan(result.cov[alpha, alpha]))
    assert np.all(np.isfinite(np.delete(result.se, np.arange(alpha.start, alpha.stop))))


def lmm_negative_loglik(theta, subjects):
    beta, log_sigma2 = theta[:4], theta[4]
    L = np.array([[np.exp(theta[5]), 0.0], [theta[6], np.exp(theta[7])]])
    Sigma = L @ L.T
    total = 0.0
    for subject in subjects:
        X, Z, y = subject.X, subject.Z, subject.y
        marginal = Z @ Sigma @ Z.T + np.exp(log_sigma2) * np.eye(len(y))
        _, logdet = np.linalg.slogdet(marginal)
        r = y - X @ beta
        total += 0.5 * (logdet + r @ np.linalg.solve(marginal, r) + len(y) * np.log(2 * np.pi))
    return total


def cox_negative_partial_loglik(gamma, T, D, W):
    linpred = W @ gamma
    total = 0.0
    for i in np.flatnonzero(D == 1):
        at_risk = T >= T[i]
        total -= linpred[i] - np.log(np.sum(np.exp(linpred[at_risk])))
    return total


@pytest.mark.slow
def test_independent_submodels(independent_scenario):
    ds = generate(independent_scenario, seed=3)
    spec = ds.spec
    result = fit(ds, spec, FitOptions(max_iter=2000, tol=1e-7, freeze_alpha=True, compute_se=False))
    assert result.converged
    params = result.params

    designs = build_designs(ds, spec)
    L = np.linalg.cholesky(params.Sigma)
    theta = np.concatenate(
        [params.beta, np.log(params.sigma2), [np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])]]
    )
    reference = minimize(lmm_negative_loglik, theta, args=(designs.subjects,), method="BFGS")
    assert lmm_negative_loglik(theta, designs.subjects) <= reference.fun + 1e-4
    np.testing.assert_allclose(theta, reference.x, atol=1e-3)

    survival = (designs.T, designs.D, designs.W)
    cox = minimize(cox_negative_partial_loglik, np.zeros(2), args=survival, method="BFGS")
    np.testing.assert_allclose(params.gamma[0], cox.x, atol=1e-2)


def test_standard_error_failure_keeps_fit(small_dataset, monkeypatch, caplog):
    def failing(*args, **kwargs):
        raise ValidityError("Per-subject scores contain non-finite entries")

    monkeypatch.setattr("jm_scan.em_driver.standard_errors", failing)
    result = fit(small_dataset, small_dataset.spec, FitOptions(max_iter=3, tol=1e-12))

    assert result.iterations == 3
    assert np.all(np.isfinite(result.estimates))
    assert np.all(np.isnan(result.se))
    assert np.all(np.isnan(result.cov))
    assert "Standard errors unavailable: Per-subject scores" in caplog.text


@pytest.mark.slow
def test_engines_agree_on_full_fit():
    ds = generate(default_scenario(), seed=8, n=500)
    scan = fit(ds, ds.spec, FitOptions(engine="scan", compute_se=False))
    naive = fit(ds, ds.spec, FitOptions(engine="naive", compute_se=False))

    assert scan.iterations == naive.iterations
    np.testing.assert_allclose(scan.estimates, naive.estimates, rtol=1e-10, atol=1e-10)
