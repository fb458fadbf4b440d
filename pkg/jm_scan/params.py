"""
Parameter container Ψ = (Ω, Λ₀₁..Λ₀K) of the joint model.

Ω collects the parametric components and is packed into one flat vector in the stable order

    β_1 .. β_G, σ²_1 .. σ²_G, lower triangle of Σ (row by row), γ_1 .. γ_K, α_1 .. α_K

which is also the order of the score vectors, the standard errors and the estimates CSV.
"""
from dataclasses import dataclass, replace

import numpy as np
from loguru import logger

from .data_model import Dataset, DesignSet, ModelSpec, build_designs
from .errors import SingularMatrixError, ValidityError
from .riskset_scan import Engine, make_engine

SIGMA2_FLOOR = 1e-8
SIGMA_EIGEN_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """
    Breslow-type step function for the cumulative baseline hazard of one cause.

    Args:
        times (np.ndarray): Distinct event times, strictly decreasing.
        jumps (np.ndarray): Positive hazard jumps ΔΛ₀k at ``times``.
        counts (np.ndarray): Number of tied events d_kl at each time.
    """

    times: np.ndarray
    jumps: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "jumps", np.asarray(self.jumps, dtype=float))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=int))

    @classmethod
    def empty(cls) -> "BaselineHazard":
        return cls(times=np.empty(0), jumps=np.empty(0), counts=np.empty(0, dtype=int))

    def __len__(self):
        return len(self.times)

    def valid(self, why: bool = False):
        errors = []
        if not (len(self.times) == len(self.jumps) == len(self.counts)):
            errors.append("Times, jumps and counts must have equal length")
        elif len(self.times):
            if not np.all(np.diff(self.times) < 0):
                errors.append("Event times must be strictly decreasing")
            if not (np.all(np.isfinite(self.jumps)) and np.all(self.jumps > 0)):
                errors.append("Hazard jumps must be finite and positive")
            if not np.all(self.counts > 0):
                errors.append("Tie counts must be positive")

        if why:
            return (not errors, errors)
        return not errors

    def ascending(self) -> tuple[np.ndarray, np.ndarray]:
        """Event times in increasing order with the cumulative hazard right after each of them."""
        return self.times[::-1], np.cumsum(self.jumps[::-1])

    def jump_at(self, t: float) -> float:
        match = np.flatnonzero(self.times == t)
        return float(self.jumps[match[0]]) if len(match) else 0.0


def cum_hazard_at(h: BaselineHazard, t: float) -> float:
    """
    Λ₀k(t), the sum of all jumps at event times ``<= t``.

    Jumps are accumulated in increasing time order, the same order the linear scans use.
    """
    times, cumulative = h.ascending()
    below = int(np.count_nonzero(times <= t))
    return float(cumulative[below - 1]) if below else 0.0


@dataclass(frozen=True, eq=False)
class Params:
    """
    All unknown parameters of the joint model.

    Args:
        beta (np.ndarray): Stacked fixed effects (β_1ᵀ, …, β_Gᵀ)ᵀ, length p.
        sigma2 (np.ndarray): Residual variances σ²_g, length G.
        Sigma (np.ndarray): Random-effects covariance Σ, shape (q, q).
        gamma (np.ndarray): Survival covariate effects, shape (K, w).
        alpha (np.ndarray): Association parameters, shape (K, q).
        hazards (tuple[BaselineHazard, ...]): One baseline hazard per cause.
    """

    beta: np.ndarray
    sigma2: np.ndarray
    Sigma: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    hazards: tuple[BaselineHazard, ...] = ()

    def __post_init__(self):
        for name in ("beta", "sigma2", "Sigma", "gamma", "alpha"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "hazards", tuple(self.hazards))

    def valid(self, spec: ModelSpec | None = None, why: bool = False):
        errors = []
        for name in ("beta", "sigma2", "Sigma", "gamma", "alpha"):
            if not np.all(np.isfinite(getattr(self, name))):
                errors.append(f"``{name}`` contains non-finite values")
        if np.any(self.sigma2 <= 0):
            errors.append("Residual variances must be positive")
        if self.Sigma.ndim != 2 or self.Sigma.shape[0] != self.Sigma.shape[1]:
            errors.append("Sigma must be a square matrix")
        elif not np.allclose(self.Sigma, self.Sigma.T, rtol=0, atol=1e-12):
            errors.append("Sigma must be symmetric")
        elif np.all(np.isfinite(self.Sigma)) and np.linalg.eigvalsh(self.Sigma).min() <= 0:
            errors.append("Sigma must be positive definite")
        for k, hazard in enumerate(self.hazards):
            ok, reasons = hazard.valid(why=True)
            if not ok:
                errors.extend(f"Baseline hazard of cause {k + 1}: {reason}" for reason in reasons)

        if spec is not None:
            expected = {
                "beta": (spec.p,),
                "sigma2": (spec.G,),
                "Sigma": (spec.q, spec.q),
                "gamma": (spec.K, spec.w),
                "alpha": (spec.K, spec.q),
            }
            for name, shape in expected.items():
                if getattr(self, name).shape != shape:
                    errors.append(
                        f"``{name}`` has shape {getattr(self, name).shape}, expected {shape}"
                    )
            if self.hazards and len(self.hazards) != spec.K:
                errors.append(f"Expected {spec.K} baseline hazards, got {len(self.hazards)}")

        if why:
            return (not errors, errors)
        return not errors

    def check(self, spec: ModelSpec | None = None) -> "Params":
        """Raise a single ``ValidityError`` listing every violated invariant."""
        ok, errors = self.valid(spec=spec, why=True)
        if not ok:
            raise ValidityError("Invalid parameters:\n\t* " + "\n\t* ".join(errors))
        return self

    def replace(self, **changes) -> "Params":
        return replace(self, **changes)

    def beta_g(self, spec: ModelSpec, g: int) -> np.ndarray:
        return self.beta[spec.beta_slices[g]]

    def phi(self, k: int) -> np.ndarray:
        return np.concatenate([self.gamma[k], self.alpha[k]])


def floor_sigma2(sigma2: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(sigma2, dtype=float), SIGMA2_FLOOR)


def floor_Sigma(Sigma: np.ndarray) -> np.ndarray:
    """Symmetrize and raise all eigenvalues to at least ``SIGMA_EIGEN_FLOOR``."""
    Sigma = (Sigma + Sigma.T) / 2
    values, vectors = np.linalg.eigh(Sigma)
    if values.min() >= SIGMA_EIGEN_FLOOR:
        return Sigma
    logger.debug(f"Flooring Sigma eigenvalues, min was {values.min():.3e}")
    floored = (vectors * np.maximum(values, SIGMA_EIGEN_FLOOR)) @ vectors.T
    return (floored + floored.T) / 2


def omega_size(spec: ModelSpec) -> int:
    return spec.p + spec.G + spec.q * (spec.q + 1) // 2 + spec.K * (spec.w + spec.q)


def omega_blocks(spec: ModelSpec) -> dict[str, slice]:
    """Positions of the parameter blocks inside the packed Ω vector."""
    sizes = {
        "beta": spec.p,
        "sigma2": spec.G,
        "Sigma": spec.q * (spec.q + 1) // 2,
        "gamma": spec.K * spec.w,
        "alpha": spec.K * spec.q,
    }
    blocks, start = {}, 0
    for name, size in sizes.items():
        blocks[name] = slice(start, start + size)
        start += size
    return blocks


def pack_omega(p: Params) -> np.ndarray:
    rows, cols = np.tril_indices(p.Sigma.shape[0])
    return np.concatenate(
        [p.beta, p.sigma2, p.Sigma[rows, cols], p.gamma.ravel(), p.alpha.ravel()]
    )


def unpack_omega(
    v: np.ndarray, spec: ModelSpec, hazards: tuple[BaselineHazard, ...] = ()
) -> Params:
    """
    Inverse of :func:`pack_omega`.

    Raises:
        ValidityError: If the length of ``v`` does not match the specification.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (omega_size(spec),):
        raise ValidityError(f"Packed vector has length {v.size}, expected {omega_size(spec)}")
    blocks = omega_blocks(spec)
    Sigma = np.zeros((spec.q, spec.q))
    Sigma[np.tril_indices(spec.q)] = v[blocks["Sigma"]]
    Sigma = Sigma + Sigma.T - np.diag(np.diag(Sigma))
    return Params(
        beta=v[blocks["beta"]].copy(),
        sigma2=v[blocks["sigma2"]].copy(),
        Sigma=Sigma,
        gamma=v[blocks["gamma"]].reshape(spec.K, spec.w),
        alpha=v[blocks["alpha"]].reshape(spec.K, spec.q),
        hazards=hazards,
    )


def omega_labels(spec: ModelSpec) -> list[str]:
    labels = []
    for bm in spec.biomarkers:
        labels += [f"beta.{bm.name}.{term}" for term in bm.fixed]
    labels += [f"sigma2.{bm.name}" for bm in spec.biomarkers]
    for r, c in zip(*np.tril_indices(spec.q)):
        labels.append(f"Sigma.{r + 1}.{c + 1}")
    for k in range(spec.K):
        labels += [f"gamma.{k + 1}.{covariate}" for covariate in spec.survival]
    for k in range(spec.K):
        for bm in spec.biomarkers:
            labels += [f"alpha.{k + 1}.{bm.name}.{term}" for term in bm.random]
    return labels


def nelson_aalen(engine: Engine, k: int) -> BaselineHazard:
    """ΔΛ₀k(t_kl) = d_kl / |R(t_kl)|, the baseline hazard with all covariate effects at zero."""
    times = engine.event_times(k)
    if not len(times):
        return BaselineHazard.empty()
    counts = engine.event_counts(k)
    at_risk = engine.riskset_sums(k, np.ones(engine.n))
    return BaselineHazard(times=times, jumps=counts / at_risk, counts=counts)


def init_params(
    data: Dataset | DesignSet, spec: ModelSpec, engine: Engine | None = None
) -> Params:
    """
    Starting values for the EM iterations.

    β_g and σ²_g come from ordinary least squares on the pooled rows of biomarker g, Σ is the
    identity scaled by the pooled residual variance, γ and α are zero and the baseline hazards are
    Nelson–Aalen estimates.

    Args:
        data (Dataset | DesignSet): Validated dataset, or its designs from
            :func:`~jm_scan.data_model.build_designs`.
        spec (ModelSpec): Model specification.
        engine (Engine, optional): Risk-set engine built on the same survival data. A scan engine
            is built when omitted.

    Returns:
        Params: Initial parameters.

    Raises:
        SingularMatrixError: If the normal equations of some biomarker are singular.
        ValidityError: If some biomarker has no measurements at all.
    """
    designs = build_designs(data, spec) if isinstance(data, Dataset) else data
    if engine is None:
        engine = make_engine("scan", designs.T, designs.D, spec.K)

    betas, sigma2 = [], []
    rss_total, n_total = 0.0, 0
    for g, bm in enumerate(spec.biomarkers):
        n_g = int(designs.counts[:, g].sum())
        if not n_g:
            raise ValidityError(f"Biomarker {bm.name} has no measurements")
        A = designs.xtx[g].sum(axis=0)
        c = designs.xty[g].sum(axis=0)
        eigenvalues = np.linalg.eigvalsh(A)
        if eigenvalues.min() <= 1e-10 * max(1.0, eigenvalues.max()):
            raise SingularMatrixError(
                f"Collinear fixed-effects design for biomarker {bm.name}", eigenvalues.min()
            )
        beta_g = np.linalg.solve(A, c)
        rss = float(designs.yty[g].sum() - 2 * beta_g @ c + beta_g @ A @ beta_g)
        rss = max(rss, 0.0)
        betas.append(beta_g)
        sigma2.append(rss / n_g)
        rss_total += rss
        n_total += n_g

    pooled = max(rss_total / n_total, SIGMA_EIGEN_FLOOR)
    params = Params(
        beta=np.concatenate(betas),
        sigma2=floor_sigma2(sigma2),
        Sigma=np.eye(spec.q) * pooled,
        gamma=np.zeros((spec.K, spec.w)),
        alpha=np.zeros((spec.K, spec.q)),
        hazards=tuple(nelson_aalen(engine, k) for k in range(spec.K)),
    )
    logger.debug(f"Initial residual variances {np.round(params.sigma2, 4).tolist()}")
    return params.check(spec)
