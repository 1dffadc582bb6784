"""Named parameter sets and random model generators."""

from __future__ import annotations

import numpy as np

from shmm.core import ModelDims, PeriodicLogitTransition, SeasonalHMM
from shmm.emissions import ExpPeriodicScale, GaussianPeriodicMean, ZeroInflatedExpMixture


def sim_study_model() -> SeasonalHMM:
    """Two-state Gaussian model with yearly period used for the simulation study.

    Transition logits (constant, cos, sin): state 0 -> (1, 0.7, 0.5),
    state 1 -> (-1, -0.6, 0.7), both against state 1 as reference.  Means
    (-1, 2), variances (1, 0.25); seasonal mean coefficients (cos, sin) are
    (2.5, 4) for state 0 and (-1.5, 3.5) for state 1.
    """
    dims = ModelDims(K=2, T=365, d=1)
    beta = np.array([[[1.0, 0.7, 0.5]], [[-1.0, -0.6, 0.7]]])
    fam = GaussianPeriodicMean(
        period=365,
        weights=[[1.0], [1.0]],
        means=[[-1.0], [2.0]],
        delta=[[2.5, 4.0], [-1.5, 3.5]],
        variances=[[1.0], [0.25]],
    )
    return SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, np.array([0.5, 0.5]))


# published fit for a daily rainfall record (K=4, M=3); rows of PRECIP_WEIGHTS
# are renormalized because the printed values are rounded
PRECIP_RATES = np.array([[3.455, 3.455], [1.162, 1.825], [2.330, 0.481], [0.086, 0.214]])
PRECIP_WEIGHTS = np.array(
    [[0.983, 0.003, 0.014], [0.749, 0.025, 0.226], [0.032, 0.258, 0.709], [0.029, 0.059, 0.912]]
)


def precip_emissions(T: int = 365) -> ZeroInflatedExpMixture:
    p = PRECIP_WEIGHTS / PRECIP_WEIGHTS.sum(axis=1, keepdims=True)
    lam = np.array(PRECIP_RATES)
    order = np.argsort(lam, axis=1)
    lam = np.take_along_axis(lam, order, axis=1)
    p[:, 1:] = np.take_along_axis(p[:, 1:], order, axis=1)
    return ZeroInflatedExpMixture(T, p, lam)


def precip_dims() -> ModelDims:
    return ModelDims(K=4, T=365, d=2)


def persistent_beta(dims: ModelDims, stay: float, rng=None, seasonal: float = 0.0) -> np.ndarray:
    """Coefficients whose constant term favours staying put by ``stay`` logits."""
    K = dims.K
    beta = np.zeros((K, K - 1, dims.n_coef))
    for i in range(K):
        for j in range(K - 1):
            beta[i, j, 0] = stay if i == j else 0.0
        if i == K - 1:
            beta[i, :, 0] = -stay
    if seasonal and dims.d:
        rng = np.random.default_rng(rng)
        beta[:, :, 1:] = rng.uniform(-seasonal, seasonal, size=beta[:, :, 1:].shape)
    return beta


def precip_test_model(T: int = 365) -> SeasonalHMM:
    """Well separated K=4, M=3, d=2 zero-inflated model with persistent states.

    Within each state the two wet rates differ by a factor 25 and the
    states' rate scales by a factor 10, with every weight at least 0.1, so
    66 years of daily data pin all emission parameters down to a few percent.
    """
    dims = ModelDims(K=4, T=T, d=2)
    beta = persistent_beta(dims, 3.5)
    beta[:, :, 1] += np.array([0.4, -0.3, 0.2, -0.2])[:, None]
    beta[:, :, 4] += np.array([-0.2, 0.2, 0.3, 0.1])[:, None]
    weights = np.array([[0.4, 0.3, 0.3], [0.3, 0.35, 0.35], [0.2, 0.4, 0.4], [0.1, 0.45, 0.45]])
    rates = np.array([[8.0, 200.0], [0.8, 20.0], [0.08, 2.0], [0.008, 0.2]])
    fam = ZeroInflatedExpMixture(T, weights, rates)
    return SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, np.full(4, 0.25))


def random_model(K: int, T: int, rng, d: int = 1, family: str = "gaussian_periodic_mean",
                 M: int = 1, beta_scale: float = 1.0) -> SeasonalHMM:
    """Random valid model, mostly for tests."""
    rng = np.random.default_rng(rng)
    dims = ModelDims(K, T, d)
    beta = rng.normal(0.0, beta_scale, size=(K, K - 1, dims.n_coef))
    if family == "gaussian_periodic_mean":
        fam = GaussianPeriodicMean(
            T,
            rng.dirichlet(np.ones(M), size=K),
            rng.normal(0.0, 2.0, size=(K, M)),
            rng.normal(0.0, 0.5, size=(K, 2 * d)),
            rng.uniform(0.3, 2.0, size=(K, M)),
        )
    elif family == "exp_periodic_scale":
        fam = ExpPeriodicScale(
            T,
            rng.dirichlet(np.ones(M), size=K),
            np.sort(rng.uniform(0.2, 3.0, size=(K, M)), axis=1),
            rng.uniform(-0.2, 0.2, size=(K, 2 * d)),
        )
    elif family == "zero_inflated_exp":
        M = max(M, 2)
        fam = ZeroInflatedExpMixture(
            T, rng.dirichlet(np.ones(M), size=K), np.sort(rng.uniform(0.2, 3.0, size=(K, M - 1)), axis=1)
        )
    else:
        raise ValueError(f"unknown emission family {family!r}")
    return SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, rng.dirichlet(np.ones(K)))


def screened_model(K: int, T: int, rng, d: int = 1, family: str = "gaussian_periodic_mean",
                   sigma_min: float = 0.05, det_min: float = 0.01, features=None,
                   max_tries: int = 1000) -> SeasonalHMM:
    """Random model with ``sigma_min(O_t) > sigma_min`` and ``|det Q(t)| > det_min`` for all ``t``.

    Draws persistent transitions (diagonal logit boost 1.5 plus N(0, 0.5)
    noise) and rejects until both screens pass.  The emission screen uses
    ``features`` or, by default, :func:`shmm.spectral.default_features`.
    """
    from shmm.core import check_assumptions
    from shmm.spectral import default_features

    rng = np.random.default_rng(rng)
    dims = ModelDims(K, T, d)
    for _ in range(max_tries):
        base = random_model(K, T, rng, d, family)
        beta = persistent_beta(dims, 1.5) + rng.normal(0.0, 0.5, size=(K, K - 1, dims.n_coef))
        model = base.replace(transition=PeriodicLogitTransition(dims, beta))
        rep = check_assumptions(model, features=features if features is not None else default_features(model))
        if np.all(np.abs(rep.det) > det_min) and np.all(rep.emission_sigma_min > sigma_min):
            return model
    raise RuntimeError(f"no model passed the screens in {max_tries} draws")
