import numpy as np
import pytest

from shmm.core import ModelDims, PeriodicLogitTransition, SeasonalHMM, phase_marginals, stationary_distribution
from shmm.emissions import GaussianPeriodicMean
from shmm.presets import screened_model
from shmm.sim import simulate
from shmm.spectral import (
    DataError,
    DegeneracyError,
    FeatureMap,
    RankError,
    default_features,
    empirical_moments,
    feature_matrix,
    population_moments,
    population_roundtrip,
    recover,
    windows_at_phase,
)


def test_feature_map_shapes():
    y = np.array([-1.0, 0.0, 0.5, 3.0])
    assert FeatureMap.exponential(5).evaluate(y).shape == (4, 5)
    h = FeatureMap.histogram([0.0, 1.0])
    np.testing.assert_array_equal(h.evaluate(y).sum(axis=1), 1.0)
    assert h.N == 3
    c = FeatureMap.clipped_power(3, 2.0)
    np.testing.assert_allclose(c.evaluate([3.0])[0], [2.0, 4.0, 8.0])


def test_feature_matrix_quadrature_matches_closed_form():
    m = screened_model(2, 3, 0)
    f = FeatureMap.histogram([-1.0, 0.5, 2.0])
    closed = feature_matrix(m.emissions, 2, f)
    quad = m.emissions.expect(lambda y: f.evaluate(y)[0], 2)
    np.testing.assert_allclose(quad, closed, atol=1e-7)


def test_k1_population_and_recovery():
    dims = ModelDims(1, 3, 1)
    fam = GaussianPeriodicMean(3, [[1.0]], [[0.5]], [[0.2, 0.1]], [[1.0]])
    m = SeasonalHMM(dims, PeriodicLogitTransition.zeros(dims), fam, np.ones(1))
    f = FeatureMap.exponential(3)
    ms = population_moments(m, 2, f)
    np.testing.assert_allclose(ms.N, np.outer(ms.L, ms.L_next), atol=1e-15)
    rec = recover(ms, 1, np.random.default_rng(0), O_next=ms.L_next[:, None])
    assert rec.pi.tolist() == [1.0] and rec.Q.tolist() == [[1.0]]


def test_histogram_m_contracts_to_p():
    m = screened_model(3, 4, 1)
    f = default_features(m)
    ms = population_moments(m, 3, f)
    # histogram indicators sum to one, so summing M over its middle index gives P
    np.testing.assert_allclose(ms.M.sum(axis=1), ms.P, atol=1e-14)


def _mc_triples(model, t, n, rng):
    """Independent stationary triples (Y_{t-1}, Y_t, Y_{t+1}) sampled directly."""
    T = model.T
    pis = phase_marginals(model.transition, stationary_distribution(model.transition))
    Qs = model.transition.matrices()
    tp, tn = (t - 2) % T + 1, t % T + 1
    K = model.K
    x0 = rng.choice(K, size=n, p=pis[tp - 1])
    cum = np.cumsum(Qs[tp - 1], axis=1)
    x1 = (rng.random(n)[:, None] > cum[x0]).sum(axis=1)
    cum = np.cumsum(Qs[t - 1], axis=1)
    x2 = (rng.random(n)[:, None] > cum[x1]).sum(axis=1)
    ys = [model.emissions.sample_path(x, np.full(n, ph), rng) for x, ph in ((x0, tp), (x1, t), (x2, tn))]
    return np.stack(ys, axis=1)


def test_population_moments_monte_carlo():
    m = screened_model(2, 3, 4)
    f = default_features(m)
    t = 2
    ms = population_moments(m, t, f)
    w = _mc_triples(m, t, 1_000_000, np.random.default_rng(7))
    Fc, Fn = f.evaluate(w[:, 1]), f.evaluate(w[:, 2])
    prod = Fc[:, :, None] * Fn[:, None, :]
    est = prod.mean(axis=0)
    se = prod.std(axis=0) / np.sqrt(w.shape[0])
    assert np.all(np.abs(est - ms.N) <= 3 * se + 1e-15)


def test_empirical_single_window():
    f = FeatureMap.exponential(3)
    w = np.array([[0.2, 1.0, 0.5]])
    ms = empirical_moments(w, f, 1)
    phi = [f.evaluate(v)[0] for v in w[0]]
    np.testing.assert_allclose(ms.N, np.outer(phi[1], phi[2]))
    np.testing.assert_allclose(ms.P, np.outer(phi[0], phi[2]))
    np.testing.assert_allclose(ms.M, np.einsum("a,b,c->abc", *phi))


def test_empirical_constant_data():
    f = FeatureMap.exponential(4)
    ms = empirical_moments(np.full((50, 3), 0.7), f, 2)
    phi = f.evaluate(0.7)[0]
    np.testing.assert_allclose(ms.L, phi)
    np.testing.assert_allclose(ms.N, np.outer(phi, phi))


def test_empirical_too_few_windows():
    with pytest.raises(DataError):
        empirical_moments(np.zeros((1, 3)), FeatureMap.exponential(4), 1, K=2)
    with pytest.raises(DataError):
        empirical_moments(np.zeros((5, 2)), FeatureMap.exponential(4), 1)


def test_windows_at_phase():
    y = np.arange(10.0)
    w = windows_at_phase(y, 2, 3, start=1)
    # phases 1,2,3,1,2,3,...; phase 2 at indices 1, 4, 7
    np.testing.assert_array_equal(w[:, 1], [1.0, 4.0, 7.0])
    np.testing.assert_array_equal(w[:, 0], [0.0, 3.0, 6.0])


def test_empirical_matches_population():
    m = screened_model(2, 4, 2)
    f = default_features(m)
    t = 3
    ms = population_moments(m, t, f)
    # 100 independent stationary runs of 1000 periods give 10^5 windows
    from shmm.core import stationary_model
    sm = stationary_model(m)
    ws = np.concatenate([windows_at_phase(simulate(sm, 4000, s).Y, t, 4) for s in range(100)])
    Fc, Fn = f.evaluate(ws[:, 1]), f.evaluate(ws[:, 2])
    prod = Fc[:, :, None] * Fn[:, None, :]
    est = empirical_moments(ws, f, t)
    se = prod.std(axis=0) / np.sqrt(ws.shape[0])
    np.testing.assert_allclose(est.N, prod.mean(axis=0), atol=1e-15)
    assert np.all(np.abs(est.N - ms.N) <= 3 * se + 1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_population_roundtrip_k2_t4(seed):
    m = screened_model(2, 4, seed)
    err = population_roundtrip(m, default_features(m), np.random.default_rng(seed))
    assert max(v.max() for v in err.values()) < 1e-8


def test_moments_invariant_under_relabelling():
    m = screened_model(3, 4, 3)
    f = default_features(m)
    a = population_moments(m, 2, f)
    b = population_moments(m.permuted([2, 0, 1]), 2, f)
    for name in ("L", "N", "P", "M"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-14)


def test_recovered_columns_follow_relabelling():
    m = screened_model(3, 4, 5)
    f = default_features(m)
    perm = [1, 2, 0]
    mp = m.permuted(perm)
    O_true = feature_matrix(mp.emissions, 2, f)
    np.testing.assert_allclose(O_true, feature_matrix(m.emissions, 2, f)[:, perm])
    rec = recover(population_moments(mp, 2, f), 3, np.random.default_rng(0))
    # same set of columns regardless of labelling
    from shmm.spectral import align_columns
    assert np.max(np.abs(rec.O[:, align_columns(rec.O, O_true)] - O_true)) < 1e-8


def test_identical_states_raise():
    dims = ModelDims(2, 3, 1)
    fam = GaussianPeriodicMean(3, [[1.0], [1.0]], [[0.0], [0.0]], [[0.3, 0.1], [0.3, 0.1]], [[1.0], [1.0]])
    beta = np.array([[[1.0, 0.2, 0.0]], [[-1.0, 0.1, 0.3]]])
    m = SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, np.array([0.5, 0.5]))
    with pytest.raises((RankError, DegeneracyError)):
        recover(population_moments(m, 2, FeatureMap.histogram([-1.0, 0.0, 1.0])), 2, np.random.default_rng(0))


def test_recovered_rows_normalized():
    m = screened_model(3, 3, 8)
    from shmm.spectral import recover_period
    f = default_features(m)
    recs = recover_period([population_moments(m, t, f) for t in (1, 2, 3)], 3, np.random.default_rng(1))
    for r in recs:
        np.testing.assert_allclose(r.Q.sum(axis=1), 1.0, atol=1e-8)
        assert abs(r.pi.sum() - 1) < 1e-12
