"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run standalone with ``python tests/test_acceptance.py``; a pass/fail line per
criterion is printed at the end of the run (see ``conftest.py``).
"""

import datetime as dt
import filecmp
import itertools
import math
import os
import sys
import warnings

import numpy as np
import pytest
from scipy.special import logsumexp

from shmm.cli import main as cli_main
from shmm.core import ModelDims, chunk, stationary_model
from shmm.dataio import IngestConfig, ingest, save_model, write_series
from shmm.emissions import scale_gradient, scale_objective
from shmm.core import trig_design
from shmm.inference import FitConfig, align_states, beta_gradient, beta_objective, fit, forward_backward, log_likelihood
from shmm.presets import precip_test_model, random_model, screened_model, sim_study_model
from shmm.sim import simulate
from shmm.spectral import (
    DegeneracyError,
    RankError,
    default_features,
    empirical_moments,
    population_moments,
    population_roundtrip,
    recover_period,
    recovery_errors,
    windows_at_phase,
)
from shmm.validate import bootstrap_report

from conftest import ref_Q, ref_gauss_logpdf, random_gauss_model

# every long-run fit made in this module, for the monotonicity criterion
FITS = {}


def report(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# 1. exact inference against path enumeration
# ---------------------------------------------------------------------------


def enumerate_posteriors(model, y, start):
    K, T, n = model.K, model.T, len(y)
    ph = [(start - 1 + i) % T + 1 for i in range(n)]
    le = [[ref_gauss_logpdf(model, k, ph[i], y[i]) for k in range(K)] for i in range(n)]
    Qs = [ref_Q(model.transition.beta, T, t) for t in range(1, T + 1)]
    paths = list(itertools.product(range(K), repeat=n))
    lj = np.empty(len(paths))
    for p, x in enumerate(paths):
        lp = math.log(model.pi[x[0]])
        for i in range(n):
            lp += le[i][x[i]]
            if i < n - 1:
                lp += math.log(Qs[ph[i] - 1][x[i]][x[i + 1]])
        lj[p] = lp
    ll = logsumexp(lj)
    post = np.exp(lj - ll)
    paths = np.array(paths).reshape(len(paths), n)
    marg = np.array([[post[paths[:, i] == k].sum() for k in range(K)] for i in range(n)])
    return ll, marg


def test_criterion_1_exact_inference():
    worst, count = 0.0, 0
    for K, T in itertools.product((1, 2, 3), (1, 2, 3)):
        for s in range(12):
            rng = np.random.default_rng(1000 * K + 100 * T + s)
            m = random_gauss_model(rng, K, T)
            n = int(rng.integers(1, 9))
            start = int(rng.integers(1, T + 1))
            y = rng.normal(0, 2, n)
            ll, marg = enumerate_posteriors(m, y, start)
            sm = forward_backward(m, y, start=start)
            worst = max(worst, abs(log_likelihood(m, y, start=start) - ll), abs(sm.loglik - ll),
                        np.max(np.abs(sm.marginal - marg)))
            count += 1
    report(f"criterion 1: {count} models, max deviation {worst:.2e}")
    assert count >= 100
    assert worst < 1e-10


# ---------------------------------------------------------------------------
# 2. seasonal vs chunked likelihood
# ---------------------------------------------------------------------------


def test_criterion_2_chunked_equivalence():
    shapes = [(K, T) for K in range(1, 9) for T in range(1, 7) if K**T <= 64]
    families = ("gaussian_periodic_mean", "exp_periodic_scale", "zero_inflated_exp")
    worst, count = 0.0, 0
    for i in range(60):
        rng = np.random.default_rng(i)
        K, T = shapes[i % len(shapes)]
        fam = families[i % 3]
        m = random_model(K, T, rng, d=1, family=fam, M=2 if fam == "zero_inflated_exp" else 1)
        J = int(rng.integers(1, 6))
        y = simulate(m, (J + 1) * T, int(rng.integers(2**31))).Y
        a = log_likelihood(m, y)
        b = chunk(m).log_likelihood(y)
        worst = max(worst, abs(a - b))
        count += 1
    report(f"criterion 2: {count} models, max deviation {worst:.2e}")
    assert count >= 50
    assert worst < 1e-10


# ---------------------------------------------------------------------------
# fits shared by criteria 3, 4 and 7
# ---------------------------------------------------------------------------

SIM_SEEDS = (1, 2, 3)


@pytest.fixture(scope="module")
def sim_study_fits():
    truth = sim_study_model()
    out = {}
    for s in SIM_SEEDS:
        y = simulate(truth, 20000, s).Y
        res = fit(y, truth.dims, "gaussian_periodic_mean", FitConfig(seed=s), M=1, degree=1)
        FITS[f"sim-study seed {s}"] = res
        out[s] = res
    return out


def _precip_file(path, y):
    """Write ``y`` as dated 1950-2015 rows in the station layout, with Feb 29 rows present."""
    lines = ["Synthetic daily precipitation", "", "STAID, SOUID,    DATE,   RR, Q_RR"]
    d, i = dt.date(1950, 1, 1), 0
    while d <= dt.date(2015, 12, 31):
        if (d.month, d.day) == (2, 29):
            lines.append(f"    1,    1,{d:%Y%m%d},  0.0,    0")
        else:
            lines.append(f"    1,    1,{d:%Y%m%d},{float(y[i])!r},    0")
            i += 1
        d += dt.timedelta(days=1)
    assert i == y.size
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def precip_pipeline(tmp_path_factory):
    truth = precip_test_model()
    y = simulate(truth, 66 * 365, 11).Y
    path = tmp_path_factory.mktemp("precip") / "station.txt"
    _precip_file(path, y)
    series = ingest(path, IngestConfig())
    res = fit(series.values, ModelDims(4, 365, 2), "zero_inflated_exp", FitConfig(seed=11), M=3)
    FITS["precipitation pipeline"] = res
    rep = bootstrap_report(res.model, series, reps=200, seed=11)
    return truth, y, series, res, rep


@pytest.fixture(scope="module")
def small_fits():
    out = {}
    cases = [("gaussian_periodic_mean", 2, 7, 1, 1), ("gaussian_periodic_mean", 3, 5, 1, 2),
             ("exp_periodic_scale", 2, 6, 1, 1), ("exp_periodic_scale", 2, 4, 0, 2),
             ("zero_inflated_exp", 2, 5, 1, 2), ("zero_inflated_exp", 3, 4, 1, 3)]
    for i, (fam, K, T, d, M) in enumerate(cases):
        truth = random_model(K, T, 50 + i, d=d, family=fam, M=M)
        y = simulate(truth, 1500, 60 + i).Y
        opts = {"M": M} if fam == "zero_inflated_exp" else {"M": M, "degree": 1}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            res = fit(y, truth.dims, fam, FitConfig(n_starts=5, short_run_iters=10, seed=i, max_iters=500), **opts)
        FITS[f"{fam} K={K} T={T}"] = res
        out[i] = res
    truth = random_model(2, 4, 99, d=1)
    y = simulate(truth, 1200, 98).Y
    res = fit(y, truth.dims, "gaussian_periodic_mean", FitConfig(n_starts=3, seed=1, pi_mode="stationary", max_iters=300))
    FITS["stationary initial law"] = res
    return out


# ---------------------------------------------------------------------------
# 3. EM monotonicity
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_em_monotonicity(sim_study_fits, precip_pipeline, small_fits):
    bad = []
    for name, res in FITS.items():
        ll = np.array(res.diagnostics.logliks)
        drop = float(np.max(ll[:-1] - ll[1:])) if ll.size > 1 else 0.0
        report(f"criterion 3: {name}: {ll.size} trace entries, largest drop {max(drop, 0):.2e}")
        if not res.diagnostics.is_monotone(slack=1e-9):
            bad.append(name)
    assert len(FITS) >= 10
    assert not bad, bad


# ---------------------------------------------------------------------------
# 4. simulation-study reproduction
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_simulation_study(sim_study_fits):
    truth = sim_study_model()
    passes = []
    for s, res in sim_study_fits.items():
        perm, _ = align_states(res.model, truth)
        m = res.model.permuted(perm)
        em = max(np.max(np.abs(m.emissions.param_vector(k) - truth.emissions.param_vector(k))) for k in range(2))
        be = float(np.max(np.abs(m.transition.beta - truth.transition.beta)))
        ok = em <= 0.15 and be <= 0.3
        report(f"criterion 4: seed {s}: perm {perm.tolist()}, emission error {em:.4f}, beta error {be:.4f}, {'pass' if ok else 'fail'}")
        passes.append(ok)
    assert np.median(passes) >= 1


# ---------------------------------------------------------------------------
# 5. spectral recovery
# ---------------------------------------------------------------------------


def test_criterion_5_spectral_population():
    worst, count = 0.0, 0
    for K, T in itertools.product((2, 3), (3, 4)):
        for s in range(5):
            m = screened_model(K, T, 100 * K + 10 * T + s)
            err = population_roundtrip(m, default_features(m), np.random.default_rng(s))
            worst = max(worst, max(v.max() for v in err.values()))
            count += 1
    report(f"criterion 5: {count} screened models, max recovery error {worst:.2e}")
    assert count >= 20
    assert worst < 1e-8


def _empirical_error(model, feats, y, n_windows, rng):
    T = model.T
    sets = []
    for t in range(1, T + 1):
        w = windows_at_phase(y, t, T)[:n_windows]
        sets.append(empirical_moments(w, feats, t, K=model.K))
    try:
        recs = recover_period(sets, model.K, rng)
    except (RankError, DegeneracyError):
        return math.inf
    return max(v.max() for v in recovery_errors(model, recs, feats).values())


def _conditioning(m):
    """Smallest K-th singular value of the population P(t) over the period."""
    f = default_features(m)
    return min(np.linalg.svd(population_moments(m, t, f).P, compute_uv=False)[m.K - 1] for t in range(1, m.T + 1))


def test_criterion_5_spectral_empirical():
    # screened models can still have a nearly rank-deficient P(t); pick the best
    # conditioned of a fixed candidate list using population quantities only
    m = max((screened_model(2, 3, s) for s in range(40)), key=_conditioning)
    feats = default_features(m)
    sm = stationary_model(m)
    small, large = [], []
    for s in range(5):
        y = simulate(sm, 3 * 100_000 + 3, 500 + s, keep_states=False).Y
        small.append(_empirical_error(m, feats, y, 1_000, np.random.default_rng(s)))
        large.append(_empirical_error(m, feats, y, 100_000, np.random.default_rng(s)))
    report(f"criterion 5: empirical error median {np.median(small):.3e} at 1e3 windows, "
           f"{np.median(large):.3e} at 1e5 windows")
    assert np.median(large) < np.median(small)


# ---------------------------------------------------------------------------
# 6. gradient checks
# ---------------------------------------------------------------------------


def test_criterion_6_gradient_checks():
    h = 1e-6
    worst_beta = worst_scale = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        K, T, d = int(rng.integers(2, 5)), int(rng.integers(3, 12)), int(rng.integers(0, 3))
        counts = rng.uniform(0, 10, size=(T, K, K))
        beta = rng.normal(0, 1, size=(K, K - 1, 2 * d + 1))
        g = beta_gradient(beta, counts)
        fd = np.zeros_like(beta)
        for idx in np.ndindex(beta.shape):
            e = np.zeros_like(beta)
            e[idx] = h
            fd[idx] = (beta_objective(beta + e, counts) - beta_objective(beta - e, counts)) / (2 * h)
        worst_beta = max(worst_beta, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        T, d = int(rng.integers(6, 40)), int(rng.integers(1, 4))
        Z = trig_design(np.arange(1, T + 1), T, d, constant=False)
        A, B = rng.uniform(0.5, 5, T), rng.uniform(0.5, 5, T)
        delta = rng.uniform(-0.1, 0.1, 2 * d)
        g = scale_gradient(delta, A, B, Z)
        fd = np.array([(scale_objective(delta + h * e, A, B, Z) - scale_objective(delta - h * e, A, B, Z)) / (2 * h)
                       for e in np.eye(2 * d)])
        worst_scale = max(worst_scale, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8))
    report(f"criterion 6: max relative gradient error beta {worst_beta:.2e}, scale {worst_scale:.2e}")
    assert worst_beta <= 1e-4 and worst_scale <= 1e-4


# ---------------------------------------------------------------------------
# 7. precipitation pipeline
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_precipitation_pipeline(precip_pipeline):
    truth, y, series, res, rep = precip_pipeline
    assert len(series) == 24090
    assert len(series.dropped()) == 16
    np.testing.assert_array_equal(series.values, y)
    perm, _ = align_states(res.model, truth)
    em = res.model.permuted(perm).emissions
    rel_w = np.abs(em.weights - truth.emissions.weights) / truth.emissions.weights
    rel_r = np.abs(em.rates - truth.emissions.rates) / truth.emissions.rates
    worst = float(max(rel_w.max(), rel_r.max()))
    cov = rep.coverage()
    report(f"criterion 7: perm {perm.tolist()}, max relative emission error {worst:.3f}, "
           f"coverage mean {cov['mean']:.3f}, wet frequency {cov['wet_frequency']:.3f}")
    assert worst <= 0.15
    assert cov["mean"] >= 0.85 and cov["wet_frequency"] >= 0.85


# ---------------------------------------------------------------------------
# 8. CLI determinism
# ---------------------------------------------------------------------------


def _same_tree(a, b):
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b)) and names
    for n in names:
        assert filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False), n


def test_criterion_8_cli_determinism(tmp_path, capsys):
    data = tmp_path / "y.csv"
    write_series(data, simulate(sim_study_model(), 2000, 5).Y)
    save_model(sim_study_model(), tmp_path / "m.json")
    src = ["--data", data, "--date-format", "none", "--value-column", "value"]
    commands = {
        "fit": ["fit", *src, "--preset", "sim-study", "--starts", 3, "--short-iters", 5, "--max-iters", 40,
                "--seed", 4],
        "simulate": ["simulate", "--model", tmp_path / "m.json", "--length", 400, "--reps", 5, "--seed", 4],
        "validate": ["validate", *src, "--model", tmp_path / "m.json", "--reps", 25, "--seed", 4],
        "spectral-demo": ["spectral-demo", "--states", 3, "--period", 4, "--seed", 4],
        "check": ["check", "--model", tmp_path / "m.json"],
    }
    for name, argv in commands.items():
        outs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                code = cli_main([str(v) for v in argv] + ["--out", str(out)])
            assert code == 0, name
            outs.append((out, capsys.readouterr().out.replace(str(out), "<out>")))
        _same_tree(outs[0][0], outs[1][0])
        assert outs[0][1] == outs[1][1]
        report(f"criterion 8: {name}: {len(os.listdir(outs[0][0]))} files identical across runs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
