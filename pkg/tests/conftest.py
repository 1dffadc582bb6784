"""Shared oracles and fixtures.

The oracles here are deliberately naive: scalar math for transition
probabilities, scipy.stats for densities and explicit path enumeration for
likelihoods and posteriors.
"""

import itertools
import math
import re

import numpy as np
import pytest
from scipy import stats

from shmm.core import ModelDims, PeriodicLogitTransition, SeasonalHMM
from shmm.emissions import GaussianPeriodicMean


def ref_Q(beta, T, t):
    """Transition matrix by direct evaluation of the reference-category softmax."""
    beta = np.asarray(beta)
    K = beta.shape[0]
    d = (beta.shape[2] - 1) // 2
    z = [1.0]
    for l in range(1, d + 1):
        z += [math.cos(2 * math.pi * l * t / T), math.sin(2 * math.pi * l * t / T)]
    Q = np.zeros((K, K))
    for i in range(K):
        logits = [sum(beta[i, j, c] * z[c] for c in range(len(z))) for j in range(K - 1)] + [0.0]
        ex = [math.exp(v) for v in logits]
        s = sum(ex)
        Q[i] = [e / s for e in ex]
    return Q


def ref_gauss_logpdf(model, k, t, y):
    """M = 1 Gaussian log-density from scipy with the seasonal mean written out."""
    fam = model.emissions
    T = model.T
    m = fam.means[k, 0]
    for l in range(1, fam.degree + 1):
        m += fam.delta[k, 2 * l - 2] * math.cos(2 * math.pi * l * t / T) + fam.delta[k, 2 * l - 1] * math.sin(2 * math.pi * l * t / T)
    return stats.norm.logpdf(y, m, math.sqrt(fam.variances[k, 0]))


def phase(i, T, start=1):
    return (start - 1 + i) % T + 1


def enumerate_paths(model, y, start=1, logpdf=None):
    """Joint log-probabilities of every hidden path; returns (paths, log_joint)."""
    K, T, n = model.K, model.T, len(y)
    logpdf = logpdf or ref_gauss_logpdf
    Qs = [ref_Q(model.transition.beta, T, t) for t in range(1, T + 1)]
    paths = list(itertools.product(range(K), repeat=n))
    out = []
    for x in paths:
        lp = math.log(model.pi[x[0]]) if model.pi[x[0]] > 0 else -math.inf
        for i in range(n):
            t = phase(i, T, start)
            lp += logpdf(model, x[i], t, y[i])
            if i < n - 1:
                lp += math.log(Qs[t - 1][x[i], x[i + 1]])
        out.append(lp)
    return np.array(paths), np.array(out)


def random_gauss_model(rng, K, T, d=1, de=1):
    dims = ModelDims(K, T, d)
    beta = rng.normal(0, 1.0, size=(K, K - 1, dims.n_coef))
    fam = GaussianPeriodicMean(
        T,
        np.ones((K, 1)),
        rng.normal(0, 1.5, size=(K, 1)),
        rng.normal(0, 0.7, size=(K, 2 * de)),
        rng.uniform(0.3, 2.0, size=(K, 1)),
    )
    return SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, rng.dirichlet(np.ones(K)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_ACCEPT = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPT[key] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPT:
        return
    terminalreporter.section("acceptance criteria")
    for (n, name), outcome in sorted(_ACCEPT.items()):
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {n} ({name.replace('_', ' ')}): {verdict}")
