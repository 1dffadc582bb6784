"""Exact smoothing, EM fitting and decoding for seasonal HMMs.

All functions take the observations ``obs`` and the phase ``start`` of
``obs[0]`` (1-based, default 1).  Observation ``i`` (0-based) sits at phase
``((start - 1 + i) mod T) + 1`` and the step ``i -> i+1`` uses ``Q`` at that
same phase.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from shmm import _kernels
from shmm.core import (
    ModelDims,
    PeriodicLogitTransition,
    SeasonalHMM,
    phase_of,
    stationary_distribution,
    trig_design,
)
from shmm.emissions import random_family

log = logging.getLogger(__name__)


class ZeroLikelihoodError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"observation {index} has zero density in every reachable state")
        self.index = index


class FitError(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics


def phases(n: int, T: int, start: int = 1) -> np.ndarray:
    return phase_of(np.arange(n) + start, T).astype(np.int64)


def _prepare(model: SeasonalHMM, obs, pi, start):
    y = np.asarray(obs, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("obs must be a non-empty 1-D sequence")
    ph = phases(y.size, model.T, start)
    log_e = np.ascontiguousarray(model.emissions.log_density_matrix(y, ph))
    pi = model.pi if pi is None else np.asarray(pi, dtype=float)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    trans = np.ascontiguousarray(ph[:-1] - 1)
    return y, ph, log_e, log_pi, np.ascontiguousarray(model.transition.log_matrices()), trans


def _first_zero(log_c) -> int:
    bad = np.flatnonzero(~np.isfinite(log_c))
    return int(bad[0]) if bad.size else -1


def log_likelihood(model: SeasonalHMM, obs, pi=None, start: int = 1) -> float:
    """Log-likelihood of ``obs`` with ``X_1 ~ pi`` (default ``model.pi``).

    Returns ``-inf`` (with a warning naming the offending index) when some
    observation is impossible under every state.
    """
    y, ph, log_e, log_pi, log_Q, trans = _prepare(model, obs, pi, start)
    _, log_c = _kernels.forward(log_pi, log_Q, trans, log_e)
    idx = _first_zero(log_c)
    if idx >= 0:
        warnings.warn(f"zero likelihood at observation {idx}", RuntimeWarning, stacklevel=2)
        return -np.inf
    return float(np.sum(log_c))


@dataclass
class SmoothingResult:
    marginal: np.ndarray
    pairwise: np.ndarray
    loglik: float
    phase_counts: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.marginal.shape[0]


def forward_backward(model: SeasonalHMM, obs, pi=None, start: int = 1) -> SmoothingResult:
    """Smoothing marginals ``P(X_t = k | Y)`` and pairwise ``P(X_t = k, X_{t+1} = l | Y)``.

    ``phase_counts[tau]`` sums the pairwise posteriors over steps taken with
    ``Q(tau + 1)``.
    """
    y, ph, log_e, log_pi, log_Q, trans = _prepare(model, obs, pi, start)
    log_a, log_c = _kernels.forward(log_pi, log_Q, trans, log_e)
    idx = _first_zero(log_c)
    if idx >= 0:
        raise ZeroLikelihoodError(idx)
    log_b = _kernels.backward(log_Q, trans, log_e, log_c)
    gamma = np.exp(log_a + log_b)
    xi = _kernels.pairwise(log_a, log_b, log_Q, trans, log_e, log_c)
    K, T = model.K, model.T
    counts = np.zeros((T, K, K))
    np.add.at(counts, trans, xi)
    return SmoothingResult(gamma, xi, float(np.sum(log_c)), counts)


def viterbi(model: SeasonalHMM, obs, pi=None, start: int = 1) -> np.ndarray:
    """Most probable hidden path (0-based states); ties go to the lower state index."""
    y, ph, log_e, log_pi, log_Q, trans = _prepare(model, obs, pi, start)
    path, best = _kernels.viterbi(log_pi, log_Q, trans, log_e)
    if not np.isfinite(best):
        raise ZeroLikelihoodError(_first_zero(_kernels.forward(log_pi, log_Q, trans, log_e)[1]))
    return path


# ---------------------------------------------------------------------------
# transition block of the M-step
# ---------------------------------------------------------------------------


def _row_logq(theta, Z):
    logits = np.concatenate([Z @ theta.T, np.zeros((Z.shape[0], 1))], axis=1)
    return logits - logsumexp(logits, axis=1, keepdims=True)


def beta_objective(beta, counts) -> float:
    """``sum_{t,k,l} counts[t,k,l] log Q_kl(t)`` for phase-aggregated pairwise posteriors."""
    T, K, _ = counts.shape
    Z = trig_design(np.arange(1, T + 1), T, (beta.shape[2] - 1) // 2)
    return float(sum(np.sum(counts[:, i] * _row_logq(beta[i], Z)) for i in range(K)))


def beta_gradient(beta, counts) -> np.ndarray:
    T, K, _ = counts.shape
    Z = trig_design(np.arange(1, T + 1), T, (beta.shape[2] - 1) // 2)
    g = np.zeros_like(beta, dtype=float)
    for i in range(K):
        q = np.exp(_row_logq(beta[i], Z))
        resid = counts[:, i, :-1] - counts[:, i].sum(axis=1, keepdims=True) * q[:, :-1]
        g[i] = resid.T @ Z
    return g


def _maximize_row(theta, C, Z, gtol, max_iter):
    """Damped Newton ascent on one multinomial-logit row; never decreases the objective."""
    J, D = theta.shape
    ntot = C.sum(axis=1)
    f = float(np.sum(C * _row_logq(theta, Z)))
    for _ in range(max_iter):
        q = np.exp(_row_logq(theta, Z))[:, :-1]
        g = ((C[:, :-1] - ntot[:, None] * q).T @ Z).ravel()
        if np.linalg.norm(g) < gtol:
            break
        # negative Hessian: sum_t n_t (diag(q_t) - q_t q_t^T) kron Z_t Z_t^T
        W = ntot[:, None, None] * (np.einsum("tj,jk->tjk", q, np.eye(J)) - q[:, :, None] * q[:, None, :])
        H = np.einsum("tjk,tc,td->jckd", W, Z, Z).reshape(J * D, J * D)
        try:
            direction = np.linalg.lstsq(H, g, rcond=1e-12)[0]
        except np.linalg.LinAlgError:
            direction = g
        if g @ direction <= 0:
            direction = g
        step, moved = 1.0, False
        for _ in range(50):
            cand = theta + step * direction.reshape(J, D)
            fc = float(np.sum(C * _row_logq(cand, Z)))
            if fc >= f + 1e-4 * step * (g @ direction):
                theta, f, moved = cand, fc, True
                break
            step *= 0.5
        if not moved:
            break
    return theta, f


def maximize_beta(beta, counts, gtol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Raise the transition block of the EM objective, row by row."""
    T, K, _ = counts.shape
    if K == 1:
        return np.array(beta, dtype=float)
    Z = trig_design(np.arange(1, T + 1), T, (beta.shape[2] - 1) // 2)
    out = np.array(beta, dtype=float)
    for i in range(K):
        if counts[:, i].sum() <= 0:
            continue
        out[i], _ = _maximize_row(out[i], counts[:, i], Z, gtol, max_iter)
    return out


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


class EMStep(NamedTuple):
    model: SeasonalHMM
    pi: np.ndarray
    loglik: float
    flags: list


def em_iterate(model: SeasonalHMM, obs, pi=None, start: int = 1, pi_mode: str = "free") -> EMStep:
    """One EM iteration; ``loglik`` is the log-likelihood before the update.

    ``pi_mode="free"`` re-estimates the initial law from the first smoothing
    marginal; ``"stationary"`` ties it to the stationary law of ``Q(1)...Q(T)``.
    """
    if pi is not None:
        model = model.replace(pi=pi)
    y = np.asarray(obs, dtype=float)
    sm = forward_backward(model, y, start=start)
    flags = []

    # transition block
    tr_old = model.transition
    old_obj = beta_objective(tr_old.beta, sm.phase_counts)
    beta = maximize_beta(tr_old.beta, sm.phase_counts)
    new_obj = beta_objective(beta, sm.phase_counts)
    if not new_obj >= old_obj - 1e-9 * max(1.0, abs(old_obj)):
        flags.append("transition update rejected")
        beta = tr_old.beta
    transition = PeriodicLogitTransition(model.dims, beta)

    # initial law
    if pi_mode == "free":
        new_pi = sm.marginal[0] / sm.marginal[0].sum()
    elif pi_mode == "stationary":
        transition, new_pi = _stationary_block(model, transition, sm, flags)
    else:
        raise ValueError(f"unknown pi_mode {pi_mode!r}")

    # emission block
    res = model.emissions.weighted_mstep(y, phases(y.size, model.T, start), sm.marginal)
    flags.extend(res.flags)
    new = SeasonalHMM(model.dims, transition, res.family, new_pi)
    return EMStep(new, new.pi, sm.loglik, flags)


def _stationary_block(model, transition, sm, flags):
    """Backtrack the transition update until transition + initial-law terms do not decrease."""
    g1 = sm.marginal[0]

    def obj(tr):
        pi = stationary_distribution(tr)
        with np.errstate(divide="ignore"):
            return beta_objective(tr.beta, sm.phase_counts) + float(np.sum(np.where(g1 > 0, g1 * np.log(pi), 0.0))), pi

    f0, pi0 = obj(model.transition)
    step = 1.0
    for _ in range(30):
        tr = PeriodicLogitTransition(model.dims, model.transition.beta + step * (transition.beta - model.transition.beta))
        f, pi = obj(tr)
        if f >= f0 - 1e-9 * max(1.0, abs(f0)):
            return tr, pi
        step *= 0.5
    flags.append("transition update rejected (stationary mode)")
    return model.transition, pi0


@dataclass
class FitConfig:
    n_starts: int = 30
    short_run_iters: int = 50
    short_run_len: int = 500
    rel_tol: float = 1e-7
    max_iters: int = 5000
    seed: int = 0
    beta_init_range: float = 1.0
    pi_mode: str = "free"
    restart_from: str = "initial"
    threads: int = 1

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be > 0")
        if self.restart_from not in ("initial", "short_run"):
            raise ValueError("restart_from must be 'initial' or 'short_run'")


@dataclass
class FitDiagnostics:
    start_logliks: list
    chosen_start: int
    trace: list
    converged: bool
    flags: list = field(default_factory=list)

    @property
    def logliks(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])

    def is_monotone(self, slack: float = 1e-9) -> bool:
        ll = self.logliks
        return bool(np.all(np.diff(ll) >= -slack))

    def to_dict(self) -> dict:
        return {
            "start_logliks": [None if not np.isfinite(v) else v for v in self.start_logliks],
            "chosen_start": self.chosen_start,
            "converged": self.converged,
            "n_iterations": len(self.trace),
            "trace": [{"iteration": i, "loglik": ll, "rel_diff": rd} for i, ll, rd in self.trace],
            "flags": list(self.flags),
        }


class FitResult(NamedTuple):
    model: SeasonalHMM
    pi: np.ndarray
    diagnostics: FitDiagnostics


def initial_model(dims: ModelDims, family: str, y, rng: np.random.Generator, start: int = 1,
                  beta_range: float = 1.0, **family_opts) -> SeasonalHMM:
    """Random starting point: ``beta ~ U(-r, r)``, data-scaled emission parameters, uniform ``pi``."""
    K, T = dims.K, dims.T
    beta = rng.uniform(-beta_range, beta_range, size=(K, K - 1, dims.n_coef))
    fam = random_family(family, K, T, y, phases(len(y), T, start), rng, **family_opts)
    return SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, np.full(K, 1.0 / K))


def run_em(model: SeasonalHMM, obs, n_iter: int, rel_tol: Optional[float] = None, start: int = 1,
           pi_mode: str = "free"):
    """Iterate EM; returns ``(model, trace, converged, flags)`` where ``trace`` rows are
    ``(iteration, loglik, relative difference)`` and the last row is the returned model."""
    trace, flags = [], []
    prev = None
    converged = False
    for it in range(n_iter):
        step = em_iterate(model, obs, start=start, pi_mode=pi_mode)
        ll = step.loglik
        rel = np.nan if prev is None else (ll - prev) / abs(prev)
        trace.append((it, ll, rel))
        flags.extend(f"iter {it}: {f}" for f in step.flags)
        model = step.model
        if rel_tol is not None and prev is not None and abs(rel) < rel_tol:
            converged = True
            break
        prev = ll
    final = log_likelihood(model, obs, start=start)
    last = trace[-1][1] if trace else np.nan
    trace.append((len(trace), final, (final - last) / abs(last) if trace else np.nan))
    return model, trace, converged, flags


def _short_run(args):
    i, ss, y, dims, family, cfg, start, opts = args
    rng = np.random.default_rng(ss)
    seg = y[: cfg.short_run_len]
    try:
        init = initial_model(dims, family, seg, rng, start, cfg.beta_init_range, **opts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            end, trace, _, _ = run_em(init, seg, cfg.short_run_iters, None, start, cfg.pi_mode)
        ll = trace[-1][1]
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        log.info("start %d failed: %s", i, exc)
        return -np.inf, None, None
    return (ll if np.isfinite(ll) else -np.inf), init, end


def fit(obs, dims: ModelDims, family: str, cfg: Optional[FitConfig] = None, start: int = 1,
        **family_opts) -> FitResult:
    """Multi-start EM.

    Runs ``cfg.n_starts`` short EMs on the first ``cfg.short_run_len``
    observations, keeps the start with the largest log-likelihood, then
    iterates EM on all data until the relative log-likelihood change drops
    below ``cfg.rel_tol``.
    """
    cfg = cfg or FitConfig()
    y = np.asarray(obs, dtype=float)
    if y.size < 10 * dims.K * dims.T:
        warnings.warn(f"only {y.size} observations for K={dims.K}, T={dims.T}", stacklevel=2)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_starts)
    jobs = [(i, ss, y, dims, family, cfg, start, family_opts) for i, ss in enumerate(seeds)]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(_short_run, jobs))
    else:
        results = [_short_run(j) for j in jobs]
    lls = [r[0] for r in results]
    if not np.any(np.isfinite(lls)):
        raise FitError("every start produced a non-finite likelihood", FitDiagnostics(lls, -1, [], False))
    best = int(np.argmax(lls))
    init = results[best][1] if cfg.restart_from == "initial" else results[best][2]
    model, trace, converged, flags = run_em(init, y, cfg.max_iters, cfg.rel_tol, start, cfg.pi_mode)
    diag = FitDiagnostics(lls, best, trace, converged, flags)
    if not diag.is_monotone():
        log.warning("EM log-likelihood trace decreased")
    return FitResult(model, model.pi, diag)


# ---------------------------------------------------------------------------
# label alignment
# ---------------------------------------------------------------------------


def align_states(fitted: SeasonalHMM, reference: SeasonalHMM):
    """Global relabelling of ``fitted`` closest to ``reference``.

    Returns ``(perm, distance)``: ``fitted.permuted(perm)`` puts fitted state
    ``perm[k]`` in position ``k``; ``distance`` is the summed L2 distance
    between per-state emission parameter vectors.
    """
    if fitted.dims != reference.dims:
        raise ValueError("models must share dims")
    K = fitted.K
    A = [fitted.emissions.param_vector(k) for k in range(K)]
    B = [reference.emissions.param_vector(k) for k in range(K)]
    cost = np.array([[np.linalg.norm(a - b) for b in B] for a in A])  # cost[fitted, reference]
    best, best_d = None, np.inf
    for perm in itertools.permutations(range(K)):
        dist = sum(cost[perm[k], k] for k in range(K))
        if dist < best_d - 1e-15:
            best, best_d = perm, dist
    return np.array(best), float(best_d)
