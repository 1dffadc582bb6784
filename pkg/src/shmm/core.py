"""Domain types for seasonal hidden Markov models.

A seasonal HMM has a hidden chain whose transition matrix ``Q(t)`` and
emission laws ``nu_{k,t}`` are periodic in ``t`` with period ``T``.  Time is
1-based throughout: ``Q(t)`` moves the chain from ``X_t`` to ``X_{t+1}`` and
observation ``Y_t`` is drawn at phase ``((t - 1) mod T) + 1``.

Transition rows are multinomial logits on a trigonometric basis::

    Q_ij(t) ∝ exp(Z(t) . beta_ij),   Z(t) = (1, cos w t, sin w t, ..., cos d w t, sin d w t)

with ``w = 2 pi / T`` and the last column as the zero-logit reference.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.special import logsumexp

if TYPE_CHECKING:
    from shmm.emissions import EmissionFamily
    from shmm.spectral import FeatureMap

DEFAULT_CHUNK_CAP = 4096


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced non-finite output."""


class ChunkSizeError(ValueError):
    """The chunked HMM would have more than the configured number of states."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


def phase_of(t, T: int):
    """Map 1-based times onto 1..T."""
    return (np.asarray(t) - 1) % T + 1


def trig_design(t, T: int, d: int, constant: bool = True) -> np.ndarray:
    """Trigonometric regressors at times ``t``.

    Returns an array of shape ``(len(t), 2d + 1)`` ordered
    ``(1, cos 1, sin 1, ..., cos d, sin d)``; the leading column is dropped
    when ``constant`` is False.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    cols = [np.ones_like(t)] if constant else []
    for ell in range(1, d + 1):
        ang = 2.0 * np.pi * ell * t / T
        cols.append(np.cos(ang))
        cols.append(np.sin(ang))
    if not cols:
        return np.zeros((t.size, 0))
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class ModelDims:
    K: int
    T: int
    d: int = 0

    def __post_init__(self):
        if self.K < 1 or self.T < 1 or self.d < 0:
            raise ValueError(f"invalid dims K={self.K}, T={self.T}, d={self.d}")

    @property
    def n_coef(self) -> int:
        return 2 * self.d + 1

    @property
    def beta_identifiable(self) -> bool:
        # a degree-d trigonometric polynomial has at most 2d zeros per period
        return self.T > 2 * self.d


@dataclass(frozen=True)
class PeriodicLogitTransition:
    """Coefficient tensor ``beta[i, j, c]`` of shape ``(K, K-1, 2d+1)``."""

    dims: ModelDims
    beta: np.ndarray
    _log_q: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K, d = self.dims.K, self.dims.d
        beta = _frozen(self.beta)
        if beta.shape != (K, K - 1, 2 * d + 1):
            raise ValueError(f"beta must have shape {(K, K - 1, 2 * d + 1)}, got {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta has non-finite entries")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "_log_q", _frozen(log_transition_tensor(beta, self.dims.T)))

    @classmethod
    def zeros(cls, dims: ModelDims) -> "PeriodicLogitTransition":
        return cls(dims, np.zeros((dims.K, dims.K - 1, dims.n_coef)))

    def matrix(self, t: int) -> np.ndarray:
        """Transition matrix ``Q(t)``; ``t`` is reduced modulo ``T``."""
        return np.exp(self._log_q[int(phase_of(t, self.dims.T)) - 1])

    def log_matrices(self) -> np.ndarray:
        """``log Q(t)`` for t = 1..T, shape ``(T, K, K)``."""
        return self._log_q

    def matrices(self) -> np.ndarray:
        return np.exp(self._log_q)

    def permuted(self, perm) -> "PeriodicLogitTransition":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        K = self.dims.K
        full = np.concatenate([self.beta, np.zeros((K, 1, self.dims.n_coef))], axis=1)
        full = full[perm][:, perm]
        new = full[:, :-1] - full[:, -1:]
        return PeriodicLogitTransition(self.dims, new)


def log_transition_tensor(beta: np.ndarray, T: int) -> np.ndarray:
    K = beta.shape[0]
    d = (beta.shape[2] - 1) // 2
    Z = trig_design(np.arange(1, T + 1), T, d)
    logits = np.zeros((T, K, K))
    if K > 1:
        logits[:, :, :-1] = np.einsum("tc,ijc->tij", Z, beta)
    return logits - logsumexp(logits, axis=2, keepdims=True)


def transition_matrix(tr: PeriodicLogitTransition, t: int) -> np.ndarray:
    return tr.matrix(t)


def period_product(tr: PeriodicLogitTransition) -> np.ndarray:
    """``Q(1) Q(2) ... Q(T)``."""
    P = np.eye(tr.dims.K)
    for Qt in tr.matrices():
        P = P @ Qt
    return P


def stationary_distribution(
    tr: PeriodicLogitTransition,
    method: str = "solve",
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Stationary law of the over-period product ``Q(1)...Q(T)``.

    ``method="solve"`` solves the linear system and polishes with a few
    power steps; ``method="power"`` runs plain power iteration.
    """
    P = period_product(tr)
    K = P.shape[0]
    if method == "solve":
        A = np.vstack([P.T - np.eye(K), np.ones((1, K))])
        b = np.zeros(K + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
        n_polish = 3
    elif method == "power":
        pi = np.full(K, 1.0 / K)
        n_polish = max_iter
    else:
        raise ValueError(f"unknown method {method!r}")
    for _ in range(n_polish):
        nxt = pi @ P
        nxt /= nxt.sum()
        done = np.max(np.abs(nxt - pi)) < tol
        pi = nxt
        if done and method == "power":
            break
    resid = np.max(np.abs(pi @ P - pi))
    if not np.isfinite(resid) or resid > 1e-10:
        raise NumericalError(f"stationary distribution did not converge (residual {resid:.3g})")
    return pi


def phase_marginals(tr: PeriodicLogitTransition, pi: Optional[np.ndarray] = None) -> np.ndarray:
    """Law of ``X_t`` for t = 1..T, shape ``(T, K)``.

    Starts from ``pi`` (default: the stationary distribution, in which case
    the rows are the periodic marginals ``pi*(t)``).
    """
    if pi is None:
        pi = stationary_distribution(tr)
    Qs = tr.matrices()
    out = np.empty((tr.dims.T, tr.dims.K))
    cur = np.asarray(pi, dtype=float)
    for t in range(tr.dims.T):
        out[t] = cur
        cur = cur @ Qs[t]
    return out


def beta_from_transitions(Qs: np.ndarray, d: int) -> np.ndarray:
    """Least-squares inverse of the logit map.

    ``log(Q_ij(t) / Q_iK(t))`` is linear in ``Z(t)``; regressing it on the
    trigonometric basis recovers ``beta`` exactly when ``T > 2d``.
    """
    T, K, _ = Qs.shape
    if T <= 2 * d:
        raise ValueError(f"beta is not identifiable from {T} matrices with degree {d}")
    Z = trig_design(np.arange(1, T + 1), T, d)
    logit = np.log(Qs[:, :, :-1]) - np.log(Qs[:, :, -1:])
    coef, *_ = np.linalg.lstsq(Z, logit.reshape(T, -1), rcond=None)
    return coef.T.reshape(K, K - 1, 2 * d + 1)


@dataclass(frozen=True)
class SeasonalHMM:
    dims: ModelDims
    transition: PeriodicLogitTransition
    emissions: "EmissionFamily"
    pi: np.ndarray

    def __post_init__(self):
        pi = _frozen(self.pi)
        if pi.shape != (self.dims.K,):
            raise ValueError(f"pi must have length {self.dims.K}")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("pi must be a probability vector")
        if self.transition.dims != self.dims:
            raise ValueError("transition dims do not match model dims")
        if self.emissions.states != self.dims.K or self.emissions.period != self.dims.T:
            raise ValueError("emission family does not match (K, T)")
        object.__setattr__(self, "pi", pi)

    @property
    def K(self) -> int:
        return self.dims.K

    @property
    def T(self) -> int:
        return self.dims.T

    def replace(self, **changes) -> "SeasonalHMM":
        kw = dict(dims=self.dims, transition=self.transition, emissions=self.emissions, pi=self.pi)
        kw.update(changes)
        return SeasonalHMM(**kw)

    def permuted(self, perm) -> "SeasonalHMM":
        perm = np.asarray(perm)
        return SeasonalHMM(
            self.dims,
            self.transition.permuted(perm),
            self.emissions.permuted(perm),
            self.pi[perm],
        )


def stationary_model(model: SeasonalHMM) -> SeasonalHMM:
    """The same model started from its periodic stationary law."""
    return model.replace(pi=stationary_distribution(model.transition))


@dataclass(frozen=True)
class ChunkedHMM:
    """Homogeneous HMM on period blocks ``U_j = (X_{jT+1}, ..., X_{jT+T})``."""

    model: SeasonalHMM
    states: np.ndarray
    transition: np.ndarray

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    def initial_distribution(self, pi=None) -> np.ndarray:
        """Law of ``U_0`` when ``X_1 ~ pi``."""
        pi = self.model.pi if pi is None else np.asarray(pi, dtype=float)
        Qs = self.model.transition.matrices()
        u = self.states
        out = pi[u[:, 0]].copy()
        for s in range(u.shape[1] - 1):
            out *= Qs[s, u[:, s], u[:, s + 1]]
        return out

    def block_log_density(self, w) -> np.ndarray:
        """``log g(w | u) = sum_t log f_{u_t, t}(w_t)`` for every block state ``u``."""
        w = np.asarray(w, dtype=float)
        T = self.model.T
        le = self.model.emissions.log_density_matrix(w, np.arange(1, T + 1))
        return le[np.arange(T)[None, :], self.states].sum(axis=1)

    def log_likelihood(self, obs, pi=None) -> float:
        """Scaled forward pass over whole blocks; ``len(obs)`` must be a multiple of ``T``."""
        obs = np.asarray(obs, dtype=float)
        T = self.model.T
        if obs.size == 0 or obs.size % T:
            raise ValueError("chunked likelihood needs a whole number of periods")
        blocks = obs.reshape(-1, T)
        total = 0.0
        alpha = self.initial_distribution(pi)
        for j, w in enumerate(blocks):
            if j:
                alpha = alpha @ self.transition
            lg = self.block_log_density(w)
            m = lg.max()
            alpha = alpha * np.exp(lg - m)
            c = alpha.sum()
            total += np.log(c) + m
            alpha /= c
        return float(total)


def chunk(model: SeasonalHMM, cap: int = DEFAULT_CHUNK_CAP) -> ChunkedHMM:
    K, T = model.K, model.T
    size = K**T
    if size > cap:
        raise ChunkSizeError(f"chunked HMM needs K^T = {K}^{T} = {size} states (cap {cap})")
    states = np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(size, T)
    Qs = model.transition.matrices()
    # Q~_uv = Q_{u_T v_1}(T) Q_{v_1 v_2}(1) ... Q_{v_{T-1} v_T}(T-1)
    into = np.ones(size)
    for s in range(T - 1):
        into *= Qs[s, states[:, s], states[:, s + 1]]
    Qt = Qs[T - 1][states[:, -1][:, None], states[:, 0][None, :]] * into[None, :]
    return ChunkedHMM(model=model, states=states, transition=Qt)


@dataclass
class AssumptionReport:
    det: np.ndarray
    singular: np.ndarray
    irreducible: bool
    alpha: float
    spectral_gap: float
    ergodic: bool
    beta_identifiable: bool
    emission_sigma_min: Optional[np.ndarray] = None
    messages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.messages

    def to_dict(self) -> dict:
        return {
            "det": self.det.tolist(),
            "singular": self.singular.tolist(),
            "irreducible": self.irreducible,
            "alpha": self.alpha,
            "spectral_gap": self.spectral_gap,
            "ergodic": self.ergodic,
            "beta_identifiable": self.beta_identifiable,
            "emission_sigma_min": None if self.emission_sigma_min is None else self.emission_sigma_min.tolist(),
            "messages": list(self.messages),
        }


def check_assumptions(
    model: SeasonalHMM,
    tol: float = 1e-8,
    features: Optional["FeatureMap"] = None,
    emission_tol: float = 1e-8,
) -> AssumptionReport:
    """Numerically screen a concrete parameter for the identifiability assumptions.

    Flags ``Q(t)`` as singular when ``|det Q(t)| < tol * s_max(Q(t))^K``.
    The emission check uses the smallest singular value of the feature
    matrix ``O_t`` (default: exponential-moment features, ``N = 2K``).
    Never modifies the model.
    """
    from shmm.spectral import FeatureMap, feature_matrix

    K, T = model.K, model.T
    Qs = model.transition.matrices()
    det = np.array([np.linalg.det(Q) for Q in Qs])
    smax = np.array([np.linalg.svd(Q, compute_uv=False)[0] for Q in Qs])
    singular = np.abs(det) < tol * smax**K
    alpha = float(Qs.min())
    irreducible = bool(alpha > 0)
    ev = np.sort(np.abs(np.linalg.eigvals(period_product(model.transition))))[::-1]
    gap = float(1.0 - ev[1]) if K > 1 else 1.0
    ergodic = gap > 1e-12
    features = features if features is not None else FeatureMap.exponential(2 * K)
    sig = np.array(
        [np.linalg.svd(feature_matrix(model.emissions, t, features), compute_uv=False)[K - 1] for t in range(1, T + 1)]
    )

    msgs = []
    if singular.any():
        bad = np.flatnonzero(singular) + 1
        msgs.append(f"Q(t) numerically singular at t = {bad[:10].tolist()}{' ...' if bad.size > 10 else ''}")
    if not irreducible:
        msgs.append("some transition probabilities are zero")
    if not ergodic:
        msgs.append("period product is not ergodic")
    if not model.dims.beta_identifiable:
        msgs.append(f"T = {T} <= 2d = {2 * model.dims.d}: beta not identifiable")
    if np.any(sig < emission_tol):
        bad = np.flatnonzero(sig < emission_tol) + 1
        msgs.append(f"emission laws nearly linearly dependent at t = {bad[:10].tolist()}")
    return AssumptionReport(det, singular, irreducible, alpha, gap, ergodic, model.dims.beta_identifiable, sig, msgs)
