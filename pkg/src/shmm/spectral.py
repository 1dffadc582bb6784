"""Moment-based recovery of seasonal HMM parameters.

For a feature map ``phi = (phi_1, ..., phi_N)`` and a centre phase ``t``
the low-order moments of three consecutive observations factor through the
feature matrices ``O_t[a, k] = E[phi_a(Y_t) | X_t = k]``::

    L(t)        = O_t pi(t)
    N(t)        = O_t diag(pi(t)) Q(t) O_{t+1}^T
    P(t)        = O_{t-1} diag(pi(t-1)) Q(t-1) Q(t) O_{t+1}^T
    M_t(., b, .) = O_{t-1} diag(pi(t-1)) Q(t-1) diag(O_t[b, :]) Q(t) O_{t+1}^T

Projecting ``M_t(., b, .)`` with the rank-K SVD of ``P(t)`` gives matrices
``B(b)`` that are simultaneously diagonalized by one matrix ``R``; their
eigenvalues are the rows of ``O_t``.  Everything is recovered up to a
permutation of the states at each phase.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from shmm.core import SeasonalHMM, phase_marginals, phase_of, stationary_distribution

log = logging.getLogger(__name__)


class RankError(np.linalg.LinAlgError):
    """A moment matrix has numerical rank below K."""


class DegeneracyError(np.linalg.LinAlgError):
    """No random contraction separated the eigenvalues of B."""


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """Finite family of test functions.

    ``kind`` is one of ``"exponential"`` (``exp(-s_a y)`` for a grid of
    ``s_a``), ``"histogram"`` (indicators of the bins cut by ``params``,
    including the two unbounded end bins) or ``"clipped_power"``
    (``clip(y, -c, c) ** a`` for a = 1..N with ``c = params[0]``).
    """

    kind: str
    params: np.ndarray
    n_powers: int = 0

    @classmethod
    def exponential(cls, N: int, s_min: float = 0.25, s_max: float = 4.0) -> "FeatureMap":
        grid = np.geomspace(s_min, s_max, N) if N > 1 else np.array([1.0])
        return cls("exponential", grid)

    @classmethod
    def histogram(cls, edges) -> "FeatureMap":
        edges = np.unique(np.asarray(edges, dtype=float))
        return cls("histogram", edges)

    @classmethod
    def histogram_from_data(cls, y, N: int) -> "FeatureMap":
        """``N`` bins cut at empirical quantiles (fewer when quantiles tie)."""
        qs = np.quantile(np.asarray(y, dtype=float), np.linspace(0, 1, N + 1)[1:-1])
        return cls.histogram(qs)

    @classmethod
    def clipped_power(cls, N: int, clip: float) -> "FeatureMap":
        return cls("clipped_power", np.array([float(clip)]), N)

    @property
    def N(self) -> int:
        if self.kind == "exponential":
            return self.params.size
        if self.kind == "histogram":
            return self.params.size + 1
        return self.n_powers

    def evaluate(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.kind == "exponential":
            return np.exp(-np.outer(y, self.params))
        if self.kind == "histogram":
            idx = np.searchsorted(self.params, y, side="left")
            out = np.zeros((y.size, self.N))
            out[np.arange(y.size), idx] = 1.0
            return out
        if self.kind == "clipped_power":
            c = np.clip(y, -self.params[0], self.params[0])
            return c[:, None] ** np.arange(1, self.n_powers + 1)[None]
        raise ValueError(f"unknown feature kind {self.kind!r}")


def default_features(model: SeasonalHMM, N: Optional[int] = None, n: int = 5000, seed: int = 0) -> FeatureMap:
    """``N`` (default ``2K``) histogram bins cut at quantiles of a simulated sample of length ``n``."""
    from shmm.sim import simulate

    return FeatureMap.histogram_from_data(simulate(model, n, seed, keep_states=False).Y, N or 2 * model.K)


def feature_matrix(emissions, t: int, features: FeatureMap) -> np.ndarray:
    """``O_t[a, k] = E[phi_a(Y_t) | X_t = k]``, shape ``(N, K)``."""
    if features.kind == "exponential":
        return emissions.laplace(features.params, t)
    if features.kind == "histogram":
        F = emissions.cdf(features.params, t)
        K = F.shape[1]
        F = np.vstack([np.zeros((1, K)), F, np.ones((1, K))])
        return np.diff(F, axis=0)
    return emissions.expect(lambda y: features.evaluate(y)[0], t)


@dataclass(frozen=True)
class MomentSet:
    t: int
    L_prev: np.ndarray
    L: np.ndarray
    L_next: np.ndarray
    N: np.ndarray
    P: np.ndarray
    M: np.ndarray
    n_windows: Optional[int] = None


def population_moments(model: SeasonalHMM, t: int, features: FeatureMap) -> MomentSet:
    """Exact moments at centre phase ``t`` under the periodic stationary law."""
    T = model.T
    tp, tc, tn = (int(phase_of(s, T)) for s in (t - 1, t, t + 1))
    pis = phase_marginals(model.transition, stationary_distribution(model.transition))
    Qs = model.transition.matrices()
    Op, Oc, On = (feature_matrix(model.emissions, s, features) for s in (tp, tc, tn))
    Dp = np.diag(pis[tp - 1])
    Qp, Qc = Qs[tp - 1], Qs[tc - 1]
    Nmat = Oc @ np.diag(pis[tc - 1]) @ Qc @ On.T
    P = Op @ Dp @ Qp @ Qc @ On.T
    M = np.einsum("ai,ij,bj,jl,cl->abc", Op @ Dp, Qp, Oc, Qc, On)
    return MomentSet(tc, Op @ pis[tp - 1], Oc @ pis[tc - 1], On @ pis[tn - 1], Nmat, P, M)


def windows_at_phase(y, t: int, T: int, start: int = 1) -> np.ndarray:
    """All complete windows ``(y_{s-1}, y_s, y_{s+1})`` with ``s`` at phase ``t``.

    ``start`` is the phase of ``y[0]``.
    """
    y = np.asarray(y, dtype=float)
    ph = phase_of(np.arange(y.size) + start, T)
    centres = np.flatnonzero(ph == phase_of(t, T))
    centres = centres[(centres >= 1) & (centres <= y.size - 2)]
    return np.stack([y[centres - 1], y[centres], y[centres + 1]], axis=1)


def empirical_moments(windows, features: FeatureMap, t: int, K: int = 1) -> MomentSet:
    """Sample averages of feature products over observation windows."""
    w = np.asarray(windows, dtype=float)
    if w.ndim != 2 or w.shape[1] != 3:
        raise DataError("windows must have shape (n, 3)")
    n = w.shape[0]
    if n < max(K, 1):
        raise DataError(f"need at least {max(K, 1)} windows, got {n}")
    Fp, Fc, Fn = (features.evaluate(w[:, j]) for j in range(3))
    return MomentSet(
        t,
        Fp.mean(axis=0),
        Fc.mean(axis=0),
        Fn.mean(axis=0),
        Fc.T @ Fn / n,
        Fp.T @ Fn / n,
        np.einsum("na,nb,nc->abc", Fp, Fc, Fn) / n,
        n,
    )


@dataclass
class SpectralRecovery:
    t: int
    O: np.ndarray
    pi: np.ndarray
    Q: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def _svd_k(A: np.ndarray, K: int, rank_tol: float, what: str):
    U, s, Vt = np.linalg.svd(A)
    if K > s.size or s[K - 1] <= rank_tol * max(s[0], np.finfo(float).tiny):
        raise RankError(f"{what} has numerical rank < {K} (singular values {s[:K + 1]})")
    return U[:, :K], s, Vt[:K].T


def _inv(A: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise DegeneracyError(f"{what} is singular") from None


def recover(
    ms: MomentSet,
    K: int,
    rng: np.random.Generator,
    O_next: Optional[np.ndarray] = None,
    rank_tol: float = 1e-10,
    sep_tol: float = 1e-6,
    retries: int = 10,
) -> SpectralRecovery:
    """Recover ``O_t`` and ``pi*(t)`` (and ``Q*(t)`` when ``O_{t+1}`` is supplied)."""
    N = ms.L.size
    if K == 1:
        O = ms.L[:, None].copy()
        Q = None if O_next is None else np.ones((1, 1))
        return SpectralRecovery(ms.t, O, np.ones(1), Q, {"separation": np.inf})
    U, sP, V = _svd_k(ms.P, K, rank_tol, "P(t)")
    core_inv = _inv(U.T @ ms.P @ V, "projected P(t)")
    Bs = np.einsum("ij,aj,abc,cl->bil", core_inv, U, ms.M, V)  # B(b) = core_inv U^T M(.,b,.) V

    for attempt in range(retries):
        alpha = rng.standard_normal(N)
        alpha /= np.linalg.norm(alpha)
        B = np.tensordot(alpha, Bs, axes=1)
        lam, R = np.linalg.eig(B)
        radius = np.max(np.abs(lam))
        gaps = np.abs(lam[:, None] - lam[None, :])[~np.eye(K, dtype=bool)]
        sep = gaps.min()
        if sep > sep_tol * radius:
            break
    else:
        raise DegeneracyError(f"eigenvalues of B not separated after {retries} draws (separation {sep:.3g})")

    Rinv = _inv(R, "eigenvector matrix of B")
    O = np.einsum("ij,bjk,ki->bi", Rinv, Bs, R)
    imag = np.max(np.abs(O.imag)) if np.iscomplexobj(O) else 0.0
    if imag > 1e-6 * max(np.max(np.abs(O)), 1e-300):
        log.warning("phase %d: discarding imaginary parts up to %.3g", ms.t, imag)
    O = np.real(O)

    pi = np.linalg.lstsq(O, ms.L, rcond=None)[0]
    pi = pi / pi.sum()

    Q = None if O_next is None else transition_from(ms, O, pi, O_next, rank_tol)
    diag = {"P_singular_values": sP, "separation": float(sep), "radius": float(radius), "attempts": attempt + 1}
    return SpectralRecovery(ms.t, O, pi, Q, diag)


def recover_period(moment_sets: Sequence[MomentSet], K: int, rng: np.random.Generator, **kw) -> list:
    """Recover every phase; ``moment_sets[i]`` must be centred at phase ``i + 1``."""
    first = [recover(ms, K, rng, **kw) for ms in moment_sets]
    T = len(first)
    tol = kw.get("rank_tol", 1e-10)
    out = []
    for i, (ms, r) in enumerate(zip(moment_sets, first)):
        Q = np.ones((1, 1)) if K == 1 else transition_from(ms, r.O, r.pi, first[(i + 1) % T].O, tol)
        out.append(SpectralRecovery(ms.t, r.O, r.pi, Q, r.diagnostics))
    return out


def transition_from(ms: MomentSet, O: np.ndarray, pi: np.ndarray, O_next: np.ndarray,
                    rank_tol: float = 1e-10) -> np.ndarray:
    """``Q*(t)`` from ``N(t)``, ``P(t)`` and recovered ``O_t``, ``pi*(t)``, ``O_{t+1}``.

    Rows follow the column order of ``O``, columns that of ``O_next``; rows
    are normalized to sum to one.
    """
    K = O.shape[1]
    _, _, V = _svd_k(ms.P, K, rank_tol, "P(t)")
    Ut, _, _ = _svd_k(ms.N, K, rank_tol, "N(t)")
    Q = _inv(Ut.T @ O @ np.diag(pi), "projected O_t diag(pi)") @ Ut.T @ ms.N @ V @ _inv(O_next.T @ V, "projected O_{t+1}")
    return Q / Q.sum(axis=1, keepdims=True)


def align_columns(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` such that ``est[:, perm]`` best matches ``ref`` column-wise."""
    cost = ((est[:, :, None] - ref[:, None, :]) ** 2).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(ref.shape[1], dtype=int)
    perm[cols] = rows
    return perm


def recovery_errors(model: SeasonalHMM, recs: Sequence[SpectralRecovery], features: FeatureMap) -> dict:
    """Max-entry errors per phase after per-phase column alignment against the truth."""
    T = model.T
    pis = phase_marginals(model.transition, stationary_distribution(model.transition))
    Qs = model.transition.matrices()
    Os = [feature_matrix(model.emissions, t, features) for t in range(1, T + 1)]
    perms = [align_columns(r.O, Os[i]) for i, r in enumerate(recs)]
    err_O, err_pi, err_Q = [], [], []
    for i, r in enumerate(recs):
        p, pn = perms[i], perms[(i + 1) % T]
        err_O.append(np.max(np.abs(r.O[:, p] - Os[i])))
        err_pi.append(np.max(np.abs(r.pi[p] - pis[i])))
        if r.Q is not None:
            err_Q.append(np.max(np.abs(r.Q[np.ix_(p, pn)] - Qs[i])))
    return {"O": np.array(err_O), "pi": np.array(err_pi), "Q": np.array(err_Q)}


def population_roundtrip(model: SeasonalHMM, features: FeatureMap, rng: np.random.Generator, **kw) -> dict:
    sets = [population_moments(model, t, features) for t in range(1, model.T + 1)]
    return recovery_errors(model, recover_period(sets, model.K, rng, **kw), features)
