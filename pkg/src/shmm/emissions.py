"""Periodic emission families.

Every family exposes the same vectorized surface used by inference,
simulation and the moment machinery:

* ``log_density_matrix(y, t)`` -> ``(n, K)`` log-densities at phases ``t``
* ``sample_path(states, t, rng)`` -> one draw per (state, phase) pair
* ``weighted_mstep(y, t, weights)`` -> :class:`MStepResult`
* ``laplace(s, t)``, ``cdf(x, t)``, ``expect(func, t)`` -> ``(N, K)`` feature integrals

States are 0-based.  Phases are 1-based and reduced modulo the period.
Densities are taken with respect to Lebesgue measure, or ``delta_0 + Lebesgue``
for the zero-inflated family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, ClassVar, Optional

import numpy as np
from scipy import integrate
from scipy.special import logsumexp, ndtr

from shmm.core import _frozen, phase_of, trig_design

LOG_2PI = np.log(2.0 * np.pi)
DEGENERATE_WEIGHT = 1e-10
MSTEP_SLACK = 1e-9


class DomainError(ValueError):
    """An observation lies outside the support of the emission family."""


@dataclass
class MStepResult:
    family: "EmissionFamily"
    before: np.ndarray
    after: np.ndarray
    flags: list = field(default_factory=list)


def _weighted_ll(le: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-state ``sum_i w_ik log f_k(y_i)`` with ``0 * -inf = 0``."""
    with np.errstate(invalid="ignore"):
        prod = np.where(w > 0, w * le, 0.0)
    return prod.sum(axis=0)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _check_simplex(p: np.ndarray, name: str = "weights"):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError(f"{name} rows must be probability vectors")


def _normalize_rows(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def _sample_components(p_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(p_rows.shape[0])
    cum = np.cumsum(p_rows, axis=1)
    return np.minimum((u[:, None] > cum).sum(axis=1), p_rows.shape[1] - 1)


class EmissionFamily:
    """Base class; concrete families are frozen dataclasses."""

    tag: ClassVar[str] = ""
    states: int
    period: int

    # -- densities -------------------------------------------------------
    def log_density_matrix(self, y, t) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, k: int, t: int, y: float) -> float:
        return float(self.log_density_matrix(np.array([y]), np.array([t]))[0, k])

    def _phases(self, t, n: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t), (n,))
        return phase_of(t, self.period)

    # -- sampling --------------------------------------------------------
    def sample_path(self, states, t, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample(self, k: int, t: int, rng: np.random.Generator) -> float:
        return float(self.sample_path(np.array([k]), np.array([t]), rng)[0])

    # -- estimation ------------------------------------------------------
    def weighted_loglik(self, y, t, weights) -> np.ndarray:
        return _weighted_ll(self.log_density_matrix(y, t), np.asarray(weights))

    def weighted_mstep(self, y, t, weights) -> MStepResult:
        raise NotImplementedError

    def _guarded(self, new: "EmissionFamily", y, t, w, flags) -> MStepResult:
        """Keep, state by state, whichever parameters give the larger weighted log-likelihood."""
        before = self.weighted_loglik(y, t, w)
        after = new.weighted_loglik(y, t, w)
        worse = ~(after >= before - MSTEP_SLACK * np.maximum(1.0, np.abs(before)))
        if np.any(worse):
            keep = np.flatnonzero(worse)
            flags.extend(f"state {k}: emission update rejected (no improvement)" for k in keep)
            new = new.with_states_from(self, keep)
            after = new.weighted_loglik(y, t, w)
        return MStepResult(new, before, after, flags)

    # -- structure -------------------------------------------------------
    def permuted(self, perm) -> "EmissionFamily":
        raise NotImplementedError

    def with_states_from(self, other: "EmissionFamily", ks) -> "EmissionFamily":
        """Copy of ``self`` with the parameters of states ``ks`` taken from ``other``."""
        raise NotImplementedError

    def param_vector(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def params_dict(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"family": self.tag, "states": self.states, "period": self.period, **self.params_dict()}

    def mean(self, t) -> np.ndarray:
        """Conditional means ``E[Y_t | X_t = k]``, shape ``(len(t), K)``."""
        raise NotImplementedError

    # -- feature integrals -----------------------------------------------
    def laplace(self, s, t: int) -> np.ndarray:
        """``E[exp(-s Y_t) | X_t = k]`` for each ``s``; shape ``(len(s), K)``."""
        raise NotImplementedError

    def cdf(self, x, t: int) -> np.ndarray:
        raise NotImplementedError

    support: ClassVar[tuple] = (-np.inf, np.inf)

    def _atoms(self, k: int, t: int) -> list:
        return []

    def _continuous_pdf(self, y, k: int, t: int) -> np.ndarray:
        raise NotImplementedError

    def expect(self, func: Callable, t: int, tol: float = 1e-10) -> np.ndarray:
        """``E[func(Y_t) | X_t = k]`` by adaptive quadrature; ``func`` maps a scalar to a length-N vector."""
        cols = []
        lo, hi = self.support
        for k in range(self.states):
            val, err = integrate.quad_vec(
                lambda y: np.asarray(func(y), dtype=float) * self._continuous_pdf(y, k, t),
                lo, hi, epsabs=tol, epsrel=tol, limit=500,
            )
            if not np.all(np.isfinite(val)):
                raise FloatingPointError(f"feature integral is not finite for state {k}")
            for y0, mass in self._atoms(k, t):
                val = val + mass * np.asarray(func(y0), dtype=float)
            cols.append(val)
        return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Gaussian mixture with periodic mean
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPeriodicMean(EmissionFamily):
    """Per-state Gaussian mixture whose mean carries a trigonometric seasonal term.

    Component ``m`` of state ``k`` at phase ``t`` is
    ``N(mu[k, m] + Z(t) . delta[k], var[k, m])`` where ``Z(t)`` holds the
    cos/sin terms up to ``degree`` (no constant).
    """

    tag: ClassVar[str] = "gaussian_periodic_mean"

    period: int
    weights: np.ndarray
    means: np.ndarray
    delta: np.ndarray
    variances: np.ndarray
    var_floor: float = 1e-6

    def __post_init__(self):
        for name in ("weights", "means", "delta", "variances"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        K, M = self.weights.shape
        if self.means.shape != (K, M) or self.variances.shape != (K, M):
            raise ValueError("weights, means and variances must share shape (K, M)")
        if self.delta.shape[0] != K or self.delta.shape[1] % 2:
            raise ValueError("delta must have shape (K, 2 * degree)")
        _check_simplex(self.weights)
        if np.any(self.variances < self.var_floor):
            raise ValueError(f"variances must be >= {self.var_floor}")

    @property
    def states(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> int:
        return self.delta.shape[1] // 2

    def seasonal_mean(self, t) -> np.ndarray:
        """``Z(t) . delta[k]``, shape ``(len(t), K)``."""
        Z = trig_design(np.atleast_1d(t), self.period, self.degree, constant=False)
        return Z @ self.delta.T

    def _component_means(self, t) -> np.ndarray:
        return self.means[None, :, :] + self.seasonal_mean(t)[:, :, None]

    def log_density_matrix(self, y, t) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        mu = self._component_means(self._phases(t, y.size))
        var = self.variances[None]
        lc = _log(self.weights)[None] - 0.5 * (LOG_2PI + np.log(var)) - 0.5 * (y[:, None, None] - mu) ** 2 / var
        return logsumexp(lc, axis=2)

    def sample_path(self, states, t, rng):
        states = np.asarray(states)
        t = self._phases(t, states.size)
        comp = _sample_components(self.weights[states], rng)
        z = rng.standard_normal(states.size)
        mu = self.means[states, comp] + np.einsum("ic,ic->i", trig_design(t, self.period, self.degree, False), self.delta[states])
        return mu + np.sqrt(self.variances[states, comp]) * z

    def mean(self, t):
        t = np.atleast_1d(t)
        return (self.weights * self.means).sum(axis=1)[None] + self.seasonal_mean(t)

    def weighted_mstep(self, y, t, weights) -> MStepResult:
        y = np.asarray(y, dtype=float)
        W = np.asarray(weights, dtype=float)
        t = self._phases(t, y.size)
        K, M = self.weights.shape
        Z = trig_design(t, self.period, self.degree, constant=False)
        p, mu, dl, var = (np.array(a) for a in (self.weights, self.means, self.delta, self.variances))
        flags = []
        mus = self._component_means(t)
        for k in range(K):
            wk = W[:, k]
            tot = wk.sum()
            if tot < DEGENERATE_WEIGHT:
                flags.append(f"state {k}: degenerate weight {tot:.3g}, left unchanged")
                continue
            lc = _log(p[k])[None] - 0.5 * np.log(var[k])[None] - 0.5 * (y[:, None] - mus[:, k]) ** 2 / var[k][None]
            r = wk[:, None] * np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
            rs = r.sum(axis=0)
            p[k] = rs / tot
            live = np.flatnonzero(rs > DEGENERATE_WEIGHT)
            # weighted least squares over (component intercepts, shared seasonal terms)
            om = r[:, live] / var[k, live][None]
            ncomp, nz = live.size, Z.shape[1]
            A = np.zeros((ncomp + nz, ncomp + nz))
            b = np.zeros(ncomp + nz)
            A[np.arange(ncomp), np.arange(ncomp)] = om.sum(axis=0)
            b[:ncomp] = om.T @ y
            if nz:
                zo = Z.T @ om  # (nz, ncomp)
                A[:ncomp, ncomp:] = zo.T
                A[ncomp:, :ncomp] = zo
                osum = om.sum(axis=1)
                A[ncomp:, ncomp:] = (Z * osum[:, None]).T @ Z
                b[ncomp:] = Z.T @ (osum * y)
            sol = np.linalg.lstsq(A, b, rcond=None)[0]
            mu[k, live] = sol[:ncomp]
            if nz:
                dl[k] = sol[ncomp:]
            resid = y[:, None] - mu[k, live][None] - (Z @ dl[k])[:, None]
            var[k, live] = np.maximum((r[:, live] * resid**2).sum(axis=0) / rs[live], self.var_floor)
            order = np.argsort(var[k], kind="stable")
            p[k], mu[k], var[k] = p[k, order], mu[k, order], var[k, order]
        p = _normalize_rows(p)
        new = GaussianPeriodicMean(self.period, p, mu, dl, var, self.var_floor)
        return self._guarded(new, y, t, W, flags)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return GaussianPeriodicMean(self.period, self.weights[perm], self.means[perm], self.delta[perm], self.variances[perm], self.var_floor)

    def with_states_from(self, other, ks):
        arrs = [np.array(a) for a in (self.weights, self.means, self.delta, self.variances)]
        for a, b in zip(arrs, (other.weights, other.means, other.delta, other.variances)):
            a[ks] = b[ks]
        return GaussianPeriodicMean(self.period, *arrs, self.var_floor)

    def param_vector(self, k):
        return np.concatenate([self.weights[k], self.means[k], self.delta[k], self.variances[k]])

    def params_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "delta": self.delta.tolist(),
            "variances": self.variances.tolist(),
            "var_floor": self.var_floor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["period"], d["weights"], d["means"], np.array(d["delta"], dtype=float).reshape(len(d["weights"]), -1), d["variances"], d.get("var_floor", 1e-6))

    @classmethod
    def random_init(cls, K, T, y, t, rng, M=1, degree=0, var_floor=1e-6, **_):
        y = np.asarray(y, dtype=float)
        means = np.quantile(y, rng.uniform(0.05, 0.95, size=(K, M)))
        variances = np.maximum(np.var(y) * rng.uniform(0.25, 1.0, size=(K, M)), var_floor)
        weights = rng.dirichlet(np.ones(M), size=K)
        order = np.argsort(variances, axis=1)
        take = lambda a: np.take_along_axis(a, order, axis=1)
        return cls(T, take(weights), take(means), np.zeros((K, 2 * degree)), take(variances), var_floor)

    # feature integrals
    def laplace(self, s, t):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        mu = self._component_means([t])[0]  # (K, M)
        val = np.exp(-s[:, None, None] * mu[None] + 0.5 * s[:, None, None] ** 2 * self.variances[None])
        return (self.weights[None] * val).sum(axis=2)

    def cdf(self, x, t):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mu = self._component_means([t])[0]
        z = (x[:, None, None] - mu[None]) / np.sqrt(self.variances)[None]
        return (self.weights[None] * ndtr(z)).sum(axis=2)

    def _continuous_pdf(self, y, k, t):
        return float(np.exp(self.log_density_matrix(np.array([y]), np.array([t]))[0, k]))


# ---------------------------------------------------------------------------
# Exponential mixture with periodic scaling
# ---------------------------------------------------------------------------


def scale_objective(delta, A, B, Z) -> float:
    """``sum_t -A_t log s_t - B_t / s_t`` with ``s_t = 1 + Z_t . delta``.

    ``A_t`` aggregates state weights and ``B_t`` aggregates
    ``y * sum_m r_m lambda_m`` over observations at phase ``t``.
    """
    s = 1.0 + Z @ delta
    if np.any(s <= 0):
        return -np.inf
    return float(np.sum(-A * np.log(s) - B / s))


def scale_gradient(delta, A, B, Z) -> np.ndarray:
    s = 1.0 + Z @ delta
    return Z.T @ (-A / s + B / s**2)


def _scale_hessian(delta, A, B, Z) -> np.ndarray:
    s = 1.0 + Z @ delta
    return (Z * (A / s**2 - 2.0 * B / s**3)[:, None]).T @ Z


def _ascend_scale(delta, A, B, Z, floor, max_iter=50, gtol=1e-9):
    """Bounded Newton/gradient ascent on the scale objective keeping ``1 + sigma(t) >= floor``."""
    f = scale_objective(delta, A, B, Z)
    for _ in range(max_iter):
        g = scale_gradient(delta, A, B, Z)
        if np.max(np.abs(g)) < gtol * max(1.0, A.sum()):
            break
        H = _scale_hessian(delta, A, B, Z)
        direction = g
        try:
            if np.all(np.linalg.eigvalsh(H) < 0):
                direction = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            pass
        step = 1.0 if direction is not g else 1.0 / max(1.0, np.abs(Z @ g).max() * 4.0)
        moved = False
        for _ in range(60):
            cand = delta + step * direction
            if np.min(1.0 + Z @ cand) >= floor:
                fc = scale_objective(cand, A, B, Z)
                if fc > f + 1e-4 * step * (g @ direction):
                    delta, f, moved = cand, fc, True
                    break
            step *= 0.5
        if not moved:
            break
    return delta, f


@dataclass(frozen=True)
class ExpPeriodicScale(EmissionFamily):
    """Exponential mixture with a periodic scale ``1 + sigma_k(t)``.

    ``f_{k,t}(y) = sum_m p[k,m] r exp(-r y)`` with ``r = rates[k,m] / (1 + sigma_k(t))``
    and ``sigma_k(t) = Z(t) . delta[k]`` a trigonometric polynomial without
    constant term.
    """

    tag: ClassVar[str] = "exp_periodic_scale"
    support: ClassVar[tuple] = (0.0, np.inf)

    period: int
    weights: np.ndarray
    rates: np.ndarray
    delta: np.ndarray
    scale_floor: float = 1e-3
    inner_rounds: int = 5

    def __post_init__(self):
        for name in ("weights", "rates", "delta"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        K, M = self.weights.shape
        if self.rates.shape != (K, M):
            raise ValueError("weights and rates must share shape (K, M)")
        if self.delta.shape[0] != K or self.delta.shape[1] % 2:
            raise ValueError("delta must have shape (K, 2 * degree)")
        _check_simplex(self.weights)
        if np.any(self.rates <= 0):
            raise ValueError("rates must be positive")
        if np.any(self.scale(np.arange(1, self.period + 1)) < self.scale_floor):
            raise ValueError(f"1 + sigma_k(t) must stay >= {self.scale_floor}")

    @property
    def states(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> int:
        return self.delta.shape[1] // 2

    def scale(self, t) -> np.ndarray:
        """``1 + sigma_k(t)``, shape ``(len(t), K)``."""
        Z = trig_design(np.atleast_1d(t), self.period, self.degree, constant=False)
        return 1.0 + Z @ self.delta.T

    def log_density_matrix(self, y, t):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise DomainError(f"observation {y[(y < 0) | ~np.isfinite(y)][0]} outside [0, inf)")
        s = self.scale(self._phases(t, y.size))[:, :, None]
        r = self.rates[None] / s
        lc = _log(self.weights)[None] + np.log(r) - r * y[:, None, None]
        return logsumexp(lc, axis=2)

    def sample_path(self, states, t, rng):
        states = np.asarray(states)
        t = self._phases(t, states.size)
        comp = _sample_components(self.weights[states], rng)
        e = rng.standard_exponential(states.size)
        s = self.scale(t)[np.arange(states.size), states]
        return e * s / self.rates[states, comp]

    def mean(self, t):
        return (self.weights / self.rates).sum(axis=1)[None] * self.scale(t)

    def weighted_mstep(self, y, t, weights):
        y = np.asarray(y, dtype=float)
        W = np.asarray(weights, dtype=float)
        t = self._phases(t, y.size)
        T = self.period
        K, M = self.weights.shape
        Zp = trig_design(np.arange(1, T + 1), T, self.degree, constant=False)
        p, lam, dl = (np.array(a) for a in (self.weights, self.rates, self.delta))
        flags = []
        s_all = self.scale(t)
        for k in range(K):
            wk = W[:, k]
            tot = wk.sum()
            if tot < DEGENERATE_WEIGHT:
                flags.append(f"state {k}: degenerate weight {tot:.3g}, left unchanged")
                continue
            sk = s_all[:, k]
            rk = lam[k][None] / sk[:, None]
            lc = _log(p[k])[None] + np.log(rk) - rk * y[:, None]
            r = wk[:, None] * np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
            rs = r.sum(axis=0)
            p[k] = rs / tot
            live = rs > DEGENERATE_WEIGHT
            A = np.bincount(t - 1, weights=wk, minlength=T)
            for _ in range(self.inner_rounds):
                denom = (r * (y / sk)[:, None]).sum(axis=0)
                ok = live & (denom > 0)
                lam[k, ok] = rs[ok] / denom[ok]
                if self.degree == 0:
                    break
                B = np.bincount(t - 1, weights=y * (r[:, ok] @ lam[k, ok]), minlength=T)
                dl[k], _ = _ascend_scale(dl[k], A, B, Zp, self.scale_floor)
                sk = 1.0 + trig_design(t, T, self.degree, constant=False) @ dl[k]
            order = np.argsort(lam[k], kind="stable")
            p[k], lam[k] = p[k, order], lam[k, order]
        new = ExpPeriodicScale(T, _normalize_rows(p), lam, dl, self.scale_floor, self.inner_rounds)
        return self._guarded(new, y, t, W, flags)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return ExpPeriodicScale(self.period, self.weights[perm], self.rates[perm], self.delta[perm], self.scale_floor, self.inner_rounds)

    def with_states_from(self, other, ks):
        arrs = [np.array(a) for a in (self.weights, self.rates, self.delta)]
        for a, b in zip(arrs, (other.weights, other.rates, other.delta)):
            a[ks] = b[ks]
        return ExpPeriodicScale(self.period, *arrs, self.scale_floor, self.inner_rounds)

    def param_vector(self, k):
        return np.concatenate([self.weights[k], self.rates[k], self.delta[k]])

    def params_dict(self):
        return {
            "weights": self.weights.tolist(),
            "rates": self.rates.tolist(),
            "delta": self.delta.tolist(),
            "scale_floor": self.scale_floor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["period"], d["weights"], d["rates"], np.array(d["delta"], dtype=float).reshape(len(d["weights"]), -1), d.get("scale_floor", 1e-3))

    @classmethod
    def random_init(cls, K, T, y, t, rng, M=1, degree=0, scale_floor=1e-3, **_):
        y = np.asarray(y, dtype=float)
        pos = y[y > 0] if np.any(y > 0) else np.array([1.0])
        rates = 1.0 / np.maximum(np.quantile(pos, rng.uniform(0.05, 0.95, size=(K, M))), 1e-8)
        rates = np.sort(rates, axis=1)
        weights = rng.dirichlet(np.ones(M), size=K)
        return cls(T, weights, rates, np.zeros((K, 2 * degree)), scale_floor)

    def laplace(self, s, t):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        r = self.rates / self.scale([t])[0][:, None]
        return (self.weights[None] * r[None] / (r[None] + s[:, None, None])).sum(axis=2)

    def cdf(self, x, t):
        x = np.maximum(np.atleast_1d(np.asarray(x, dtype=float)), 0.0)
        r = self.rates / self.scale([t])[0][:, None]
        return (self.weights[None] * -np.expm1(-r[None] * x[:, None, None])).sum(axis=2)

    def _continuous_pdf(self, y, k, t):
        return float(np.exp(self.log_density_matrix(np.array([y]), np.array([t]))[0, k]))


# ---------------------------------------------------------------------------
# Zero-inflated exponential mixture (precipitation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroInflatedExpMixture(EmissionFamily):
    """Point mass at zero plus an exponential mixture on ``(0, inf)``.

    ``weights[k, 0]`` is the dry-day probability and ``rates[k, m-1]`` the
    rate of wet component ``m``.  Observations ``<= dry_threshold`` count as
    the point mass.  Laws do not depend on the phase.
    """

    tag: ClassVar[str] = "zero_inflated_exp"
    support: ClassVar[tuple] = (0.0, np.inf)

    period: int
    weights: np.ndarray
    rates: np.ndarray
    dry_threshold: float = 0.0

    def __post_init__(self):
        for name in ("weights", "rates"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        K, M = self.weights.shape
        if M < 2:
            raise ValueError("need at least one wet component (M >= 2)")
        if self.rates.shape != (K, M - 1):
            raise ValueError(f"rates must have shape {(K, M - 1)}")
        _check_simplex(self.weights)
        if np.any(self.rates <= 0):
            raise ValueError("rates must be positive")

    @property
    def states(self) -> int:
        return self.weights.shape[0]

    def log_density_matrix(self, y, t=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise DomainError(f"observation {y[(y < 0) | ~np.isfinite(y)][0]} outside [0, inf)")
        dry = y <= self.dry_threshold
        out = np.empty((y.size, self.states))
        out[dry] = _log(self.weights[:, 0])[None]
        yw = y[~dry]
        lc = _log(self.weights[:, 1:])[None] + np.log(self.rates)[None] - self.rates[None] * yw[:, None, None]
        out[~dry] = logsumexp(lc, axis=2)
        return out

    def sample_path(self, states, t, rng):
        states = np.asarray(states)
        comp = _sample_components(self.weights[states], rng)
        e = rng.standard_exponential(states.size)
        wet = comp > 0
        out = np.zeros(states.size)
        out[wet] = e[wet] / self.rates[states[wet], comp[wet] - 1]
        return out

    def mean(self, t):
        t = np.atleast_1d(t)
        m = (self.weights[:, 1:] / self.rates).sum(axis=1)
        return np.broadcast_to(m, (t.size, self.states)).copy()

    def weighted_mstep(self, y, t, weights):
        y = np.asarray(y, dtype=float)
        W = np.asarray(weights, dtype=float)
        dry = y <= self.dry_threshold
        yw = y[~dry]
        p, lam = np.array(self.weights), np.array(self.rates)
        flags = []
        for k in range(self.states):
            wk = W[:, k]
            tot = wk.sum()
            if tot < DEGENERATE_WEIGHT:
                flags.append(f"state {k}: degenerate weight {tot:.3g}, left unchanged")
                continue
            ww = wk[~dry]
            lc = _log(p[k, 1:])[None] + np.log(lam[k])[None] - lam[k][None] * yw[:, None]
            if yw.size:
                r = ww[:, None] * np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
            else:
                r = np.zeros((0, lam.shape[1]))
            rs = r.sum(axis=0)
            p[k, 0] = wk[dry].sum() / tot
            p[k, 1:] = rs / tot
            denom = r.T @ yw
            ok = (rs > DEGENERATE_WEIGHT) & (denom > 0)
            lam[k, ok] = rs[ok] / denom[ok]
            order = np.argsort(lam[k], kind="stable")
            p[k, 1:], lam[k] = p[k, 1:][order], lam[k, order]
        new = ZeroInflatedExpMixture(self.period, _normalize_rows(p), lam, self.dry_threshold)
        return self._guarded(new, y, t, W, flags)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return ZeroInflatedExpMixture(self.period, self.weights[perm], self.rates[perm], self.dry_threshold)

    def with_states_from(self, other, ks):
        p, lam = np.array(self.weights), np.array(self.rates)
        p[ks], lam[ks] = other.weights[ks], other.rates[ks]
        return ZeroInflatedExpMixture(self.period, p, lam, self.dry_threshold)

    def param_vector(self, k):
        return np.concatenate([self.weights[k], self.rates[k]])

    def params_dict(self):
        return {"weights": self.weights.tolist(), "rates": self.rates.tolist(), "dry_threshold": self.dry_threshold}

    @classmethod
    def from_dict(cls, d):
        return cls(d["period"], d["weights"], d["rates"], d.get("dry_threshold", 0.0))

    @classmethod
    def random_init(cls, K, T, y, t, rng, M=2, dry_threshold=0.0, **_):
        y = np.asarray(y, dtype=float)
        wet = y[y > dry_threshold]
        if wet.size == 0:
            wet = np.array([1.0])
        rates = 1.0 / np.maximum(np.quantile(wet, rng.uniform(0.05, 0.95, size=(K, M - 1))), 1e-8)
        return cls(T, rng.dirichlet(np.ones(M), size=K), np.sort(rates, axis=1), dry_threshold)

    def laplace(self, s, t=None):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        r = self.rates[None]
        cont = (self.weights[None, :, 1:] * r / (r + s[:, None, None])).sum(axis=2)
        return self.weights[None, :, 0] + cont

    def cdf(self, x, t=None):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xx = np.maximum(x, 0.0)[:, None, None]
        cont = (self.weights[None, :, 1:] * -np.expm1(-self.rates[None] * xx)).sum(axis=2)
        return np.where(x[:, None] >= 0, self.weights[None, :, 0] + cont, 0.0)

    def _atoms(self, k, t):
        return [(0.0, float(self.weights[k, 0]))]

    def _continuous_pdf(self, y, k, t):
        if y <= 0:
            return 0.0
        return float(np.sum(self.weights[k, 1:] * self.rates[k] * np.exp(-self.rates[k] * y)))


FAMILIES = {cls.tag: cls for cls in (GaussianPeriodicMean, ExpPeriodicScale, ZeroInflatedExpMixture)}


def family_from_dict(d: dict) -> EmissionFamily:
    tag = d.get("family")
    if tag not in FAMILIES:
        raise ValueError(f"unknown emission family {tag!r}")
    fam = FAMILIES[tag].from_dict(d)
    if fam.states != d.get("states", fam.states):
        raise ValueError("emission 'states' field does not match parameter shapes")
    return fam


def random_family(tag: str, K: int, T: int, y, t, rng, **opts) -> EmissionFamily:
    if tag not in FAMILIES:
        raise ValueError(f"unknown emission family {tag!r}")
    return FAMILIES[tag].random_init(K, T, y, t, rng, **opts)


def linear_independence_check(fam: EmissionFamily, t: int, features=None, N: Optional[int] = None) -> float:
    """Smallest singular value of the feature matrix ``O_t``; near zero means dependent laws."""
    from shmm.spectral import FeatureMap, feature_matrix

    K = fam.states
    if features is None:
        features = FeatureMap.exponential(N or 2 * K)
    if features.N < K:
        raise ValueError(f"need at least K = {K} features, got {features.N}")
    O = feature_matrix(fam, t, features)
    if not np.all(np.isfinite(O)):
        raise FloatingPointError("feature integrals are not finite")
    return float(np.linalg.svd(O, compute_uv=False)[K - 1])
