"""Parametric-bootstrap validation of a fitted daily generator.

Statistics are computed per day of year on the observed series and on
``reps`` simulated series of the same length and calendar.  Bands are the
2.5% / 97.5% empirical quantiles (``inverted_cdf``, so with two replicates
they are the min and max) across replicates.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from shmm.core import SeasonalHMM
from shmm.dataio import DailySeries, save_json, write_table
from shmm.inference import viterbi
from shmm.sim import model_fingerprint, simulate_batch

DAILY_STATS = ("mean", "variance", "skewness", "kurtosis", "wet_frequency")
DEFAULT_GRID = np.concatenate([np.round(np.arange(1, 100) / 100, 2), [0.995, 0.999]])
QUANTILE_METHOD = "inverted_cdf"


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def daily_stats(values, doy, T: int = 365, window: int = 0, dry_threshold: float = 0.0,
                min_count: int = 2) -> dict:
    """Per-day-of-year moments and wet frequency.

    Values with day of year within ``window`` days (circularly) of ``t`` are
    pooled into cell ``t``.  Variance uses ``n - 1``; skewness and kurtosis
    are ``m3 / m2^1.5`` and ``m4 / m2^2`` with biased central moments
    ``m_j`` (kurtosis is not excess).  They are NaN where ``m2 = 0``.

    Returns a dict of length-``T`` arrays keyed by :data:`DAILY_STATS` plus
    ``"count"``.
    """
    y = np.asarray(values, dtype=float)
    doy = np.asarray(doy, dtype=np.int64)
    if y.shape != doy.shape:
        raise ValueError("values and doy must have equal length")
    offsets = np.arange(-window, window + 1)
    cell = ((doy[None, :] - 1 + offsets[:, None]) % T).ravel()
    yy = np.tile(y, offsets.size)

    n = np.bincount(cell, minlength=T).astype(float)
    short = np.flatnonzero(n < min_count) + 1
    if short.size:
        raise InsufficientDataError(f"fewer than {min_count} values on day(s) of year {short.tolist()}")
    mean = np.bincount(cell, yy, T) / n
    dev = yy - mean[cell]
    m2 = np.bincount(cell, dev**2, T) / n
    m3 = np.bincount(cell, dev**3, T) / n
    m4 = np.bincount(cell, dev**4, T) / n
    scale = np.bincount(cell, np.abs(yy), T) / n
    flat = m2 <= (1e-14 * np.maximum(scale, 1e-300)) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(flat, np.nan, m3 / m2**1.5)
        kurt = np.where(flat, np.nan, m4 / m2**2)
    var = np.where(flat, 0.0, m2 * n / (n - 1))
    wet = np.bincount(cell, (yy > dry_threshold).astype(float), T) / n
    return {"mean": mean, "variance": var, "skewness": skew, "kurtosis": kurt, "wet_frequency": wet, "count": n}


def spells(values, kind: str = "dry", threshold: float = 0.0) -> np.ndarray:
    """Lengths of the maximal dry (``<= threshold``) or wet (``> threshold``) runs, in order."""
    if kind not in ("dry", "wet"):
        raise ValueError("kind must be 'dry' or 'wet'")
    y = np.asarray(values, dtype=float)
    hit = y <= threshold if kind == "dry" else y > threshold
    if not hit.size:
        return np.zeros(0, dtype=np.int64)
    edges = np.diff(np.concatenate([[0], hit.astype(np.int8), [0]]))
    return np.flatnonzero(edges == -1) - np.flatnonzero(edges == 1)


def spell_distribution(values, kind: str = "dry", max_len: int = 30, threshold: float = 0.0) -> np.ndarray:
    """Spell-length histogram: entry ``L - 1`` counts spells of length ``L`` for
    ``L <= max_len``; the last entry (index ``max_len``) counts longer spells.
    Runs touching either end of the series are counted as they are."""
    lens = spells(values, kind, threshold)
    hist = np.bincount(np.minimum(lens, max_len + 1) - 1, minlength=max_len + 1)
    return hist[: max_len + 1]


def annual_maxima(values, doy) -> np.ndarray:
    """Maximum of each complete 365-day year (a year starts at day 1)."""
    y = np.asarray(values, dtype=float)
    doy = np.asarray(doy)
    starts = np.flatnonzero(doy == 1)
    out = [y[s:s + 365].max() for s in starts if s + 365 <= y.size and doy[s + 364] == 365]
    return np.array(out)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class Band:
    observed: np.ndarray
    sim_mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def inside(self) -> np.ndarray:
        """Cells where the observed value lies in ``[lower, upper]`` (NaN cells excluded)."""
        ok = np.isfinite(self.observed) & np.isfinite(self.lower) & np.isfinite(self.upper)
        res = np.full(self.observed.shape, np.nan)
        res[ok] = (self.observed[ok] >= self.lower[ok]) & (self.observed[ok] <= self.upper[ok])
        return res

    def coverage(self) -> float:
        ins = self.inside()
        ins = ins[np.isfinite(ins)]
        return float(ins.mean()) if ins.size else float("nan")


def _band(observed, sims, q=(0.025, 0.975)) -> Band:
    sims = np.asarray(sims, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lo = np.nanquantile(sims, q[0], axis=0, method=QUANTILE_METHOD)
        hi = np.nanquantile(sims, q[1], axis=0, method=QUANTILE_METHOD)
        mean = np.nanmean(sims, axis=0)
    return Band(np.asarray(observed, dtype=float), mean, lo, hi)


@dataclass
class ValidationReport:
    daily: dict
    spells: dict
    qq: Band
    grid: np.ndarray
    state_frequency: Optional[np.ndarray]
    annual_max: Optional[Band]
    meta: dict = field(default_factory=dict)

    def coverage(self) -> dict:
        out = {k: b.coverage() for k, b in self.daily.items()}
        out.update({f"{k}_spells": b.coverage() for k, b in self.spells.items()})
        out["qq"] = self.qq.coverage()
        if self.annual_max is not None:
            out["annual_max"] = self.annual_max.coverage()
        return out

    def summary(self) -> dict:
        return {**self.meta, "coverage": self.coverage()}

    def write(self, outdir) -> list:
        """One CSV per statistic plus ``summary.json``; returns written paths."""
        os.makedirs(outdir, exist_ok=True)
        paths = []
        head = ["observed", "sim_mean", "lower_2.5", "upper_97.5"]

        def put(name, key, keys, band):
            p = os.path.join(outdir, name)
            write_table(p, [key] + head, zip(keys, band.observed, band.sim_mean, band.lower, band.upper))
            paths.append(p)

        for stat, band in self.daily.items():
            put(f"daily_{stat}.csv", "day_of_year", range(1, band.observed.size + 1), band)
        for kind, band in self.spells.items():
            n = band.observed.size
            labels = [str(i) for i in range(1, n)] + [f">{n - 1}"]
            put(f"spells_{kind}.csv", "length", labels, band)
        put("qq.csv", "probability", self.grid, self.qq)
        if self.annual_max is not None:
            put("annual_max.csv", "rank", range(1, self.annual_max.observed.size + 1), self.annual_max)
        if self.state_frequency is not None:
            p = os.path.join(outdir, "state_frequency.csv")
            K = self.state_frequency.shape[1]
            write_table(p, ["day_of_year"] + [f"state_{k + 1}" for k in range(K)],
                        ([t + 1, *row] for t, row in enumerate(self.state_frequency)))
            paths.append(p)
        p = os.path.join(outdir, "summary.json")
        save_json(self.summary(), p)
        paths.append(p)
        return paths


def _series_stats(y, doy, T, window, thr, max_spell, grid, want_max):
    st = daily_stats(y, doy, T, window, thr)
    sp = {k: spell_distribution(y, k, max_spell, thr) for k in ("dry", "wet")}
    qq = np.quantile(y, grid, method=QUANTILE_METHOD)
    am = annual_maxima(y, doy) if want_max else None
    if am is not None:
        am = np.sort(am)[::-1]
    return st, sp, qq, am


def state_frequency(model: SeasonalHMM, series: DailySeries) -> np.ndarray:
    """Relative frequency of each decoded state per day of year, shape ``(T, K)``."""
    path = viterbi(model, series.values, start=series.start)
    T, K = model.T, model.K
    counts = np.zeros((T, K))
    np.add.at(counts, (series.doy - 1, path), 1.0)
    tot = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, tot, out=np.full_like(counts, np.nan), where=tot > 0)


def bootstrap_report(model: SeasonalHMM, observed: DailySeries, reps: int = 1000, seed: int = 0,
                     window: int = 0, dry_threshold: float = 0.0, max_spell: int = 30,
                     grid=None, annual_max: bool = True, decode: bool = True,
                     threads: int = 1) -> ValidationReport:
    """Compare ``observed`` with ``reps`` simulated series of the same length."""
    T = model.T
    if observed.doy.max() > T:
        raise ValueError(f"observed calendar has days beyond the model period {T}")
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    n, doy = len(observed), observed.doy
    want_max = annual_max and annual_maxima(observed.values, doy).size > 0
    obs = _series_stats(observed.values, doy, T, window, dry_threshold, max_spell, grid, want_max)

    trajs = simulate_batch(model, n, reps, seed, start=observed.start, keep_states=False)

    def stats_of(tr):
        return _series_stats(tr.Y, doy, T, window, dry_threshold, max_spell, grid, want_max)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            sims = list(ex.map(stats_of, trajs))
    else:
        sims = [stats_of(tr) for tr in trajs]

    daily = {s: _band(obs[0][s], [r[0][s] for r in sims]) for s in DAILY_STATS}
    sp = {k: _band(obs[1][k], [r[1][k] for r in sims]) for k in ("dry", "wet")}
    qq = _band(obs[2], [r[2] for r in sims])
    am = _band(obs[3], [r[3] for r in sims]) if want_max else None
    sf = state_frequency(model, observed) if decode else None
    meta = {"reps": reps, "seed": seed, "length": n, "window": window, "dry_threshold": dry_threshold,
            "model_fingerprint": model_fingerprint(model), "quantile_method": QUANTILE_METHOD}
    return ValidationReport(daily, sp, qq, grid, sf, am, meta)
