"""Seeded simulation of hidden and observed trajectories.

Randomness comes from numpy's PCG64 bit generator.  A batch seeds one
``SeedSequence`` and spawns a child per replicate, so replicate ``r`` has
its own stream regardless of how many replicates are drawn or in which
order they run.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from shmm import _kernels
from shmm.core import SeasonalHMM, phase_of

SeedLike = Union[int, np.random.SeedSequence, None]


def model_fingerprint(model: SeasonalHMM) -> str:
    """SHA-256 of the serialized model document."""
    from shmm.dataio import model_to_dict

    doc = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass(frozen=True)
class Trajectory:
    Y: np.ndarray
    X: Optional[np.ndarray]
    seed: object
    fingerprint: str
    start: int = 1

    def __len__(self) -> int:
        return self.Y.size

    def phases(self, T: int) -> np.ndarray:
        return phase_of(np.arange(self.Y.size) + self.start, T)


def _seq(seed: SeedLike) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def simulate(model: SeasonalHMM, n: int, seed: SeedLike = None, start: int = 1,
             keep_states: bool = True, fingerprint: Optional[str] = None) -> Trajectory:
    """Draw ``X_1 ~ pi``, ``X_{i+1} | X_i ~ Q(phase_i)`` then ``Y_i | X_i``.

    States in the returned trajectory are 0-based.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ss = _seq(seed)
    rng = np.random.Generator(np.random.PCG64(ss))
    ph = phase_of(np.arange(n) + start, model.T).astype(np.int64)
    Q_cum = np.cumsum(model.transition.matrices(), axis=2)
    x = _kernels.markov_path(rng.random(n), np.cumsum(model.pi), Q_cum, np.ascontiguousarray(ph[:-1] - 1))
    y = model.emissions.sample_path(x, ph, rng)
    fp = fingerprint or model_fingerprint(model)
    return Trajectory(y, x if keep_states else None, ss.entropy if ss.spawn_key == () else (ss.entropy, ss.spawn_key), fp, start)


def simulate_batch(model: SeasonalHMM, n: int, reps: int, seed: SeedLike = None, start: int = 1,
                   keep_states: bool = True, threads: int = 1) -> list:
    """``reps`` independent trajectories; replicate ``r`` uses child ``r`` of ``SeedSequence(seed)``."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    children = _seq(seed).spawn(reps)
    fp = model_fingerprint(model)

    def one(ss):
        return simulate(model, n, ss, start, keep_states, fp)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, children))
    return [one(ss) for ss in children]
