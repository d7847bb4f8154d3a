"""Dyad scoring from a fitted model, ROC-AUC, and controlled degradation of networks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .network import BipartiteNetwork, NetworkCollection
from .vem import FitResult


class Degradation(str, Enum):
    MISSING_LINKS = "links"
    MISSING_DYADS = "dyads"

    @classmethod
    def parse(cls, value) -> "Degradation":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        aliases = {"missinglinks": "links", "missing_links": "links", "missingdyads": "dyads", "missing_dyads": "dyads"}
        try:
            return cls(aliases.get(v, v))
        except ValueError:
            raise ValueError(f"unknown degradation mode {value!r}") from None


@dataclass(frozen=True)
class DyadPrediction:
    m: int
    i: int
    j: int
    score: float


def score_matrix(result: FitResult, m: int) -> np.ndarray:
    """Posterior-mixture mean of the emission parameter for every dyad of network ``m``."""
    t1 = result.state.tau1[m]
    t2 = result.state.tau2[m]
    return t1 @ result.params.alpha_of(m) @ t2.T


def predict_dyads(result: FitResult, coll: NetworkCollection, targets: Sequence[tuple[int, int, int]]) -> list[DyadPrediction]:
    """Scores for the requested ``(m, i, j)`` dyads (0-based indices)."""
    cache: dict[int, np.ndarray] = {}
    out = []
    for m, i, j in targets:
        m, i, j = int(m), int(i), int(j)
        if not 0 <= m < coll.M:
            raise IndexError(f"network index {m} out of range")
        net = coll[m]
        if not (0 <= i < net.n1 and 0 <= j < net.n2):
            raise IndexError(f"dyad ({i}, {j}) outside network {m} of shape {net.shape}")
        if m not in cache:
            cache[m] = score_matrix(result, m)
        out.append(DyadPrediction(m, i, j, float(cache[m][i, j])))
    return out


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    # Average ranks are multiples of 1/2, so the rank sum (and the count of
    # winning pairs it encodes) is exact in floating point.
    ranks = rankdata(s, method="average")
    wins = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(wins / (n_pos * n_neg))


def degrade(
    net: BipartiteNetwork, mode: Degradation | str, p_mis: float, seed: int = 0
) -> tuple[BipartiteNetwork, list[tuple[int, int, int]]]:
    """Alter ``ceil(p_mis * n1 * n2)`` observed dyads chosen uniformly without replacement.

    Missing links are set to 0 but stay observed; missing dyads are masked.
    Returns the degraded network and ``(i, j, original value)`` for every
    altered dyad.
    """
    mode = Degradation.parse(mode)
    if not 0 < p_mis < 1:
        raise ValueError("p_mis must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    obs = np.flatnonzero(net.observed.ravel())
    k = min(int(math.ceil(p_mis * net.n1 * net.n2)), obs.size)
    chosen = np.sort(rng.choice(obs, size=k, replace=False))
    ii, jj = np.unravel_index(chosen, net.shape)
    truth = [(int(i), int(j), int(net.values[i, j])) for i, j in zip(ii, jj)]
    values = net.values.copy()
    observed = net.observed.copy()
    values[ii, jj] = 0
    if mode is Degradation.MISSING_DYADS:
        observed[ii, jj] = False
    return net.with_data(values, observed), truth
