"""Partition a collection into sub-collections that each share one structure.

A partition is scored by the sum of the selected BIC-L of its groups.
Groups are split in two by average-linkage clustering of a dissimilarity
between the networks' empirical block parameters, and a split is kept
only if it raises the score.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .network import ModelKind, NetworkCollection
from .selection import SelectOptions, SelectionResult, select_blocks
from .vem import FitResult

SPLIT_SLACK = 1e-6
MAX_EXHAUSTIVE_M = 8


def empirical_parameters(coll: NetworkCollection, result: FitResult):
    """Per-network block proportions and connectivity from the variational memberships.

    Block pairs without observed dyads get connectivity 0.
    """
    pis, rhos, alphas = [], [], []
    for net, t1, t2 in zip(coll, result.state.tau1, result.state.tau2):
        pis.append(t1.sum(axis=0) / net.n1)
        rhos.append(t2.sum(axis=0) / net.n2)
        e = t1.T @ net.x_obs @ t2
        n = t1.T @ net.mask @ t2
        with np.errstate(invalid="ignore", divide="ignore"):
            alphas.append(np.where(n > 0, e / np.where(n > 0, n, 1), 0.0))
    return np.array(pis), np.array(rhos), np.array(alphas)


def dissimilarity(coll: NetworkCollection, result: FitResult) -> np.ndarray:
    """Symmetric M x M matrix of proportion-weighted squared connectivity differences."""
    pi, rho, alpha = empirical_parameters(coll, result)
    M = coll.M
    D = np.zeros((M, M))
    for a in range(M):
        for b in range(a + 1, M):
            w1 = np.maximum(pi[a], pi[b])
            w2 = np.maximum(rho[a], rho[b])
            D[a, b] = D[b, a] = float(w1 @ ((alpha[a] - alpha[b]) ** 2) @ w2)
    return D


def split_indices(D: np.ndarray) -> tuple[list[int], list[int]]:
    """Two-cluster cut of an average-linkage tree built on ``D`` (local indices)."""
    M = D.shape[0]
    if M < 2:
        raise ValueError("cannot split a single network")
    if M == 2:
        return [0], [1]
    Z = linkage(squareform(D, checks=False), method="average")
    lab = fcluster(Z, t=2, criterion="maxclust")
    if lab.min() == lab.max():
        return [0], list(range(1, M))
    first = lab[0]
    return [i for i in range(M) if lab[i] == first], [i for i in range(M) if lab[i] != first]


def split_once(
    coll: NetworkCollection,
    group: Sequence[int],
    kind: ModelKind | str,
    opts: SelectOptions = SelectOptions(),
    result: FitResult | None = None,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split ``group`` in two using the dissimilarity of a joint fit on it."""
    group = tuple(group)
    if len(group) < 2:
        raise ValueError("cannot split a singleton group")
    if len(group) == 2:
        return (group[0],), (group[1],)
    sub = coll.subset(group)
    if result is None:
        result = select_blocks(sub, kind, opts).best
    a, b = split_indices(dissimilarity(sub, result))
    return tuple(group[i] for i in a), tuple(group[i] for i in b)


@dataclass(frozen=True, eq=False)
class CollectionPartition:
    groups: tuple[tuple[int, ...], ...]
    selections: tuple[SelectionResult, ...]
    score: float
    trajectory: tuple[float, ...] = ()
    n_evaluated: int = 0

    def labels(self, M: int | None = None) -> np.ndarray:
        """Group index of every network."""
        M = M if M is not None else sum(len(g) for g in self.groups)
        out = np.empty(M, int)
        for k, g in enumerate(self.groups):
            out[list(g)] = k
        return out


class _Scorer:
    def __init__(self, coll, kind, opts, progress=None):
        self.coll, self.kind, self.opts = coll, ModelKind.parse(kind), opts
        self.cache: dict[tuple[int, ...], SelectionResult] = {}
        self.progress = progress

    def __call__(self, group: Sequence[int]) -> SelectionResult:
        key = tuple(sorted(group))
        if key not in self.cache:
            self.cache[key] = select_blocks(self.coll.subset(key), self.kind, self.opts)
            if self.progress:
                self.progress(f"group {key}: bicl={self.cache[key].bicl:.3f}")
        return self.cache[key]


def _finish(groups, scorer: _Scorer, trajectory) -> CollectionPartition:
    groups = sorted((tuple(sorted(g)) for g in groups), key=lambda g: g[0])
    sels = tuple(scorer(g) for g in groups)
    return CollectionPartition(tuple(groups), sels, float(sum(s.bicl for s in sels)), tuple(trajectory), len(scorer.cache))


def recursive_partition(
    coll: NetworkCollection,
    kind: ModelKind | str,
    opts: SelectOptions = SelectOptions(),
    progress: Callable[[str], None] | None = None,
) -> CollectionPartition:
    """Split groups in two for as long as a split raises the partition score."""
    scorer = _Scorer(coll, kind, opts, progress)
    root = tuple(range(coll.M))
    final: list[tuple[int, ...]] = []
    queue = [root]
    score = scorer(root).bicl
    trajectory = [score]
    while queue:
        g = queue.pop(0)
        if len(g) < 2:
            final.append(g)
            continue
        a, b = split_once(coll, g, scorer.kind, opts, scorer(g).best)
        gain = scorer(a).bicl + scorer(b).bicl - scorer(g).bicl
        if gain > SPLIT_SLACK:
            score += gain
            trajectory.append(score)
            queue += [a, b]
        else:
            final.append(g)
    return _finish(final, scorer, trajectory)


def set_partitions(items: Sequence[int]) -> Iterator[list[list[int]]]:
    """All set partitions of ``items`` (Bell-number many)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1:]


def exhaustive_partition(
    coll: NetworkCollection,
    kind: ModelKind | str,
    opts: SelectOptions = SelectOptions(),
    max_networks: int = MAX_EXHAUSTIVE_M,
    progress: Callable[[str], None] | None = None,
) -> CollectionPartition:
    """Best-scoring partition over all set partitions of the networks."""
    if coll.M > max_networks:
        raise ValueError(f"exhaustive search is limited to {max_networks} networks (got {coll.M})")
    scorer = _Scorer(coll, kind, opts, progress)
    best, best_score, n = None, -np.inf, 0
    for part in set_partitions(range(coll.M)):
        n += 1
        s = sum(scorer(g).bicl for g in part)
        if s > best_score + SPLIT_SLACK or best is None:
            best, best_score = part, s
    out = _finish(best, scorer, [best_score])
    return CollectionPartition(out.groups, out.selections, out.score, out.trajectory, n)
