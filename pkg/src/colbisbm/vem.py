"""Variational EM for collections of bipartite SBMs at fixed block numbers and supports.

Blocks are indexed from 0. Under ``ModelKind.SEP`` every network keeps its
own connectivity matrix, so ``ModelParams.alpha`` has shape ``(M, Q1, Q2)``;
all other kinds share one ``(Q1, Q2)`` matrix.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import entr
from sklearn.cluster import KMeans

from ._rng import derive_rng, derive_seed
from .emission import EmissionKind, clamp_alpha, linear_terms, neutral_alpha
from .network import BipartiteNetwork, ModelKind, NetworkCollection

TAU_FLOOR = 1e-9
DISTINCT_TOL = 1e-8


class FitError(RuntimeError):
    pass


# --- domain types --------------------------------------------------------


def _frozen_bool(a) -> np.ndarray:
    a = np.array(a, dtype=bool)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SupportPair:
    """Which row (``s1``) and column (``s2``) blocks each network populates."""

    s1: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        s1, s2 = _frozen_bool(self.s1), _frozen_bool(self.s2)
        if s1.ndim != 2 or s2.ndim != 2 or s1.shape[0] != s2.shape[0]:
            raise ValueError("supports must be M x Q1 and M x Q2 matrices")
        object.__setattr__(self, "s1", s1)
        object.__setattr__(self, "s2", s2)

    @classmethod
    def full(cls, M: int, q1: int, q2: int) -> "SupportPair":
        return cls(np.ones((M, q1), bool), np.ones((M, q2), bool))

    @property
    def M(self) -> int:
        return self.s1.shape[0]

    @property
    def q1(self) -> int:
        return self.s1.shape[1]

    @property
    def q2(self) -> int:
        return self.s2.shape[1]

    def is_admissible(self) -> bool:
        return all(
            s.shape[1] >= 1 and bool(s.any(axis=1).all()) and bool(s.any(axis=0).all())
            for s in (self.s1, self.s2)
        )

    def active_pairs(self) -> np.ndarray:
        """Block pairs (q, r) that co-occur in at least one network."""
        return (self.s1.astype(int).T @ self.s2.astype(int)) > 0

    def is_full(self) -> bool:
        return bool(self.s1.all() and self.s2.all())

    def validate(self, kind: ModelKind) -> None:
        if not self.is_admissible():
            raise ValueError("support is not admissible: every row and column needs a 1")
        if not kind.free_rows and not self.s1.all():
            raise ValueError(f"{kind.value} model requires an all-ones row support")
        if not kind.free_cols and not self.s2.all():
            raise ValueError(f"{kind.value} model requires an all-ones column support")

    def with_cell(self, side: int, m: int, block: int, value: bool) -> "SupportPair":
        s1, s2 = self.s1.copy(), self.s2.copy()
        (s1 if side == 1 else s2)[m, block] = value
        return SupportPair(s1, s2)

    def permuted(self, row_order, col_order) -> "SupportPair":
        return SupportPair(self.s1[:, row_order], self.s2[:, col_order])

    def transpose(self) -> "SupportPair":
        return SupportPair(self.s2, self.s1)

    def to_dict(self) -> dict:
        return {"s1": self.s1.astype(int).tolist(), "s2": self.s2.astype(int).tolist()}


@dataclass(frozen=True, eq=False)
class ModelParams:
    pi: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    kind: ModelKind
    emission: EmissionKind
    degenerate: np.ndarray | None = None

    def alpha_of(self, m: int) -> np.ndarray:
        return self.alpha[m] if self.alpha.ndim == 3 else self.alpha

    @property
    def q1(self) -> int:
        return self.pi.shape[1]

    @property
    def q2(self) -> int:
        return self.rho.shape[1]


@dataclass(frozen=True, eq=False)
class VariationalState:
    tau1: tuple[np.ndarray, ...]
    tau2: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "tau1", tuple(np.asarray(t, float) for t in self.tau1))
        object.__setattr__(self, "tau2", tuple(np.asarray(t, float) for t in self.tau2))

    @property
    def q1(self) -> int:
        return self.tau1[0].shape[1]

    @property
    def q2(self) -> int:
        return self.tau2[0].shape[1]

    def permuted(self, row_order, col_order) -> "VariationalState":
        return VariationalState(
            tuple(t[:, row_order] for t in self.tau1), tuple(t[:, col_order] for t in self.tau2)
        )


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-6
    max_iter: int = 200
    n_init: int = 5
    seed: int = 0
    inner_tol: float = 1e-4
    max_inner: int = 50
    mode: str = "sequential"
    perturb: float = 0.1
    # Sweeps given to every candidate before only the best one is run to
    # convergence; 0 runs every candidate fully.
    screen_iter: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.mode not in ("sequential", "batch"):
            raise ValueError("mode must be 'sequential' or 'batch'")


@dataclass(frozen=True, eq=False)
class FitResult:
    params: ModelParams
    state: VariationalState
    support: SupportPair
    elbo: float
    n_iterations: int
    converged: bool
    seed: int = 0
    elbo_trace: tuple[float, ...] = ()
    bicl: float | None = None

    @property
    def kind(self) -> ModelKind:
        return self.params.kind

    @property
    def q1(self) -> int:
        return self.params.q1

    @property
    def q2(self) -> int:
        return self.params.q2

    def with_bicl(self, value: float) -> "FitResult":
        return replace(self, bicl=float(value))


# --- helpers -------------------------------------------------------------


def _check_state_shapes(coll: NetworkCollection, state: VariationalState) -> None:
    if len(state.tau1) != coll.M or len(state.tau2) != coll.M:
        raise ValueError("state does not match the number of networks")
    for net, t1, t2 in zip(coll, state.tau1, state.tau2):
        if t1.shape[0] != net.n1 or t2.shape[0] != net.n2:
            raise ValueError("state does not match network sizes")


def _normalize_rows(logw: np.ndarray, allowed: np.ndarray, floor: float = TAU_FLOOR) -> np.ndarray:
    """Row-wise softmax restricted to ``allowed`` blocks, floored then renormalized."""
    # Work block-major: reductions over a short trailing axis are slow in numpy.
    full = bool(allowed.all())
    p = np.array(logw.T, order="C")
    if not full:
        p[~allowed] = -np.inf
    p -= p.max(axis=0)
    np.exp(p, out=p)
    p /= p.sum(axis=0)
    np.maximum(p, floor, out=p)
    if not full:
        p[~allowed] = 0.0
    p /= p.sum(axis=0)
    return np.ascontiguousarray(p.T)


def _restrict(tau: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    t = np.where(allowed, np.maximum(np.nan_to_num(tau, nan=0.0), TAU_FLOOR), 0.0)
    return t / t.sum(axis=1, keepdims=True)


def hard_tau(labels: np.ndarray, q: int, allowed: np.ndarray | None = None, smooth: bool = True) -> np.ndarray:
    """Soft membership matrix from hard labels: 1-(q-1)d on the label, d elsewhere."""
    labels = np.asarray(labels, int)
    if smooth and q > 1:
        delta = 0.1 / q
        t = np.full((labels.size, q), delta)
        t[np.arange(labels.size), labels] = 1 - (q - 1) * delta
    else:
        t = np.zeros((labels.size, q))
        t[np.arange(labels.size), labels] = 1.0
    if allowed is not None:
        t = _restrict(t, allowed)
    return t


def _log_props(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _dot_log(mass: np.ndarray, p: np.ndarray) -> float:
    """sum(mass * log p) with 0 * log 0 = 0."""
    pos = mass > 0
    with np.errstate(divide="ignore"):
        return float((mass[pos] * np.log(p[pos])).sum())


# --- sufficient statistics and the engine ---------------------------------


@dataclass
class _NetStats:
    e: np.ndarray
    n: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    entropy: float


def _net_stats(net: BipartiteNetwork, t1: np.ndarray, t2: np.ndarray) -> _NetStats:
    e = t1.T @ (net.x_obs @ t2)
    if net.fully_observed:
        n = np.outer(t1.sum(axis=0), t2.sum(axis=0))
    else:
        n = t1.T @ (net.mask @ t2)
    return _NetStats(e, n, t1.sum(axis=0), t2.sum(axis=0), float(entr(t1).sum() + entr(t2).sum()))


def _params_from_stats(
    coll: NetworkCollection, stats: Sequence[_NetStats], kind: ModelKind, support: SupportPair
) -> ModelParams:
    M = coll.M
    emission = coll.emission
    n1 = np.array([net.n1 for net in coll], float)
    n2 = np.array([net.n2 for net in coll], float)
    S1 = np.array([s.s1 for s in stats])
    S2 = np.array([s.s2 for s in stats])
    per_network = kind is ModelKind.SEP
    if kind.free_rows or per_network:
        pi = S1 / n1[:, None]
    else:
        pi = np.tile(S1.sum(axis=0) / n1.sum(), (M, 1))
    if kind.free_cols or per_network:
        rho = S2 / n2[:, None]
    else:
        rho = np.tile(S2.sum(axis=0) / n2.sum(), (M, 1))
    pi = np.where(support.s1, pi, 0.0)
    rho = np.where(support.s2, rho, 0.0)

    if per_network:
        alphas, degs = [], []
        for net, st in zip(coll, stats):
            a, d = _alpha_from_counts(st.e, st.n, np.ones_like(st.n, bool), emission, net.observed_mean)
            alphas.append(a)
            degs.append(d)
        alpha, degenerate = np.array(alphas), np.array(degs)
    else:
        E = sum(s.e for s in stats)
        N = sum(s.n for s in stats)
        n_obs = sum(float(net.observed.sum()) for net in coll)
        mean = sum(float(net.values.sum()) for net in coll) / max(n_obs, 1.0)
        alpha, degenerate = _alpha_from_counts(E, N, support.active_pairs(), emission, mean)
    return ModelParams(pi, rho, alpha, kind, emission, degenerate)


def _alpha_from_counts(E, N, required, emission, mean):
    ok = required & (N > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(ok, E / np.where(N > 0, N, 1.0), 0.0)
    alpha = np.where(ok, clamp_alpha(emission, raw), neutral_alpha(emission, mean))
    return alpha, required & ~ok


class _Engine:
    """Mutable VEM state with cached per-network sufficient statistics."""

    def __init__(self, coll, kind, support, state, opts: FitOptions):
        _check_state_shapes(coll, state)
        if state.q1 != support.q1 or state.q2 != support.q2:
            raise ValueError("state and support disagree on block numbers")
        self.coll, self.kind, self.support, self.opts = coll, kind, support, opts
        self.t1 = [_restrict(t, support.s1[m]) for m, t in enumerate(state.tau1)]
        self.t2 = [_restrict(t, support.s2[m]) for m, t in enumerate(state.tau2)]
        self.stats = [_net_stats(net, a, b) for net, a, b in zip(coll, self.t1, self.t2)]
        self.params = _params_from_stats(coll, self.stats, kind, support)

    def state(self) -> VariationalState:
        return VariationalState(tuple(t.copy() for t in self.t1), tuple(t.copy() for t in self.t2))

    def m_step(self) -> None:
        self.params = _params_from_stats(self.coll, self.stats, self.kind, self.support)

    def e_step_network(self, m: int, params: ModelParams | None = None) -> None:
        params = params or self.params
        net = self.coll[m]
        t1, t2 = self.t1[m], self.t2[m]
        t1, t2 = _fixed_point(net, params, m, t1, t2, self.support, self.opts.inner_tol, self.opts.max_inner)
        self.t1[m], self.t2[m] = t1, t2
        self.stats[m] = _net_stats(net, t1, t2)

    def elbo(self) -> float:
        return _elbo_from_stats(self.coll, self.params, self.stats)

    def sweep(self, rng: np.random.Generator) -> None:
        if self.opts.mode == "batch":
            params = self.params
            for m in range(self.coll.M):
                self.e_step_network(m, params)
            self.m_step()
        else:
            for m in rng.permutation(self.coll.M):
                self.e_step_network(int(m))
                self.m_step()


def _fixed_point(net, params, m, t1, t2, support, inner_tol, max_inner):
    q1, q2 = t1.shape[1], t2.shape[1]
    allowed1, allowed2 = support.s1[m], support.s2[m]
    if q1 == 1 and q2 == 1:
        return t1, t2
    slope, icept = linear_terms(params.emission, params.alpha_of(m))
    if not (np.all(np.isfinite(slope)) and np.all(np.isfinite(icept))):
        raise FitError("non-finite emission log-weights; alpha was not clamped")
    logpi = _log_props(params.pi[m])
    logrho = _log_props(params.rho[m])
    x = net.x_obs
    full = net.fully_observed
    mask = None if full else net.mask
    for _ in range(max(1, max_inner)):
        if q1 > 1:
            obs2 = t2.sum(axis=0)[None, :] if full else mask @ t2
            new1 = _normalize_rows(logpi + (x @ t2) @ slope.T + obs2 @ icept.T, allowed1)
        else:
            new1 = t1
        if q2 > 1:
            obs1 = new1.sum(axis=0)[None, :] if full else mask.T @ new1
            new2 = _normalize_rows(logrho + (x.T @ new1) @ slope + obs1 @ icept, allowed2)
        else:
            new2 = t2
        delta = max(np.abs(new1 - t1).max(), np.abs(new2 - t2).max())
        t1, t2 = new1, new2
        if delta < inner_tol:
            break
    return t1, t2


def _elbo_from_stats(coll, params: ModelParams, stats: Sequence[_NetStats]) -> float:
    total = 0.0
    shared = None if params.alpha.ndim == 3 else linear_terms(params.emission, params.alpha)
    for m, (net, st) in enumerate(zip(coll, stats)):
        slope, icept = shared or linear_terms(params.emission, params.alpha_of(m))
        total += float((st.e * slope).sum() + (st.n * icept).sum()) - net.log_factorial
        total += _dot_log(st.s1, params.pi[m]) + _dot_log(st.s2, params.rho[m])
        total += st.entropy
    return total


# --- public operations ---------------------------------------------------


def e_step(
    coll: NetworkCollection,
    params: ModelParams,
    state: VariationalState,
    support: SupportPair | None = None,
    inner_tol: float = 1e-4,
    max_inner: int = 50,
    networks: Sequence[int] | None = None,
) -> VariationalState:
    """Fixed-point update of the variational memberships at fixed parameters.

    Each network is handled independently; within a network the row update
    uses the current column memberships and the column update the freshly
    updated rows, repeated until the memberships move less than
    ``inner_tol``. Blocks with zero proportion (or outside ``support``) get
    exactly zero membership.
    """
    _check_state_shapes(coll, state)
    if support is None:
        support = SupportPair(params.pi > 0, params.rho > 0)
    t1, t2 = list(state.tau1), list(state.tau2)
    for m in range(coll.M) if networks is None else networks:
        a = _restrict(t1[m], support.s1[m])
        b = _restrict(t2[m], support.s2[m])
        t1[m], t2[m] = _fixed_point(coll[m], params, m, a, b, support, inner_tol, max_inner)
    return VariationalState(tuple(t1), tuple(t2))


def m_step(
    coll: NetworkCollection, state: VariationalState, kind: ModelKind, support: SupportPair | None = None
) -> ModelParams:
    """Closed-form parameter update from the variational memberships.

    Connectivity is the pooled ratio of expected interactions to expected
    observed dyads; proportions are pooled across networks on a shared side
    and per network on a free side. Block pairs that no network can reach
    get a neutral value; required pairs with zero mass are flagged in
    ``ModelParams.degenerate``.
    """
    kind = ModelKind.parse(kind)
    _check_state_shapes(coll, state)
    if support is None:
        support = SupportPair.full(coll.M, state.q1, state.q2)
    stats = [_net_stats(net, a, b) for net, a, b in zip(coll, state.tau1, state.tau2)]
    return _params_from_stats(coll, stats, kind, support)


def elbo(coll: NetworkCollection, params: ModelParams, state: VariationalState) -> float:
    """Evidence lower bound: expected complete log-likelihood plus entropy.

    Unobserved dyads are left out of the conditional term.
    """
    _check_state_shapes(coll, state)
    stats = [_net_stats(net, a, b) for net, a, b in zip(coll, state.tau1, state.tau2)]
    return _elbo_from_stats(coll, params, stats)


# --- spectral initialization ----------------------------------------------


@lru_cache(maxsize=512)
def _spectral_basis(net: BipartiteNetwork):
    a = net.values.astype(float)
    if not net.fully_observed:
        a = np.where(net.observed, a, net.observed_mean)
    d1 = a.sum(axis=1)
    d2 = a.sum(axis=0)
    d1 = np.where(d1 > 0, d1, 1.0)
    d2 = np.where(d2 > 0, d2, 1.0)
    an = a / np.sqrt(d1)[:, None] / np.sqrt(d2)[None, :]
    u, s, vt = np.linalg.svd(an, full_matrices=False)
    return u * s / np.sqrt(d1)[:, None], vt.T * s / np.sqrt(d2)[:, None]


def _kmeans_labels(emb: np.ndarray, q: int, k: int, seed: int) -> np.ndarray:
    n = emb.shape[0]
    if q == 1:
        return np.zeros(n, int)
    if q >= n:
        return np.arange(n) % q
    r = emb.shape[1]
    cols = list(range(1, min(k + 1, r))) or [0]
    x = emb[:, cols]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=q, n_init=4, random_state=seed % (2**31)).fit(x)
    return km.labels_.astype(int)


def _spectral_labels(net: BipartiteNetwork, q1: int, q2: int, seed: int):
    row_emb, col_emb = _spectral_basis(net)
    k = max(q1, q2)
    return _kmeans_labels(row_emb, q1, k, seed), _kmeans_labels(col_emb, q2, k, seed + 1)


def _block_counts(net: BipartiteNetwork, z: np.ndarray, w: np.ndarray, q1: int, q2: int):
    Z = np.eye(q1)[z]
    W = np.eye(q2)[w]
    return Z.T @ net.x_obs @ W, Z.T @ net.mask @ W


def _profile_loglik(E: np.ndarray, N: np.ndarray, emission: EmissionKind) -> np.ndarray:
    """Complete log-likelihood (up to constants) at the block-mean connectivity.

    Works on stacked arrays whose last two axes are blocks.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        a = clamp_alpha(emission, np.where(N > 0, E / np.where(N > 0, N, 1), 0.5))
    slope, icept = linear_terms(emission, a)
    return (E * slope + N * icept).sum(axis=(-2, -1))


_BRUTE_LIMIT = 20000


def _align_counts(E0, N0, e, n, emission) -> tuple[np.ndarray, np.ndarray]:
    """Relabel one network's blocks to best pool with accumulated block counts.

    Returns ``(ri, ci)`` such that ``e[np.ix_(ri, ci)]`` is expressed in the
    pooled labels. Small block numbers are enumerated exhaustively; larger
    ones use pairwise-swap hill climbing.
    """
    q1, q2 = e.shape
    n_perm = math.factorial(q1) * math.factorial(q2)
    if n_perm <= _BRUTE_LIMIT:
        R = np.array(list(itertools.permutations(range(q1))))
        C = np.array(list(itertools.permutations(range(q2))))
        ee = e[R[:, None, :, None], C[None, :, None, :]]
        nn = n[R[:, None, :, None], C[None, :, None, :]]
        ll = _profile_loglik(E0 + ee, N0 + nn, emission)
        k, l = np.unravel_index(np.argmax(ll), ll.shape)
        return R[k], C[l]

    def score(ri, ci):
        return _profile_loglik(E0 + e[np.ix_(ri, ci)], N0 + n[np.ix_(ri, ci)], emission)

    ri, ci = np.arange(q1), np.arange(q2)
    best = score(ri, ci)
    improved = True
    while improved:
        improved = False
        for perm, size in ((ri, q1), (ci, q2)):
            for a, b in itertools.combinations(range(size), 2):
                perm[[a, b]] = perm[[b, a]]
                val = score(ri, ci)
                if val > best + 1e-12:
                    best, improved = val, True
                else:
                    perm[[a, b]] = perm[[b, a]]
    return ri, ci


def _degree_order(labels: np.ndarray, degree: np.ndarray, q: int) -> np.ndarray:
    """Map cluster ids to ranks by decreasing mean degree (empty clusters last)."""
    means = np.array([degree[labels == k].mean() if np.any(labels == k) else -np.inf for k in range(q)])
    order = np.argsort(-means, kind="stable")
    rank = np.empty(q, int)
    rank[order] = np.arange(q)
    return rank


ALIGNMENTS = ("pool", "degree")


def spectral_labels(coll: NetworkCollection, q1: int, q2: int, seed: int = 0, align: str = "pool"):
    """Per-network spectral co-clustering, relabeled to agree across networks.

    ``align="degree"`` ranks each network's clusters by mean node degree,
    which needs no reference network. ``align="pool"`` visits networks from
    largest to smallest and relabels each one to maximize the complete
    log-likelihood of its block counts pooled with those already visited.
    """
    if align not in ALIGNMENTS:
        raise ValueError(f"align must be one of {ALIGNMENTS}")
    for net in coll:
        if q1 > net.n1 or q2 > net.n2:
            raise ValueError(f"cannot split network {net.name!r} of shape {net.shape} into ({q1}, {q2}) blocks")
    labels = [_spectral_labels(net, q1, q2, derive_seed(seed, "spectral", m)) for m, net in enumerate(coll)]
    if align == "degree":
        out = []
        for net, (z, w) in zip(coll, labels):
            with np.errstate(invalid="ignore"):
                d1 = net.x_obs.sum(axis=1) / np.maximum(net.mask.sum(axis=1), 1)
                d2 = net.x_obs.sum(axis=0) / np.maximum(net.mask.sum(axis=0), 1)
            out.append((_degree_order(z, d1, q1)[z], _degree_order(w, d2, q2)[w]))
        return out
    if coll.M > 1 and (q1 > 1 or q2 > 1):
        order = sorted(range(coll.M), key=lambda m: -coll[m].n1 * coll[m].n2)
        E0, N0 = _block_counts(coll[order[0]], *labels[order[0]], q1, q2)
        for m in order[1:]:
            z, w = labels[m]
            e, n = _block_counts(coll[m], z, w, q1, q2)
            ri, ci = _align_counts(E0, N0, e, n, coll.emission)
            E0, N0 = E0 + e[np.ix_(ri, ci)], N0 + n[np.ix_(ri, ci)]
            labels[m] = (np.argsort(ri)[z], np.argsort(ci)[w])
    return labels


def init_spectral(
    coll: NetworkCollection,
    q1: int,
    q2: int,
    seed: int = 0,
    support: SupportPair | None = None,
    align: str = "pool",
) -> VariationalState:
    """Initial memberships from spectral co-clustering of each network.

    Missing dyads are imputed with the network's observed mean for the
    embedding only. Each node gets 1-(q-1)d on its cluster and d elsewhere,
    with d = 0.1 / max(q1, q2).
    """
    if q1 < 1 or q2 < 1:
        raise ValueError("block numbers must be at least 1")
    labels = spectral_labels(coll, q1, q2, seed, align)
    delta = 0.1 / max(q1, q2)
    t1, t2 = [], []
    for m, (z, w) in enumerate(labels):
        a = np.full((z.size, q1), delta)
        a[np.arange(z.size), z] = 1 - (q1 - 1) * delta
        b = np.full((w.size, q2), delta)
        b[np.arange(w.size), w] = 1 - (q2 - 1) * delta
        if support is not None:
            a, b = _restrict(a, support.s1[m]), _restrict(b, support.s2[m])
        t1.append(a)
        t2.append(b)
    return VariationalState(tuple(t1), tuple(t2))


def perturb_state(state: VariationalState, frac: float, rng: np.random.Generator,
                  support: SupportPair | None = None) -> VariationalState:
    """Resample the hard labels of a fraction of nodes uniformly among allowed blocks."""
    q1, q2 = state.q1, state.q2
    out1, out2 = [], []
    for m, (a, b) in enumerate(zip(state.tau1, state.tau2)):
        for tau, q, out, side in ((a, q1, out1, 1), (b, q2, out2, 2)):
            allowed = np.ones(q, bool) if support is None else (support.s1 if side == 1 else support.s2)[m]
            labels = tau.argmax(axis=1)
            n = labels.size
            k = int(math.ceil(frac * n)) if frac > 0 else 0
            if k and q > 1:
                idx = rng.choice(n, size=min(k, n), replace=False)
                labels[idx] = rng.choice(np.flatnonzero(allowed), size=idx.size)
            out.append(hard_tau(labels, q, allowed))
    return VariationalState(tuple(out1), tuple(out2))


def _label_key(state: VariationalState) -> bytes:
    return b"".join(t.argmax(axis=1).astype(np.int16).tobytes() + b"|" for t in state.tau1 + state.tau2)


# --- fitting ---------------------------------------------------------------


@dataclass
class _Run:
    engine: _Engine
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def elbo(self) -> float:
        return self.trace[-1]


def _start(coll, kind, support, state, opts) -> _Run:
    eng = _Engine(coll, kind, support, state, opts)
    return _Run(eng, [eng.elbo()])


def _advance(run: _Run, n_sweeps: int, opts: FitOptions, rng) -> _Run:
    eng = run.engine
    for _ in range(n_sweeps):
        if run.converged or run.n_iter >= opts.max_iter:
            break
        eng.sweep(rng)
        new = eng.elbo()
        old = run.trace[-1]
        run.trace.append(new)
        run.n_iter += 1
        if not np.isfinite(new):
            break
        if abs(new - old) <= opts.tol * max(abs(old), 1e-300):
            run.converged = True
    return run


def run_vem(
    coll: NetworkCollection,
    kind: ModelKind,
    support: SupportPair,
    state: VariationalState,
    opts: FitOptions = FitOptions(),
    rng: np.random.Generator | None = None,
) -> FitResult:
    """Run VEM from one initial state; no restarts and no block reordering."""
    kind = ModelKind.parse(kind)
    rng = rng if rng is not None else derive_rng(opts.seed, "vem")
    run = _advance(_start(coll, kind, support, state, opts), opts.max_iter, opts, rng)
    return _result(run, opts.seed)


def _result(run: _Run, seed: int) -> FitResult:
    eng = run.engine
    return FitResult(
        params=eng.params,
        state=eng.state(),
        support=eng.support,
        elbo=float(run.trace[-1]),
        n_iterations=run.n_iter,
        converged=run.converged,
        seed=seed,
        elbo_trace=tuple(float(v) for v in run.trace),
    )


def fit(
    coll: NetworkCollection,
    kind: ModelKind | str,
    q1: int,
    q2: int,
    support: SupportPair | None = None,
    opts: FitOptions = FitOptions(),
    init_states: Sequence[VariationalState] = (),
) -> FitResult:
    """Fit one model at fixed block numbers and support.

    Runs ``opts.n_init`` spectral restarts (alternating the two cross-network
    alignments, all but the first two perturbed) plus
    any warm starts in ``init_states`` and keeps the best ELBO. Networks are
    updated one at a time in a shuffled order within each sweep, each
    followed by a parameter update. The result is returned in canonical
    block order.
    """
    kind = ModelKind.parse(kind)
    if support is None:
        support = SupportPair.full(coll.M, q1, q2)
    if support.q1 != q1 or support.q2 != q2 or support.M != coll.M:
        raise ValueError("support shape does not match (M, q1, q2)")
    support.validate(kind)

    inits = list(init_states)
    seen = set()
    for k in range(opts.n_init):
        align = ALIGNMENTS[k % len(ALIGNMENTS)]
        st = init_spectral(coll, q1, q2, seed=derive_seed(opts.seed, "init", k), support=support, align=align)
        if k >= len(ALIGNMENTS) and opts.perturb > 0:
            st = perturb_state(st, opts.perturb, derive_rng(opts.seed, "perturb", k), support)
        key = _label_key(st)
        if key in seen:
            # Small networks give the same start over and over; draw fresh labels instead.
            st = perturb_state(st, 1.0, derive_rng(opts.seed, "random", k), support)
            key = _label_key(st)
        seen.add(key)
        inits.append(st)
    if not inits:
        raise ValueError("nothing to fit: n_init = 0 and no initial states")

    runs = []
    for k, st in enumerate(inits):
        try:
            run = _start(coll, kind, support, st, opts)
        except FitError:
            continue
        runs.append((run, derive_rng(opts.seed, "sweeps", k)))
    if opts.screen_iter > 0 and len(runs) > 1:
        for run, rng in runs:
            _advance(run, opts.screen_iter, opts, rng)
        finite = [r for r in runs if np.isfinite(r[0].elbo)]
        runs = sorted(finite, key=lambda r: -r[0].elbo)[:1]
    best = None
    for run, rng in runs:
        _advance(run, opts.max_iter, opts, rng)
        if np.isfinite(run.elbo) and (best is None or run.elbo > best.elbo):
            best = run
    if best is None:
        raise FitError("no restart produced a finite ELBO")
    return canonicalize(_result(best, opts.seed))


# --- block ordering and labels ---------------------------------------------


def canonical_order(params: ModelParams, weights1=None, weights2=None, m: int | None = None):
    """Block orders by decreasing marginal connectivity.

    Rows are scored by alpha @ rho_bar and columns by pi_bar @ alpha, where
    the bars are proportions pooled over networks (or network ``m`` alone).
    """
    if m is None:
        pi_bar = params.pi.mean(axis=0) if weights1 is None else weights1
        rho_bar = params.rho.mean(axis=0) if weights2 is None else weights2
        alpha = params.alpha
    else:
        pi_bar, rho_bar, alpha = params.pi[m], params.rho[m], params.alpha_of(m)
    row_score = alpha @ rho_bar
    col_score = pi_bar @ alpha
    return np.argsort(-row_score, kind="stable"), np.argsort(-col_score, kind="stable")


def permute_fit(result: FitResult, row_order, col_order) -> FitResult:
    p = result.params
    alpha = p.alpha[..., row_order, :][..., col_order]
    deg = None if p.degenerate is None else p.degenerate[..., row_order, :][..., col_order]
    params = ModelParams(p.pi[:, row_order], p.rho[:, col_order], alpha, p.kind, p.emission, deg)
    return replace(
        result,
        params=params,
        state=result.state.permuted(row_order, col_order),
        support=result.support.permuted(row_order, col_order),
    )


def canonicalize(result: FitResult) -> FitResult:
    p = result.params
    if p.kind is ModelKind.SEP:
        # blocks are unrelated across networks: order each network on its own
        pis, rhos, alphas, degs, t1s, t2s = [], [], [], [], [], []
        for m in range(p.pi.shape[0]):
            ro, co = canonical_order(p, m=m)
            pis.append(p.pi[m, ro])
            rhos.append(p.rho[m, co])
            alphas.append(p.alpha[m][ro][:, co])
            degs.append(p.degenerate[m][ro][:, co] if p.degenerate is not None else np.zeros((p.q1, p.q2), bool))
            t1s.append(result.state.tau1[m][:, ro])
            t2s.append(result.state.tau2[m][:, co])
        params = ModelParams(np.array(pis), np.array(rhos), np.array(alphas), p.kind, p.emission, np.array(degs))
        return replace(result, params=params, state=VariationalState(tuple(t1s), tuple(t2s)))
    w1 = np.array([t.sum(axis=0) for t in result.state.tau1]).sum(axis=0)
    w2 = np.array([t.sum(axis=0) for t in result.state.tau2]).sum(axis=0)
    ro, co = canonical_order(p, w1 / w1.sum(), w2 / w2.sum())
    return permute_fit(result, ro, co)


def map_memberships(result: FitResult) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """MAP block of every row and column node; ties go to the lowest index."""
    rows = [np.argmax(t, axis=1) for t in result.state.tau1]
    cols = [np.argmax(t, axis=1) for t in result.state.tau2]
    return rows, cols


# --- identifiability diagnostics ---------------------------------------------


def _distinct(v: np.ndarray, tol: float = DISTINCT_TOL) -> bool:
    v = np.sort(np.ravel(v))
    return bool(np.all(np.diff(v) > tol)) if v.size > 1 else True


@dataclass(frozen=True)
class IdentifiabilityReport:
    kind: ModelKind
    conditions: dict

    @property
    def passed(self) -> bool:
        return all(self.conditions.values())


def check_identifiability(params: ModelParams, coll: NetworkCollection) -> IdentifiabilityReport:
    """Check the sufficient identifiability conditions for the fitted model kind.

    Supports are read off the proportions (a block is populated in network
    m when its proportion is positive). Coordinates count as distinct when
    they differ by more than 1e-8.
    """
    kind = params.kind
    n1 = np.array([net.n1 for net in coll])
    n2 = np.array([net.n2 for net in coll])
    s1, s2 = params.pi > 0, params.rho > 0
    Q1m, Q2m = s1.sum(axis=1), s2.sum(axis=1)
    Q1, Q2 = params.q1, params.q2
    M = coll.M

    def restricted(m):
        a = params.alpha_of(m)[np.ix_(s1[m], s2[m])]
        return a, params.pi[m][s1[m]], params.rho[m][s2[m]]

    def per_net_rows():
        return all(_distinct(a @ r) for a, _, r in map(restricted, range(M)))

    def per_net_cols():
        return all(_distinct(p @ a) for a, p, _ in map(restricted, range(M)))

    cond: dict[str, bool] = {}
    if kind is ModelKind.IID:
        cond["size"] = bool(np.any((n1 >= 2 * Q2 - 1) & (n2 >= 2 * Q1 - 1)))
        cond["distinct_alpha_rho"] = _distinct(params.alpha @ params.rho[0])
        cond["distinct_pi_alpha"] = _distinct(params.pi[0] @ params.alpha)
    elif kind is ModelKind.PI:
        cond["size"] = bool(np.all(n1 >= 2 * Q2 - 1) and np.any(n2 >= 2 * Q1 - 1))
        cond["distinct_alpha_rho"] = _distinct(params.alpha @ params.rho[0])
        cond["distinct_pi_alpha"] = per_net_cols()
        cond["distinct_rho"] = _distinct(params.rho[0])
    elif kind is ModelKind.RHO:
        cond["size"] = bool(np.any(n1 >= 2 * Q2 - 1) and np.all(n2 >= 2 * Q1 - 1))
        cond["distinct_alpha_rho"] = per_net_rows()
        cond["distinct_pi_alpha"] = _distinct(params.pi[0] @ params.alpha)
        cond["distinct_pi"] = _distinct(params.pi[0])
    elif kind is ModelKind.PIRHO:
        cond["size"] = bool(np.all((n1 >= 2 * Q2m - 1) & (n2 >= 2 * Q1m - 1)))
        cond["distinct_alpha_rho"] = per_net_rows()
        cond["distinct_pi_alpha"] = per_net_cols()
        active = (s1.astype(int).T @ s2.astype(int)) > 0
        cond["unique_alpha"] = _distinct(params.alpha[active])
    else:
        cond["size"] = bool(np.all((n1 >= 2 * Q2m - 1) & (n2 >= 2 * Q1m - 1)))
        cond["distinct_alpha_rho"] = per_net_rows()
        cond["distinct_pi_alpha"] = per_net_cols()
    return IdentifiabilityReport(kind, cond)
