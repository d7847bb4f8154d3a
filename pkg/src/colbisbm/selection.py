"""BIC-L model selection: penalties, support search, and the block-number search.

The block-number search starts from (1, 2) and (2, 1), climbs greedily
through split and merge neighbors, then revisits a moving window around
the current best point using warm starts built from neighboring fits.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.cluster import KMeans

from ._rng import derive_seed
from .network import ModelKind, NetworkCollection
from .vem import (
    FitError,
    FitOptions,
    FitResult,
    SupportPair,
    VariationalState,
    canonicalize,
    fit,
    map_memberships,
    run_vem,
)

SCORE_SLACK = 1e-9


# --- penalties ---------------------------------------------------------------


def n_max_entries(coll: NetworkCollection) -> int:
    """Total number of dyads over all networks."""
    if coll.M < 1:
        raise ValueError("empty collection")
    return int(sum(net.n1 * net.n2 for net in coll))


@dataclass(frozen=True)
class Penalty:
    pen_pi: float
    pen_rho: float
    pen_alpha: float
    pen_s1: float = 0.0
    pen_s2: float = 0.0

    @property
    def total(self) -> float:
        return self.pen_pi + self.pen_rho + self.pen_alpha + self.pen_s1 + self.pen_s2

    def as_dict(self) -> dict:
        return {
            "pen_pi": self.pen_pi,
            "pen_rho": self.pen_rho,
            "pen_alpha": self.pen_alpha,
            "pen_s1": self.pen_s1,
            "pen_s2": self.pen_s2,
            "penalty": self.total,
        }


def _support_prior(s: np.ndarray) -> float:
    """-2 log of the uniform prior over supports with the given row sums."""
    M, Q = s.shape
    return 2.0 * (M * math.log(Q) + sum(math.log(math.comb(Q, int(k))) for k in s.sum(axis=1)))


def compute_penalty(coll: NetworkCollection, kind: ModelKind | str, support: SupportPair) -> Penalty:
    kind = ModelKind.parse(kind)
    if not support.is_admissible():
        raise ValueError("support is not admissible")
    n1 = np.array([net.n1 for net in coll], float)
    n2 = np.array([net.n2 for net in coll], float)
    q1m = support.s1.sum(axis=1)
    q2m = support.s2.sum(axis=1)
    if kind is ModelKind.SEP:
        return Penalty(
            pen_pi=float(((q1m - 1) * np.log(n1)).sum()),
            pen_rho=float(((q2m - 1) * np.log(n2)).sum()),
            pen_alpha=float((q1m * q2m * np.log(n1 * n2)).sum()),
        )
    q1, q2 = support.q1, support.q2
    if kind.free_rows:
        pen_pi, pen_s1 = float(((q1m - 1) * np.log(n1)).sum()), _support_prior(support.s1)
    else:
        pen_pi, pen_s1 = (q1 - 1) * math.log(n1.sum()), 0.0
    if kind.free_cols:
        pen_rho, pen_s2 = float(((q2m - 1) * np.log(n2)).sum()), _support_prior(support.s2)
    else:
        pen_rho, pen_s2 = (q2 - 1) * math.log(n2.sum()), 0.0
    pen_alpha = int(support.active_pairs().sum()) * math.log(n_max_entries(coll))
    return Penalty(pen_pi, pen_rho, pen_alpha, pen_s1, pen_s2)


def count_params(kind: ModelKind | str, q1: int, q2: int, support: SupportPair) -> int:
    """Number of free parameters of a model at the given support."""
    kind = ModelKind.parse(kind)
    if not support.is_admissible():
        raise ValueError("support is not admissible")
    if support.q1 != q1 or support.q2 != q2:
        raise ValueError("support does not match (q1, q2)")
    q1m = support.s1.sum(axis=1)
    q2m = support.s2.sum(axis=1)
    if kind is ModelKind.SEP:
        return int(((q1m - 1) + (q2m - 1) + q1m * q2m).sum())
    n_pi = int((q1m - 1).sum()) if kind.free_rows else q1 - 1
    n_rho = int((q2m - 1).sum()) if kind.free_cols else q2 - 1
    return n_pi + n_rho + int(support.active_pairs().sum())


def bicl(coll: NetworkCollection, result: FitResult) -> float:
    """ELBO minus half the penalty of the fitted kind and support."""
    return float(result.elbo - 0.5 * compute_penalty(coll, result.kind, result.support).total)


def _scored(coll: NetworkCollection, result: FitResult) -> FitResult:
    return result.with_bicl(bicl(coll, result))


# --- options and results -------------------------------------------------------


@dataclass(frozen=True)
class SelectOptions:
    max_ge: int = 10
    max_mw: int = 3
    depth: int = 1
    # Many cheap restarts beat few fully converged E-steps at every sweep.
    fit: FitOptions = FitOptions(n_init=8, max_inner=1)
    # Refits tried per round of the support search before giving up.
    support_trials: int = 4
    # Merge candidates (closest pairs) tried when building merge warm starts.
    merge_pairs: int = 3
    max_q1: int | None = None
    max_q2: int | None = None

    def __post_init__(self):
        if self.max_ge < 1 or self.max_mw < 1 or self.depth < 1:
            raise ValueError("max_ge, max_mw and depth must be at least 1")


@dataclass(frozen=True, eq=False)
class SelectionResult:
    best: FitResult
    grid: dict
    kind: ModelKind
    history: tuple = ()

    @property
    def bicl(self) -> float:
        return float(self.best.bicl)

    @property
    def chosen_q(self) -> tuple[int, int]:
        return self.best.q1, self.best.q2

    @property
    def chosen_support(self) -> SupportPair:
        return self.best.support

    def memberships(self):
        return map_memberships(self.best)

    def grid_rows(self, coll: NetworkCollection) -> list[dict]:
        rows = []
        for (q1, q2), res in sorted(self.grid.items()):
            pen = compute_penalty(coll, res.kind, res.support)
            rows.append({"q1": q1, "q2": q2, "kind": self.kind.value, "bicl": res.bicl, "elbo": res.elbo, **pen.as_dict()})
        return rows


@dataclass(frozen=True, eq=False)
class SepSelection:
    """Independent per-network selections; the score is the sum of their BIC-L."""

    parts: tuple[SelectionResult, ...]
    kind: ModelKind = ModelKind.SEP

    @property
    def bicl(self) -> float:
        return float(sum(p.bicl for p in self.parts))

    @property
    def chosen_q(self) -> list[tuple[int, int]]:
        return [p.chosen_q for p in self.parts]

    def memberships(self):
        rows, cols = [], []
        for p in self.parts:
            z, w = p.memberships()
            rows.append(z[0])
            cols.append(w[0])
        return rows, cols


# --- warm starts -----------------------------------------------------------------


def _profiles(coll: NetworkCollection, state: VariationalState, side: int) -> list[np.ndarray]:
    """Per-node connection rates towards each block of the other side."""
    out = []
    for net, t1, t2 in zip(coll, state.tau1, state.tau2):
        if side == 1:
            num, den = net.x_obs @ t2, net.mask @ t2
        else:
            num, den = net.x_obs.T @ t1, net.mask.T @ t1
        with np.errstate(invalid="ignore", divide="ignore"):
            prof = np.where(den > 0, num / np.where(den > 0, den, 1), net.observed_mean)
        out.append(prof)
    return out


def _insert_block(tau: np.ndarray, moved: np.ndarray, block: int) -> np.ndarray:
    t = np.hstack([tau, np.zeros((tau.shape[0], 1))])
    t[moved, -1] = t[moved, block]
    t[moved, block] = 0.0
    return t


def split_states(coll: NetworkCollection, result: FitResult, side: int, seed: int = 0) -> list[tuple[VariationalState, SupportPair]]:
    """One warm start per splittable block of ``side``, adding a new last block.

    Nodes whose MAP block is the split block are pooled across networks and
    divided in two by k-means on their connection-rate profiles; the
    profiles live in the shared block space, so no cross-network alignment
    is needed.
    """
    rows, cols = map_memberships(result)
    labels = rows if side == 1 else cols
    profs = _profiles(coll, result.state, side)
    taus = result.state.tau1 if side == 1 else result.state.tau2
    q = taus[0].shape[1]
    out = []
    for block in range(q):
        members = [np.flatnonzero(lab == block) for lab in labels]
        n_members = sum(len(mm) for mm in members)
        if n_members < 2:
            continue
        feats = np.vstack([p[mm] for p, mm in zip(profs, members)])
        if np.ptp(feats, axis=0).max() <= 0:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            km = KMeans(n_clusters=2, n_init=3, random_state=derive_seed(seed, "split", side, block) % (2**31)).fit(feats)
        split = km.labels_
        if split.min() == split.max():
            continue
        new_taus, pos = [], 0
        for t, mm in zip(taus, members):
            moved = mm[split[pos: pos + len(mm)] == 1]
            pos += len(mm)
            new_taus.append(_insert_block(t, moved, block))
        s1, s2 = result.support.s1, result.support.s2
        if side == 1:
            state = VariationalState(tuple(new_taus), result.state.tau2)
            sup = SupportPair(np.hstack([s1, s1[:, [block]]]), s2)
        else:
            state = VariationalState(result.state.tau1, tuple(new_taus))
            sup = SupportPair(s1, np.hstack([s2, s2[:, [block]]]))
        out.append((state, sup))
    return out


def merge_states(result: FitResult, side: int, n_pairs: int = 3) -> list[tuple[VariationalState, SupportPair]]:
    """Warm starts merging the ``n_pairs`` closest blocks of ``side`` (by connectivity profile)."""
    p = result.params
    alpha = p.alpha.mean(axis=0) if p.alpha.ndim == 3 else p.alpha
    prof = alpha if side == 1 else alpha.T
    q = prof.shape[0]
    if q < 2:
        return []
    pairs = sorted(
        ((float(((prof[a] - prof[b]) ** 2).sum()), a, b) for a in range(q) for b in range(a + 1, q)),
    )[:n_pairs]
    taus = result.state.tau1 if side == 1 else result.state.tau2
    s = result.support.s1 if side == 1 else result.support.s2
    out = []
    for _, a, b in pairs:
        keep = [k for k in range(q) if k != b]
        new_taus = []
        for t in taus:
            t = t.copy()
            t[:, a] += t[:, b]
            new_taus.append(t[:, keep])
        s_new = s.copy()
        s_new[:, a] |= s_new[:, b]
        s_new = s_new[:, keep]
        if side == 1:
            out.append((VariationalState(tuple(new_taus), result.state.tau2), SupportPair(s_new, result.support.s2)))
        else:
            out.append((VariationalState(result.state.tau1, tuple(new_taus)), SupportPair(result.support.s1, s_new)))
    return out


# --- support search --------------------------------------------------------------


def search_support(
    coll: NetworkCollection,
    kind: ModelKind | str,
    q1: int,
    q2: int,
    opts: SelectOptions = SelectOptions(),
    init: FitResult | None = None,
) -> tuple[SupportPair, FitResult]:
    """Greedy pruning of the support matrices by BIC-L.

    Starting from ``init`` (or a fit at full support), each round proposes
    removing the populated (network, block) cells with the least fitted
    mass, refits warm, and accepts the first proposal that raises BIC-L.
    Only the free side(s) of ``kind`` are searched.
    """
    kind = ModelKind.parse(kind)
    if not (kind.free_rows or kind.free_cols):
        raise ValueError(f"{kind.value} model has fixed all-ones supports")
    if init is None:
        init = fit(coll, kind, q1, q2, SupportPair.full(coll.M, q1, q2), opts.fit)
    cur = _scored(coll, init)
    sides = [s for s, free in ((1, kind.free_rows), (2, kind.free_cols)) if free]
    rounds = 0
    while True:
        cands = []
        for side in sides:
            s = cur.support.s1 if side == 1 else cur.support.s2
            taus = cur.state.tau1 if side == 1 else cur.state.tau2
            for m in range(coll.M):
                for q in np.flatnonzero(s[m]):
                    if s[m].sum() <= 1 or s[:, q].sum() <= 1:
                        continue
                    cands.append((float(taus[m][:, q].sum()), side, m, int(q)))
        cands.sort()
        accepted = False
        for _, side, m, q in cands[: opts.support_trials]:
            sup = cur.support.with_cell(side, m, q, False)
            try:
                trial = run_vem(coll, kind, sup, cur.state, replace(opts.fit, seed=derive_seed(opts.fit.seed, "support", rounds)))
            except FitError:
                continue
            if not np.isfinite(trial.elbo):
                continue
            trial = _scored(coll, trial)
            if trial.bicl > cur.bicl + SCORE_SLACK:
                cur, accepted = trial, True
                break
        rounds += 1
        if not accepted:
            break
    cur = canonicalize(cur)
    return cur.support, cur


# --- block-number search -------------------------------------------------------------


def _better(a: FitResult, b: FitResult | None) -> bool:
    """Strictly higher BIC-L, ties broken toward fewer blocks then fewer row blocks."""
    if b is None:
        return True
    if a.bicl > b.bicl + SCORE_SLACK:
        return True
    if a.bicl < b.bicl - SCORE_SLACK:
        return False
    return (a.q1 + a.q2, a.q1) < (b.q1 + b.q2, b.q1)


class _Search:
    def __init__(self, coll: NetworkCollection, kind: ModelKind, opts: SelectOptions,
                 progress: Callable[[str], None] | None = None):
        self.coll, self.kind, self.opts = coll, kind, opts
        self.grid: dict[tuple[int, int], FitResult] = {}
        self.history: list = []
        self.n_fits = 0
        self.progress = progress
        # Iid fits at visited points, used as extra starts for kinds with free
        # proportions so that those never lose the aligned shared solution.
        self.companion: dict[tuple[int, int], FitResult] = {}
        self.cap1 = min(net.n1 for net in coll)
        self.cap2 = min(net.n2 for net in coll)
        if opts.max_q1:
            self.cap1 = min(self.cap1, opts.max_q1)
        if opts.max_q2:
            self.cap2 = min(self.cap2, opts.max_q2)

    def legal(self, q) -> bool:
        return 1 <= q[0] <= self.cap1 and 1 <= q[1] <= self.cap2

    def warm_from(self, q, splits: bool = True, merges: bool = True) -> list[tuple[VariationalState, SupportPair]]:
        """Warm starts for grid point ``q`` built from already fitted neighbors."""
        out = []
        q1, q2 = q
        for src, side in (((q1 - 1, q2), 1), ((q1, q2 - 1), 2)):
            if splits and src in self.grid:
                out += split_states(self.coll, self.grid[src], side, seed=derive_seed(self.opts.fit.seed, *q))
        for src, side in (((q1 + 1, q2), 1), ((q1, q2 + 1), 2)):
            if merges and src in self.grid:
                out += merge_states(self.grid[src], side, self.opts.merge_pairs)
        return out

    def visit(self, q, cold: bool = False, splits: bool = True, merges: bool = True) -> FitResult | None:
        """Fit grid point ``q`` from neighbor warm starts (plus spectral starts when cold).

        The grid keeps the better of the new and any previous fit at ``q``.
        """
        q1, q2 = q
        warm = self.warm_from(q, splits, merges)
        fopts = self.opts.fit
        if not cold and q in self.grid:
            fopts = replace(fopts, n_init=0)
        if not warm and fopts.n_init == 0:
            return self.grid.get(q)
        if not cold and warm and q not in self.grid:
            fopts = replace(fopts, n_init=min(fopts.n_init, 1))
        fopts = replace(fopts, seed=derive_seed(fopts.seed, "point", q1, q2, self.n_fits))
        self.n_fits += 1
        inits = [s for s, _ in warm]
        full = SupportPair.full(self.coll.M, q1, q2)
        try:
            if self.kind is not ModelKind.IID and self.coll.M > 1 and q not in self.companion:
                self.companion[q] = fit(self.coll, ModelKind.IID, q1, q2, full, fopts, init_states=inits)
                inits.append(self.companion[q].state)
            res = fit(self.coll, self.kind, q1, q2, full, fopts, init_states=inits)
        except (FitError, ValueError):
            return self.grid.get(q)
        res = _scored(self.coll, res)
        if (self.kind.free_rows or self.kind.free_cols) and (q1 > 1 or q2 > 1) and self.coll.M > 1:
            _, res = search_support(self.coll, self.kind, q1, q2, replace(self.opts, fit=fopts), init=res)
        self.history.append((q1, q2, res.bicl))
        if self.progress:
            self.progress(f"{self.kind.value} ({q1},{q2}) bicl={res.bicl:.3f}")
        old = self.grid.get(q)
        if old is None or res.bicl > old.bicl + SCORE_SLACK:
            self.grid[q] = res
        return self.grid[q]

    def best(self) -> FitResult:
        best = None
        for res in self.grid.values():
            if _better(res, best):
                best = res
        return best

    def greedy(self, start) -> None:
        if not self.legal(start):
            return
        cur = self.grid.get(start) or self.visit(start, cold=True)
        if cur is None:
            return
        step = 0
        while step < self.opts.max_ge:
            q = (cur.q1, cur.q2)
            cands = [(q[0] + 1, q[1]), (q[0], q[1] + 1), (q[0] - 1, q[1]), (q[0], q[1] - 1)]
            found = None
            for c in cands:
                if not self.legal(c):
                    continue
                res = self.grid.get(c) or self.visit(c)
                if res is not None and _better(res, found):
                    found = res
            if found is None or not found.bicl > cur.bicl + SCORE_SLACK:
                break
            cur = found
            step += 1

    def window(self) -> None:
        d = self.opts.depth
        center = self.best()
        for _ in range(self.opts.max_mw):
            c1, c2 = center.q1, center.q2
            pts = [(a, b) for a in range(c1 - d, c1 + d + 1) for b in range(c2 - d, c2 + d + 1) if self.legal((a, b))]
            before = {k: v.bicl for k, v in self.grid.items()}
            for q in sorted(pts, key=lambda p: (p[0] + p[1], p[0])):
                self.visit(q, merges=False)
            for q in sorted(pts, key=lambda p: (-(p[0] + p[1]), -p[0])):
                self.visit(q, splits=False)
            new = self.best()
            slack = self.opts.fit.tol * abs(new.bicl)
            changed = any(k not in before or v.bicl > before[k] + slack for k, v in self.grid.items())
            if (new.q1, new.q2) == (c1, c2) and not changed:
                break
            center = new


def select_blocks(
    coll: NetworkCollection,
    kind: ModelKind | str,
    opts: SelectOptions = SelectOptions(),
    progress: Callable[[str], None] | None = None,
) -> SelectionResult:
    """Choose (Q1, Q2), and the supports for free kinds, by maximizing BIC-L.

    ``kind=SEP`` is not handled here; see :func:`select_sep`.
    """
    kind = ModelKind.parse(kind)
    if kind is ModelKind.SEP:
        raise ValueError("use select_sep for the separate model")
    search = _Search(coll, kind, opts, progress)
    for start in ((1, 2), (2, 1)):
        search.greedy(start)
    if not search.grid:
        raise FitError("every fit failed at the starting points")
    search.window()
    return SelectionResult(search.best(), dict(search.grid), kind, tuple(search.history))


def select_sep(coll: NetworkCollection, opts: SelectOptions = SelectOptions(),
               progress: Callable[[str], None] | None = None) -> SepSelection:
    """Independent single-network selections, one per network."""
    parts = []
    for m in range(coll.M):
        sub = coll.subset([m])
        parts.append(select_blocks(sub, ModelKind.IID, replace(opts, fit=replace(opts.fit, seed=derive_seed(opts.fit.seed, "sep", m))), progress))
    return SepSelection(tuple(parts))


def select(coll: NetworkCollection, kind: ModelKind | str, opts: SelectOptions = SelectOptions(), progress=None):
    kind = ModelKind.parse(kind)
    if kind is ModelKind.SEP:
        return select_sep(coll, opts, progress)
    return select_blocks(coll, kind, opts, progress)


# --- structure comparison ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StructureComparison:
    table: list
    results: dict = field(default_factory=dict)

    @property
    def preferred(self) -> ModelKind:
        return self.table[0][0]

    @property
    def shared(self) -> bool:
        """True when some joint model beats the separate fits."""
        sep = self.results[ModelKind.SEP].bicl
        return any(r.bicl > sep for k, r in self.results.items() if k is not ModelKind.SEP)


def compare_structure(
    coll: NetworkCollection,
    kinds: Iterable[ModelKind | str] = (ModelKind.IID, ModelKind.PI, ModelKind.RHO, ModelKind.PIRHO),
    opts: SelectOptions = SelectOptions(),
    progress=None,
    n_jobs: int = 1,
) -> StructureComparison:
    """Rank model kinds by selected BIC-L; the separate model is always included.

    With ``n_jobs > 1`` the kinds are selected in a thread pool; results do
    not depend on ``n_jobs``.
    """
    kinds = [ModelKind.parse(k) for k in kinds]
    if not kinds:
        raise ValueError("no model kinds given")
    if ModelKind.SEP not in kinds:
        kinds.append(ModelKind.SEP)
    kinds = list(dict.fromkeys(kinds))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = dict(zip(kinds, pool.map(lambda k: select(coll, k, opts, progress), kinds)))
    else:
        results = {k: select(coll, k, opts, progress) for k in kinds}
    order = {k: i for i, k in enumerate(ModelKind)}
    table = sorted(((k, r.bicl) for k, r in results.items()), key=lambda t: (-t[1], order[t[0]]))
    return StructureComparison(table, results)


def preferred_kind(results: dict) -> ModelKind:
    order = {k: i for i, k in enumerate(ModelKind)}
    return sorted(results.items(), key=lambda kv: (-kv[1].bicl, order[kv[0]]))[0][0]


__all__: Sequence[str] = (
    "Penalty",
    "SelectOptions",
    "SelectionResult",
    "SepSelection",
    "StructureComparison",
    "bicl",
    "compare_structure",
    "compute_penalty",
    "count_params",
    "merge_states",
    "n_max_entries",
    "search_support",
    "select",
    "select_blocks",
    "select_sep",
    "split_states",
)
