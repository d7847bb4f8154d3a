"""Synthetic collections from planted colBiSBM designs, and clustering agreement metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .emission import EmissionKind
from .network import BipartiteNetwork, ModelKind, NetworkCollection

MAX_MEMBERSHIP_DRAWS = 100

_EPS_ALPHA_PATTERN = np.array(
    [[3, 2, 1, -1], [2, 2, -1, 1], [1, -1, 1, 2], [-1, 1, 2, 0]], dtype=float
)
_PIRHO_ALPHA = np.array([[0.73, 0.57, 0.41], [0.57, 0.57, 0.09], [0.41, 0.09, 0.41]])
_MODULAR_ALPHA = np.array([[0.9, 0.05, 0.05], [0.05, 0.2, 0.05], [0.05, 0.05, 0.8]])
_NESTED_ALPHA = np.array([[0.9, 0.65, 0.1], [0.35, 0.15, 0.05], [0.1, 0.05, 0.05]])
_TRIPLE_PATTERNS = {
    "as": np.array([[1, -0.5, -0.5], [-0.5, 1, -0.5], [-0.5, -0.5, 1]]),
    "dis": np.array([[-0.5, 1, 1], [1, -0.5, 1], [1, 1, -0.5]]),
    "cp": np.array([[1.5, 1, 0.5], [1, 0.5, 0], [0.5, 0, -0.5]]),
}
TRIPLE_STRUCTURES = ("as", "dis", "cp")


class Design(str, Enum):
    EPS_ALPHA = "eps_alpha"
    EPS_PIRHO = "eps_pirho"
    TRANSFER_MODULAR = "transfer_modular"
    TRANSFER_NESTED = "transfer_nested"
    PARTITION_TRIPLE = "partition_triple"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, value) -> "Design":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown design {value!r}") from None


def build_alpha(design: Design | str, epsilon: float = 0.0, structure: str = "as") -> np.ndarray:
    """Connectivity matrix of a named design at structure strength ``epsilon``.

    ``structure`` picks the assortative ("as"), disassortative ("dis") or
    core-periphery ("cp") matrix of the partitioning design.
    """
    design = Design.parse(design)
    if design is Design.EPS_ALPHA:
        alpha = 0.25 + epsilon * _EPS_ALPHA_PATTERN
    elif design is Design.EPS_PIRHO:
        alpha = _PIRHO_ALPHA.copy()
    elif design is Design.TRANSFER_MODULAR:
        alpha = _MODULAR_ALPHA.copy()
    elif design is Design.TRANSFER_NESTED:
        alpha = _NESTED_ALPHA.copy()
    elif design is Design.PARTITION_TRIPLE:
        if structure not in _TRIPLE_PATTERNS:
            raise ValueError(f"unknown structure {structure!r}")
        alpha = 0.3 + epsilon * _TRIPLE_PATTERNS[structure]
    else:
        raise ValueError("custom designs carry their own connectivity matrices")
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError(f"epsilon={epsilon} puts connection probabilities outside [0, 1]")
    return alpha


@dataclass(frozen=True)
class SimDesign:
    """A planted design; permutations are drawn at sampling time.

    ``variant`` selects which proportions get a per-network permutation in
    the transfer and partitioning designs (Iid: none, Pi: rows, Rho:
    columns, PiRho: both). ``epsilon_rho`` is the column strength of the
    proportion design and defaults to ``epsilon``. With ``shared_sigma``
    the row and column permutations coincide. ``custom`` holds one
    ``(alpha, pi, rho, n1, n2)`` tuple per network for ``Design.CUSTOM``.
    """

    design: Design
    epsilon: float = 0.0
    epsilon_rho: float | None = None
    variant: ModelKind = ModelKind.IID
    shared_sigma: bool = False
    n_nodes: int | None = None
    n_per_group: int = 10
    sizes: tuple[int, ...] = (20, 120)
    custom: tuple = ()
    groups: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "design", Design.parse(self.design))
        object.__setattr__(self, "variant", ModelKind.parse(self.variant))


@dataclass(frozen=True, eq=False)
class Simulation:
    collection: NetworkCollection
    row_labels: list[np.ndarray]
    col_labels: list[np.ndarray]
    groups: np.ndarray | None
    alphas: list[np.ndarray]
    pis: list[np.ndarray]
    rhos: list[np.ndarray]
    structures: list[str] = field(default_factory=list)

    def truth_dict(self) -> dict:
        return {
            "row_labels": [z.tolist() for z in self.row_labels],
            "col_labels": [w.tolist() for w in self.col_labels],
            "row_support": [(p > 0).astype(int).tolist() for p in self.pis],
            "col_support": [(r > 0).astype(int).tolist() for r in self.rhos],
            "groups": None if self.groups is None else self.groups.tolist(),
            "alpha": [a.tolist() for a in self.alphas],
            "pi": [p.tolist() for p in self.pis],
            "rho": [r.tolist() for r in self.rhos],
        }


def _network_specs(design: SimDesign, rng: np.random.Generator):
    """Per-network (alpha, pi, rho, n1, n2, group, structure) for one replicate."""
    d = design.design
    eps = design.epsilon
    perm = lambda v: np.asarray(v, float)[rng.permutation(len(v))]  # noqa: E731
    if d is Design.EPS_ALPHA:
        n = design.n_nodes or 240
        alpha = build_alpha(d, eps)
        s1 = rng.permutation(4)
        s2 = s1 if design.shared_sigma else rng.permutation(4)
        pi1 = np.array([0.2, 0.4, 0.4, 0.0])[s1]
        rho2 = np.array([0.0, 1 / 3, 1 / 3, 1 / 3])[s2]
        even = np.full(4, 0.25)
        return [(alpha, pi1, even, n, n, 0, ""), (alpha, even, rho2, n, n, 0, "")]
    if d is Design.EPS_PIRHO:
        n = design.n_nodes or 90
        eps_r = eps if design.epsilon_rho is None else design.epsilon_rho
        if not (0 <= eps <= 1 / 3 and 0 <= eps_r <= 1 / 3):
            raise ValueError("proportion shifts must lie in [0, 1/3]")
        alpha = build_alpha(d)
        s1 = rng.permutation(3)
        s2 = s1 if design.shared_sigma else rng.permutation(3)
        third = np.full(3, 1 / 3)
        up = lambda e: np.array([1 / 3 - e, 1 / 3, 1 / 3 + e])  # noqa: E731
        down = lambda e: np.array([1 / 3 + e, 1 / 3, 1 / 3 - e])  # noqa: E731
        return [
            (alpha, third, third, n, n, 0, ""),
            (alpha, up(eps)[s1], up(eps_r)[s2], n, n, 0, ""),
            (alpha, down(eps)[s1], down(eps_r)[s2], n, n, 0, ""),
        ]
    if d in (Design.TRANSFER_MODULAR, Design.TRANSFER_NESTED):
        alpha = build_alpha(d)
        base = np.array([0.5, 0.3, 0.2])
        out = []
        for n in design.sizes:
            p = perm(base) if design.variant.free_rows else base.copy()
            if design.variant.free_cols:
                r = p.copy() if (design.shared_sigma and design.variant.free_rows) else perm(base)
            else:
                r = base.copy()
            out.append((alpha, p, r, n, n, 0, ""))
        return out
    if d is Design.PARTITION_TRIPLE:
        n = design.n_nodes or 75
        base = np.array([0.2, 0.3, 0.5])
        out = []
        for g, s in enumerate(TRIPLE_STRUCTURES):
            alpha = build_alpha(d, eps, s)
            for _ in range(design.n_per_group):
                p = perm(base) if design.variant.free_rows else base.copy()
                r = perm(base) if design.variant.free_cols else base.copy()
                out.append((alpha, p, r, n, n, g, s))
        return out
    if not design.custom:
        raise ValueError("custom design needs per-network specifications")
    groups = design.groups or (0,) * len(design.custom)
    return [
        (np.asarray(a, float), np.asarray(p, float), np.asarray(r, float), int(n1), int(n2), g, "")
        for (a, p, r, n1, n2), g in zip(design.custom, groups)
    ]


def _draw_memberships(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if abs(p.sum() - 1) > 1e-9 or np.any(p < 0):
        raise ValueError("block proportions must be a probability vector")
    needed = np.flatnonzero(p > 0)
    for _ in range(MAX_MEMBERSHIP_DRAWS):
        z = rng.choice(p.size, size=n, p=p)
        if np.all(np.bincount(z, minlength=p.size)[needed] > 0):
            return z
    return z


def sample_network(alpha, pi, rho, n1, n2, rng, name="") -> tuple[BipartiteNetwork, np.ndarray, np.ndarray]:
    alpha = np.asarray(alpha, float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("connection probabilities must lie in [0, 1]")
    z = _draw_memberships(np.asarray(pi, float), n1, rng)
    w = _draw_memberships(np.asarray(rho, float), n2, rng)
    x = (rng.random((n1, n2)) < alpha[np.ix_(z, w)]).astype(np.int64)
    return BipartiteNetwork(x, name=name), z, w


def sample_collection(design: SimDesign, seed: int = 0) -> Simulation:
    """Draw one replicate of ``design``; permutations are redrawn per call."""
    rng = np.random.default_rng(seed)
    specs = _network_specs(design, rng)
    nets, zs, ws = [], [], []
    for m, (alpha, pi, rho, n1, n2, _, _) in enumerate(specs):
        net, z, w = sample_network(alpha, pi, rho, n1, n2, rng, name=f"net{m + 1}")
        nets.append(net)
        zs.append(z)
        ws.append(w)
    groups = np.array([s[5] for s in specs]) if design.design in (Design.PARTITION_TRIPLE, Design.CUSTOM) else None
    return Simulation(
        collection=NetworkCollection(tuple(nets), EmissionKind.BERNOULLI),
        row_labels=zs,
        col_labels=ws,
        groups=groups,
        alphas=[s[0] for s in specs],
        pis=[s[1] for s in specs],
        rhos=[s[2] for s in specs],
        structures=[s[6] for s in specs],
    )


# --- metrics ---------------------------------------------------------------


def ari(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Adjusted Rand index; 1 when both labelings are the same partition."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise ValueError("label vectors differ in length")
    if a.size < 2:
        raise ValueError("need at least two labels")
    return float(adjusted_rand_score(a, b))


def pooled_ari(labels_a: Sequence[Sequence[int]], labels_b: Sequence[Sequence[int]]) -> float:
    """ARI of the labelings concatenated over networks (block names must agree across networks)."""
    if len(labels_a) != len(labels_b):
        raise ValueError("different numbers of networks")
    for x, y in zip(labels_a, labels_b):
        if len(x) != len(y):
            raise ValueError("label vectors differ in length")
    return ari(np.concatenate([np.asarray(x) for x in labels_a]), np.concatenate([np.asarray(y) for y in labels_b]))
