"""JSON round-trip for fitted models."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .emission import EmissionKind
from .network import ModelKind, NetworkCollection
from .vem import FitResult, ModelParams, SupportPair, VariationalState, map_memberships

FORMAT_VERSION = 1


def _clean(x):
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not np.isfinite(x):
            raise ValueError("refusing to serialize a non-finite number")
        return x
    return x


def result_to_dict(result: FitResult, coll: NetworkCollection) -> dict:
    rows, cols = map_memberships(result)
    p = result.params
    networks = []
    for m, net in enumerate(coll):
        networks.append(
            {
                "name": coll.names[m],
                "row_blocks": dict(zip(net.row_labels, rows[m].tolist())),
                "col_blocks": dict(zip(net.col_labels, cols[m].tolist())),
                "tau1": result.state.tau1[m],
                "tau2": result.state.tau2[m],
            }
        )
    return _clean(
        {
            "format_version": FORMAT_VERSION,
            "kind": p.kind.value,
            "emission": p.emission.value,
            "q1": result.q1,
            "q2": result.q2,
            "elbo": result.elbo,
            "bicl": result.bicl,
            "n_iterations": result.n_iterations,
            "converged": result.converged,
            "seed": result.seed,
            "params": {
                "pi": p.pi,
                "rho": p.rho,
                "alpha": p.alpha,
                "degenerate": p.degenerate if p.degenerate is not None else np.zeros(p.alpha.shape, bool),
            },
            "support": result.support.to_dict(),
            "networks": networks,
        }
    )


def result_from_dict(d: dict) -> FitResult:
    kind = ModelKind.parse(d["kind"])
    params = ModelParams(
        pi=np.asarray(d["params"]["pi"], float),
        rho=np.asarray(d["params"]["rho"], float),
        alpha=np.asarray(d["params"]["alpha"], float),
        kind=kind,
        emission=EmissionKind.parse(d["emission"]),
        degenerate=np.asarray(d["params"].get("degenerate", False), bool),
    )
    state = VariationalState(
        tuple(np.asarray(n["tau1"], float) for n in d["networks"]),
        tuple(np.asarray(n["tau2"], float) for n in d["networks"]),
    )
    support = SupportPair(np.asarray(d["support"]["s1"], bool), np.asarray(d["support"]["s2"], bool))
    return FitResult(
        params=params,
        state=state,
        support=support,
        elbo=float(d["elbo"]),
        n_iterations=int(d["n_iterations"]),
        converged=bool(d["converged"]),
        seed=int(d.get("seed", 0)),
        bicl=None if d.get("bicl") is None else float(d["bicl"]),
    )


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=1, sort_keys=False) + "\n")


def load_result(path: Path) -> tuple[FitResult, list[dict]]:
    """Read a model file; returns the fit and the per-network records (names, labels)."""
    d = json.loads(Path(path).read_text())
    return result_from_dict(d), d["networks"]
