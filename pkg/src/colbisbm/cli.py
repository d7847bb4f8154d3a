"""Command-line interface: fit, select, partition, predict, simulate."""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import shutil
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .emission import EmissionKind
from .network import ModelKind, NetworkCollection, load_collection, write_collection
from .partition import exhaustive_partition, recursive_partition
from .predict import Degradation, degrade, roc_auc, score_matrix
from .selection import SelectOptions, SepSelection, bicl, compare_structure, select
from .serialize import _clean, dump_json, result_from_dict, result_to_dict
from .simulate import Design, SimDesign, sample_collection
from .vem import FitOptions, SupportPair, fit


class _Outputs:
    """Tracks files written by a command so a failure leaves nothing behind."""

    def __init__(self, directory: Path):
        self.dir = Path(directory)
        self.created_dir = not self.dir.exists()
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.paths.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.paths:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        if self.created_dir and self.dir.exists():
            shutil.rmtree(self.dir, ignore_errors=True)


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "scikit-learn"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _fit_options(args) -> FitOptions:
    return FitOptions(tol=args.tol, seed=args.seed, n_init=args.restarts)


def _select_options(args) -> SelectOptions:
    base = SelectOptions()
    return SelectOptions(
        max_ge=args.max_ge,
        max_mw=args.max_mw,
        depth=args.depth,
        fit=replace(base.fit, tol=args.tol, seed=args.seed, n_init=args.restarts),
    )


def _load(args) -> NetworkCollection:
    coll = load_collection(args.manifest)
    if args.emission:
        coll = NetworkCollection(coll.networks, EmissionKind.parse(args.emission))
    return coll


def _model_dict(sel, coll: NetworkCollection) -> dict:
    if isinstance(sel, SepSelection):
        parts = [result_to_dict(p.best, coll.subset([m])) for m, p in enumerate(sel.parts)]
        return {"kind": "sep", "bicl": sel.bicl, "parts": parts}
    return result_to_dict(sel.best, coll)


def _grid_rows(sel, coll: NetworkCollection) -> list[dict]:
    if isinstance(sel, SepSelection):
        rows = []
        for m, p in enumerate(sel.parts):
            for r in p.grid_rows(coll.subset([m])):
                rows.append({"network": coll.names[m], **r, "kind": "sep"})
        return rows
    return [{"network": "", **r} for r in sel.grid_rows(coll)]


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        if not np.isfinite(v):
            raise ValueError("non-finite value in output")
        return repr(v)
    return v


# --- commands -------------------------------------------------------------


def cmd_fit(args, out: _Outputs) -> dict:
    coll = _load(args)
    kind = ModelKind.parse(args.kind)
    res = fit(coll, kind, args.q1, args.q2, SupportPair.full(coll.M, args.q1, args.q2), _fit_options(args))
    res = res.with_bicl(bicl(coll, res))
    dump_json(result_to_dict(res, coll), out.path("model.json"))
    return {"elbo": res.elbo, "bicl": res.bicl}


def cmd_select(args, out: _Outputs) -> dict:
    coll = _load(args)
    opts = _select_options(args)
    fields = ["network", "q1", "q2", "kind", "bicl", "elbo", "pen_pi", "pen_rho", "pen_alpha", "pen_s1", "pen_s2", "penalty"]
    if args.compare:
        kinds = [ModelKind.parse(k) for k in args.compare.split(",")]
        comp = compare_structure(coll, kinds, opts, n_jobs=args.threads)
        rows = []
        for k, sel in comp.results.items():
            rows += _grid_rows(sel, coll)
            dump_json(_model_dict(sel, coll), out.path(f"model_{k.value}.json"))
        _write_csv(out.path("grid.csv"), rows, fields)
        _write_csv(
            out.path("comparison.csv"),
            [{"kind": k.value, "bicl": b} for k, b in comp.table],
            ["kind", "bicl"],
        )
        return {"preferred": comp.preferred.value, "shared_structure": comp.shared}
    sel = select(coll, args.kind, opts)
    _write_csv(out.path("grid.csv"), _grid_rows(sel, coll), fields)
    dump_json(_model_dict(sel, coll), out.path("model.json"))
    return {"bicl": sel.bicl, "chosen_q": sel.chosen_q}


def cmd_partition(args, out: _Outputs) -> dict:
    coll = _load(args)
    kind = ModelKind.parse(args.kind)
    if kind is ModelKind.SEP:
        raise ValueError("partitioning needs a joint model kind")
    opts = _select_options(args)
    part = (exhaustive_partition if args.exhaustive else recursive_partition)(coll, kind, opts)
    groups = []
    for g, sel in zip(part.groups, part.selections):
        groups.append(
            {
                "networks": [coll.names[m] for m in g],
                "q1": sel.chosen_q[0],
                "q2": sel.chosen_q[1],
                "bicl": sel.bicl,
                "alpha": sel.best.params.alpha,
                "support": sel.best.support.to_dict(),
            }
        )
    dump_json({"kind": kind.value, "score": part.score, "trajectory": list(part.trajectory), "groups": groups},
              out.path("partition.json"))
    return {"score": part.score, "n_groups": len(part.groups)}


def _score_lookup(model: dict, coll: NetworkCollection):
    """Function (m, i, j) -> score for a model file (joint or per-network)."""
    cache: dict[int, np.ndarray] = {}
    if "parts" in model:
        results = [result_from_dict(p) for p in model["parts"]]
        get = lambda m: score_matrix(results[m], 0)  # noqa: E731
    else:
        res = result_from_dict(model)
        get = lambda m: score_matrix(res, m)  # noqa: E731

    def score(m, i, j):
        if m not in cache:
            cache[m] = get(m)
        return float(cache[m][i, j])

    return score


def cmd_predict(args, out: _Outputs) -> dict:
    coll = _load(args)
    if args.p_mis is not None:
        return _predict_experiment(args, coll, out)
    if not args.model or not args.targets:
        raise ValueError("predict needs --model and --targets, or --p-mis for a degradation run")
    model = json.loads(Path(args.model).read_text())
    n_models = len(model["parts"]) if "parts" in model else len(model["networks"])
    if n_models != coll.M:
        raise ValueError("model and manifest disagree on the number of networks")
    score = _score_lookup(model, coll)
    names = {n: m for m, n in enumerate(coll.names)}
    rows = []
    with open(args.targets, newline="") as fh:
        for rec in csv.DictReader(fh):
            name = rec["network"]
            if name not in names:
                raise ValueError(f"unknown network {name!r} in targets")
            m = names[name]
            net = coll[m]
            try:
                i = net.row_labels.index(rec["row"])
                j = net.col_labels.index(rec["col"])
            except ValueError:
                raise ValueError(f"unknown node in target {rec}") from None
            rows.append({"network": name, "row": rec["row"], "col": rec["col"], "score": score(m, i, j)})
    _write_csv(out.path("predictions.csv"), rows, ["network", "row", "col", "score"])
    return {"n_targets": len(rows)}


def _predict_experiment(args, coll: NetworkCollection, out: _Outputs) -> dict:
    names = coll.names
    m = names.index(args.network) if args.network else 0
    mode = Degradation.parse(args.mode)
    degraded, truth = degrade(coll[m], mode, args.p_mis, seed=args.seed)
    dcoll = coll.replace(m, degraded)
    sel = select(dcoll, args.kind, _select_options(args))
    if isinstance(sel, SepSelection):
        scores = score_matrix(sel.parts[m].best, 0)
    else:
        scores = score_matrix(sel.best, m)
    net = coll[m]
    rows = []
    for i, j, v in truth:
        rows.append({"network": names[m], "row": net.row_labels[i], "col": net.col_labels[j],
                     "score": float(scores[i, j]), "truth": v, "label": int(v > 0)})
    _write_csv(out.path("predictions.csv"), rows, ["network", "row", "col", "score", "truth", "label"])
    labels = [r["label"] for r in rows]
    auc = roc_auc([r["score"] for r in rows], labels) if 0 < sum(labels) < len(labels) else None
    dump_json(_model_dict(sel, dcoll), out.path("model.json"))
    return {"auc": auc, "n_altered": len(rows), "mode": mode.value}


def cmd_simulate(args, out: _Outputs) -> dict:
    design = SimDesign(
        Design.parse(args.design),
        epsilon=args.epsilon,
        epsilon_rho=args.epsilon_rho,
        variant=ModelKind.parse(args.variant),
        shared_sigma=args.shared_sigma,
        n_nodes=args.n_nodes,
    )
    sim = sample_collection(design, seed=args.seed)
    out.dir.mkdir(parents=True, exist_ok=True)
    before = set(out.dir.iterdir())
    try:
        write_collection(sim.collection, out.dir, fmt=args.format)
    finally:
        out.paths += sorted(set(out.dir.iterdir()) - before)
    dump_json({"design": design.design.value, "epsilon": args.epsilon, "seed": args.seed, **sim.truth_dict()},
              out.path("truth.json"))
    return {"n_networks": sim.collection.M}


COMMANDS = {
    "fit": cmd_fit,
    "select": cmd_select,
    "partition": cmd_partition,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colbisbm", description="Joint block models for collections of bipartite networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_manifest=True):
        if needs_manifest:
            p.add_argument("--manifest", required=True, help="collection manifest (JSON)")
            p.add_argument("--emission", choices=[e.value for e in EmissionKind], help="override the manifest emission")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for independent fits")

    def tuning(p):
        p.add_argument("--kind", choices=[k.value for k in ModelKind], default="iid")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--restarts", type=int, default=SelectOptions().fit.n_init, help="spectral restarts per grid point")
        p.add_argument("--max-ge", type=int, default=10)
        p.add_argument("--max-mw", type=int, default=3)
        p.add_argument("--depth", type=int, default=1)

    p = sub.add_parser("fit", help="fit at fixed block numbers")
    common(p)
    p.add_argument("--kind", choices=[k.value for k in ModelKind], default="iid")
    p.add_argument("--q1", type=int, required=True)
    p.add_argument("--q2", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=5)

    p = sub.add_parser("select", help="choose block numbers (and supports) by BIC-L")
    common(p)
    tuning(p)
    p.add_argument("--compare", help="comma-separated kinds to rank against the separate model")

    p = sub.add_parser("partition", help="split the collection into groups sharing a structure")
    common(p)
    tuning(p)
    p.add_argument("--exhaustive", action="store_true", help="score every set partition (small collections)")

    p = sub.add_parser("predict", help="score dyads from a model, or run a degradation experiment")
    common(p)
    tuning(p)
    p.add_argument("--model", help="model JSON written by fit or select")
    p.add_argument("--targets", help="CSV with columns network,row,col")
    p.add_argument("--p-mis", type=float, help="degrade one network by this fraction and score the altered dyads")
    p.add_argument("--mode", choices=["links", "dyads"], default="dyads")
    p.add_argument("--network", help="name of the network to degrade (default: the first)")

    p = sub.add_parser("simulate", help="sample a planted collection")
    common(p, needs_manifest=False)
    p.add_argument("--design", required=True, choices=[d.value for d in Design if d is not Design.CUSTOM])
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--epsilon-rho", type=float)
    p.add_argument("--variant", choices=[k.value for k in ModelKind if k is not ModelKind.SEP], default="iid")
    p.add_argument("--shared-sigma", action="store_true")
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--format", choices=["dense", "edgelist"], default="dense")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tol", 1.0) <= 0:
        parser.error("--tol must be positive")
    out = _Outputs(Path(args.out))
    start = time.time()
    try:
        summary = COMMANDS[args.command](args, out)
        log = {
            "command": args.command,
            "arguments": {k: v for k, v in vars(args).items() if k != "command"},
            "seed": args.seed,
            "versions": _versions(),
            "wall_time_s": round(time.time() - start, 3),
            "summary": _clean(summary),
        }
        out.path("run_log.json").write_text(json.dumps(log, indent=1) + "\n")
    except Exception as exc:  # noqa: BLE001
        out.cleanup()
        print(f"colbisbm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
