"""Bipartite networks, collections, and their on-disk formats.

A collection is described by a JSON manifest::

    {"emission": "bernoulli",
     "networks": [{"name": "bristol", "format": "edgelist", "path": "bristol.csv"},
                  {"name": "leeds", "format": "dense", "path": "leeds.tsv",
                   "row_labels": "leeds.rows.txt", "col_labels": "leeds.cols.txt"}]}

Edge lists are CSV files with a ``row,col,value`` header; unlisted dyads are
observed zeros and a ``NA`` value marks a missing dyad. Dense files are TSV
matrices where the cell ``NA`` marks a missing dyad. Paths are resolved
relative to the manifest.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .emission import EmissionKind, log_factorial_sum

NA_TOKEN = "NA"


class CollectionError(ValueError):
    """Raised for malformed networks, collections, or manifests."""


class ModelKind(str, Enum):
    SEP = "sep"
    IID = "iid"
    PI = "pi"
    RHO = "rho"
    PIRHO = "pirho"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "").replace("_", ""))
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}") from None

    @property
    def free_rows(self) -> bool:
        """Row proportions vary per network (and may vanish)."""
        return self in (ModelKind.PI, ModelKind.PIRHO)

    @property
    def free_cols(self) -> bool:
        return self in (ModelKind.RHO, ModelKind.PIRHO)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BipartiteNetwork:
    """One bi-adjacency matrix with its missing-dyad mask.

    ``values[i, j]`` is only meaningful where ``observed[i, j]`` is true;
    masked cells are stored as 0.
    """

    values: np.ndarray
    observed: np.ndarray | None = None
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise CollectionError(f"network {self.name!r} is empty or not a matrix")
        observed = np.ones(values.shape, dtype=bool) if self.observed is None else np.asarray(self.observed, dtype=bool)
        if observed.shape != values.shape:
            raise CollectionError("values and observed mask differ in shape")
        if np.any(values[observed] < 0):
            raise CollectionError("interaction values must be nonnegative")
        if np.issubdtype(values.dtype, np.floating):
            if np.any(values[observed] != np.round(values[observed])):
                raise CollectionError("interaction values must be integers")
        values = np.where(observed, values, 0).astype(np.int64)
        n1, n2 = values.shape
        rows = tuple(self.row_labels) or tuple(f"r{i + 1}" for i in range(n1))
        cols = tuple(self.col_labels) or tuple(f"c{j + 1}" for j in range(n2))
        if len(rows) != n1 or len(cols) != n2:
            raise CollectionError(
                f"network {self.name!r}: labels ({len(rows)}, {len(cols)}) do not match matrix {values.shape}"
            )
        if len(set(rows)) != n1 or len(set(cols)) != n2:
            raise CollectionError(f"network {self.name!r}: duplicate node labels")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "observed", _readonly(observed))
        object.__setattr__(self, "row_labels", rows)
        object.__setattr__(self, "col_labels", cols)

    @property
    def n1(self) -> int:
        return self.values.shape[0]

    @property
    def n2(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @cached_property
    def fully_observed(self) -> bool:
        return bool(self.observed.all())

    @cached_property
    def x_obs(self) -> np.ndarray:
        """Values as float with masked cells zeroed (read-only)."""
        return _readonly(self.values.astype(float))

    @cached_property
    def mask(self) -> np.ndarray:
        return _readonly(self.observed.astype(float))

    @cached_property
    def log_factorial(self) -> float:
        return log_factorial_sum(self.values.astype(float), self.observed)

    @cached_property
    def observed_mean(self) -> float:
        n = self.observed.sum()
        return float(self.values[self.observed].sum() / n) if n else 0.0

    def transpose(self) -> "BipartiteNetwork":
        return BipartiteNetwork(self.values.T, self.observed.T, self.col_labels, self.row_labels, self.name)

    def with_data(self, values: np.ndarray, observed: np.ndarray) -> "BipartiteNetwork":
        return BipartiteNetwork(values, observed, self.row_labels, self.col_labels, self.name)


def density(net: BipartiteNetwork) -> float:
    """Share of observed dyads carrying a nonzero interaction."""
    n_obs = int(net.observed.sum())
    if n_obs == 0:
        raise CollectionError(f"network {net.name!r} has no observed dyad")
    return int(np.count_nonzero(net.values[net.observed])) / n_obs


@dataclass(frozen=True, eq=False)
class NetworkCollection:
    networks: tuple[BipartiteNetwork, ...]
    emission: EmissionKind = EmissionKind.BERNOULLI

    def __post_init__(self):
        nets = tuple(self.networks)
        if not nets:
            raise CollectionError("a collection needs at least one network")
        emission = EmissionKind.parse(self.emission)
        if emission is EmissionKind.BERNOULLI:
            for net in nets:
                if np.any(net.values > 1):
                    raise CollectionError(f"network {net.name!r} has non-binary values under Bernoulli emission")
        object.__setattr__(self, "networks", nets)
        object.__setattr__(self, "emission", emission)

    def __len__(self) -> int:
        return len(self.networks)

    def __iter__(self) -> Iterator[BipartiteNetwork]:
        return iter(self.networks)

    def __getitem__(self, m: int) -> BipartiteNetwork:
        return self.networks[m]

    @property
    def M(self) -> int:
        return len(self.networks)

    @property
    def names(self) -> list[str]:
        return [net.name or f"net{m + 1}" for m, net in enumerate(self.networks)]

    def subset(self, indices: Sequence[int]) -> "NetworkCollection":
        return NetworkCollection(tuple(self.networks[i] for i in indices), self.emission)

    def replace(self, m: int, net: BipartiteNetwork) -> "NetworkCollection":
        nets = list(self.networks)
        nets[m] = net
        return NetworkCollection(tuple(nets), self.emission)

    def transpose(self) -> "NetworkCollection":
        return NetworkCollection(tuple(n.transpose() for n in self.networks), self.emission)


# --- reading -------------------------------------------------------------


def _read_labels(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    return [line.rstrip("\n") for line in path.read_text().splitlines() if line.strip()]


def _parse_value(token: str, where: str) -> float | None:
    token = token.strip()
    if token == NA_TOKEN:
        return None
    try:
        v = float(token)
    except ValueError:
        raise CollectionError(f"{where}: cannot parse value {token!r}") from None
    if v < 0 or v != round(v):
        raise CollectionError(f"{where}: value {token!r} is not a nonnegative integer")
    return v


def read_dense(path: Path, row_labels=None, col_labels=None, name: str = "") -> BipartiteNetwork:
    if not path.exists():
        raise FileNotFoundError(f"network file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        for k, line in enumerate(csv.reader(fh, delimiter="\t")):
            if not line or all(not c.strip() for c in line):
                continue
            rows.append([_parse_value(c, f"{path}:{k + 1}") for c in line])
    if not rows or not rows[0]:
        raise CollectionError(f"network file {path} is empty")
    if len({len(r) for r in rows}) != 1:
        raise CollectionError(f"{path}: ragged matrix")
    observed = np.array([[c is not None for c in r] for r in rows], dtype=bool)
    values = np.array([[0.0 if c is None else c for c in r] for r in rows])
    return BipartiteNetwork(values, observed, tuple(row_labels or ()), tuple(col_labels or ()), name)


def read_edgelist(path: Path, row_labels=None, col_labels=None, name: str = "") -> BipartiteNetwork:
    if not path.exists():
        raise FileNotFoundError(f"network file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:3]] != ["row", "col", "value"]:
            raise CollectionError(f"{path}: expected header row,col,value")
        records = [(r["row"].strip(), r["col"].strip(), r["value"]) for r in reader]
    if row_labels is None:
        row_labels = list(dict.fromkeys(r for r, _, _ in records))
    if col_labels is None:
        col_labels = list(dict.fromkeys(c for _, c, _ in records))
    if not row_labels or not col_labels:
        raise CollectionError(f"network file {path} is empty")
    ri = {lab: i for i, lab in enumerate(row_labels)}
    ci = {lab: j for j, lab in enumerate(col_labels)}
    values = np.zeros((len(row_labels), len(col_labels)))
    observed = np.ones_like(values, dtype=bool)
    for k, (r, c, v) in enumerate(records):
        if r not in ri or c not in ci:
            raise CollectionError(f"{path}:{k + 2}: node ({r}, {c}) not in label files")
        val = _parse_value(v, f"{path}:{k + 2}")
        if val is None:
            observed[ri[r], ci[c]] = False
            values[ri[r], ci[c]] = 0
        else:
            values[ri[r], ci[c]] = val
    return BipartiteNetwork(values, observed, tuple(row_labels), tuple(col_labels), name)


def load_collection(manifest_path) -> NetworkCollection:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CollectionError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    base = manifest_path.parent
    try:
        emission = EmissionKind.parse(spec.get("emission", "bernoulli"))
    except ValueError as exc:
        raise CollectionError(str(exc)) from None
    entries = spec.get("networks") or []
    if not entries:
        raise CollectionError("manifest lists no networks")
    nets = []
    for k, entry in enumerate(entries):
        name = entry.get("name") or f"net{k + 1}"
        fmt = entry.get("format", "dense")
        if "path" not in entry:
            raise CollectionError(f"network {name!r} has no path")
        rows = _read_labels(base / entry["row_labels"]) if entry.get("row_labels") else None
        cols = _read_labels(base / entry["col_labels"]) if entry.get("col_labels") else None
        if fmt == "dense":
            net = read_dense(base / entry["path"], rows, cols, name)
        elif fmt == "edgelist":
            net = read_edgelist(base / entry["path"], rows, cols, name)
        else:
            raise CollectionError(f"network {name!r}: unknown format {fmt!r}")
        nets.append(net)
    return NetworkCollection(tuple(nets), emission)


# --- writing -------------------------------------------------------------


def write_dense(net: BipartiteNetwork, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for i in range(net.n1):
            writer.writerow(
                [str(int(v)) if o else NA_TOKEN for v, o in zip(net.values[i], net.observed[i])]
            )


def write_edgelist(net: BipartiteNetwork, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "value"])
        ii, jj = np.nonzero((net.values != 0) | ~net.observed)
        for i, j in zip(ii, jj):
            v = str(int(net.values[i, j])) if net.observed[i, j] else NA_TOKEN
            writer.writerow([net.row_labels[i], net.col_labels[j], v])


def write_collection(coll: NetworkCollection, directory, fmt: str = "dense", manifest_name: str = "manifest.json") -> Path:
    """Write every network plus label files and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, net in zip(coll.names, coll.networks):
        data = f"{name}.tsv" if fmt == "dense" else f"{name}.csv"
        (write_dense if fmt == "dense" else write_edgelist)(net, directory / data)
        (directory / f"{name}.rows.txt").write_text("\n".join(net.row_labels) + "\n")
        (directory / f"{name}.cols.txt").write_text("\n".join(net.col_labels) + "\n")
        entries.append(
            {"name": name, "format": fmt, "path": data,
             "row_labels": f"{name}.rows.txt", "col_labels": f"{name}.cols.txt"}
        )
    manifest = directory / manifest_name
    manifest.write_text(json.dumps({"emission": coll.emission.value, "networks": entries}, indent=2) + "\n")
    return manifest
