"""Joint stochastic block models for collections of bipartite networks."""
from .emission import EmissionKind, log_density
from .network import (
    BipartiteNetwork,
    CollectionError,
    ModelKind,
    NetworkCollection,
    density,
    load_collection,
    write_collection,
)
from .partition import CollectionPartition, dissimilarity, exhaustive_partition, recursive_partition
from .predict import Degradation, degrade, predict_dyads, roc_auc, score_matrix
from .selection import (
    SelectOptions,
    SelectionResult,
    SepSelection,
    bicl,
    compare_structure,
    compute_penalty,
    count_params,
    select,
    select_blocks,
)
from .simulate import Design, SimDesign, ari, build_alpha, pooled_ari, sample_collection
from .vem import (
    FitOptions,
    FitResult,
    ModelParams,
    SupportPair,
    VariationalState,
    check_identifiability,
    e_step,
    elbo,
    fit,
    init_spectral,
    m_step,
    map_memberships,
)

__version__ = "0.1.0"

__all__ = [
    "EmissionKind",
    "log_density",
    "BipartiteNetwork",
    "CollectionError",
    "ModelKind",
    "NetworkCollection",
    "density",
    "load_collection",
    "write_collection",
    "CollectionPartition",
    "dissimilarity",
    "exhaustive_partition",
    "recursive_partition",
    "Degradation",
    "degrade",
    "predict_dyads",
    "roc_auc",
    "score_matrix",
    "SelectOptions",
    "SelectionResult",
    "SepSelection",
    "bicl",
    "compare_structure",
    "compute_penalty",
    "count_params",
    "select",
    "select_blocks",
    "Design",
    "SimDesign",
    "ari",
    "build_alpha",
    "pooled_ari",
    "sample_collection",
    "FitOptions",
    "FitResult",
    "ModelParams",
    "SupportPair",
    "VariationalState",
    "check_identifiability",
    "e_step",
    "elbo",
    "fit",
    "init_spectral",
    "m_step",
    "map_memberships",
]
