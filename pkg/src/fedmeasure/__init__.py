"""Federated data measurements for decentralized data marketplaces.

A buyer summarizes its reference embeddings into a small projection query,
sellers answer with aggregate statistics, and scalar relevance/diversity
measures rank the sellers — no raw data changes hands. The package bundles
the measurement core, a TCP seller service with a decoy-query honesty
screen, a marketplace simulation harness, and an HTTP API/CLI front end.
"""

from .data import (
    EmbeddingSet,
    EmbeddingFormatError,
    MixtureSpec,
    corrupt,
    dirichlet_partition,
    gaussian_mixture,
    inject_duplicates,
    random_mixture_spec,
    read_embeddings,
    write_embeddings,
)
from .measures import (
    MeasureConfig,
    MeasureKind,
    MeasurementReport,
    QueryMatrix,
    compute_query,
    evaluate,
    seller_report,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet",
    "EmbeddingFormatError",
    "MixtureSpec",
    "MeasureConfig",
    "MeasureKind",
    "MeasurementReport",
    "QueryMatrix",
    "compute_query",
    "corrupt",
    "dirichlet_partition",
    "evaluate",
    "gaussian_mixture",
    "inject_duplicates",
    "random_mixture_spec",
    "read_embeddings",
    "seller_report",
    "write_embeddings",
    "__version__",
]
