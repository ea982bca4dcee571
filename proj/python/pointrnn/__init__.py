"""Point recurrent networks for moving point cloud prediction."""

from ._core import (
    ConfigError,
    ContractError,
    Error,
    FormatError,
    Model,
    NumericError,
    SolverError,
    ball_query,
    chamfer,
    emd,
    farthest_point_sample,
    knn,
    load_mnist_images,
    preset,
    read_pcseq,
    synthesize,
    write_pcseq,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "Error",
    "FormatError",
    "Model",
    "NumericError",
    "SolverError",
    "ball_query",
    "chamfer",
    "emd",
    "farthest_point_sample",
    "knn",
    "load_mnist_images",
    "preset",
    "read_pcseq",
    "synthesize",
    "write_pcseq",
]
