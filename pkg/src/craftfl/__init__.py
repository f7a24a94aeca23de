"""craftfl: conflict-resolved aggregation for federated learning.

The package couples a pure projection kernel (minimum-norm corrections onto
client-alignment constraints) with a deterministic desk-scale federated
learning simulator: layer-aware aggregators, a from-scratch MLP with exact
backpropagation, Dirichlet partitioning, and a CLI for reproducible runs.
"""

__version__ = "0.1.0"

from .aggregators import (
    AggregatorState,
    ClientUpdate,
    LayerLayout,
    build_targets,
    count_conflicts,
    craft_aggregate,
    fedavg_aggregate,
    make_aggregator,
)
from .data import Dataset, Partition, dirichlet_partition, load_idx, synthetic_task
from .errors import (
    ConfigError,
    CraftflError,
    IdxFormatError,
    InvalidInputError,
    NumericalError,
)
from .models import Mlp, MlpSpec, ParamVector, client_delta
from .projection import (
    DEFAULT_EPS,
    DEFAULT_RANK_TOL,
    ProjectionResult,
    config_direction,
    craft_correct,
    gram_solve,
    normalize,
)
from .simulation import (
    AggregatorConfig,
    DatasetConfig,
    ExperimentConfig,
    FederatedRun,
    RoundRecord,
    Seeds,
    evaluate,
    run_experiment,
    sample_clients,
    summarize,
)

__all__ = [
    "__version__",
    "AggregatorConfig",
    "AggregatorState",
    "ClientUpdate",
    "ConfigError",
    "CraftflError",
    "DatasetConfig",
    "Dataset",
    "DEFAULT_EPS",
    "DEFAULT_RANK_TOL",
    "ExperimentConfig",
    "FederatedRun",
    "IdxFormatError",
    "InvalidInputError",
    "LayerLayout",
    "Mlp",
    "MlpSpec",
    "NumericalError",
    "ParamVector",
    "Partition",
    "ProjectionResult",
    "RoundRecord",
    "Seeds",
    "build_targets",
    "client_delta",
    "config_direction",
    "count_conflicts",
    "craft_aggregate",
    "craft_correct",
    "dirichlet_partition",
    "evaluate",
    "fedavg_aggregate",
    "gram_solve",
    "load_idx",
    "make_aggregator",
    "normalize",
    "run_experiment",
    "sample_clients",
    "summarize",
    "synthetic_task",
]
