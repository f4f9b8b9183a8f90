"""Deterministic federated-learning lab: optimal-transport permutation and
integration of bottleneck adapters around a frozen backbone."""

__version__ = "0.1.0"

from .data import Dataset, PartitionSpec, dirichlet_partition, gen_synthetic
from .errors import (
    ConfigError,
    DataError,
    FedpiaError,
    NumericError,
    ParseError,
    ShapeError,
)
from .fedsim import (
    DataConfig,
    ExperimentConfig,
    Federation,
    ModelConfig,
    RoundMetrics,
    benchmark_config,
    evaluate,
    run_experiment,
    spike_score,
)
from .model import (
    AdapterLayer,
    AdapterStack,
    Backbone,
    ClassifierHead,
    forward,
    init_model,
    loss_and_backward,
)
from .numerics import Rng, matmul, pairwise_euclidean, rng_normal
from .ot import (
    NeuronMeasure,
    TransportPlan,
    plan_to_alignment,
    solve_exact,
    solve_sinkhorn,
)
from .pia import (
    FusionConfig,
    align_stack,
    client_pia,
    dynamic_integrate,
    fedavg,
    server_pia,
)
