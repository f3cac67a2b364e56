"""Desk-scale federated learning simulator for a miniature Vision Transformer.

Trains a small attention-based classifier across simulated clients holding
non-identically distributed data, under five strategies: local-only SGD,
plain federated averaging, proximal regularisation over all parameters,
aggregation that keeps normalisation parameters client-local, and
attention-alignment (the proximal pull restricted to the encoder's
attention and MLP weights).
"""

from .autodiff import (
    CongruenceError,
    GradTape,
    ParamSet,
    ShapeError,
    Tensor,
    backward,
    cross_entropy,
    finite_diff_grad,
    layer_norm,
    matmul,
    relu,
    sgd_step,
    softmax_rows,
)
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import (
    Dataset,
    PartitionSpec,
    SyntheticSpec,
    dirichlet_partition,
    generate_synthetic,
    heterogeneity_stats,
    load_idx,
    train_test_split,
)
from .experiment import run_experiment, run_experiment_detailed
from .federation import (
    ClientState,
    ClientUpdate,
    RoundReport,
    ServerState,
    StrategyConfig,
    StrategyKind,
    aggregate,
    alignment_penalty,
    local_objective_grad,
    local_train,
    run_round,
)
from .metrics import (
    ClientMetrics,
    FairnessSummary,
    accuracy,
    fairness_summary,
    lowest_global_accuracy,
    weighted_mean,
)
from .model import (
    ViTConfig,
    forward,
    forward_batch,
    init_model,
    load_checkpoint,
    mhsa,
    mhsa_flops,
    patchify,
    save_checkpoint,
    transformer_block,
)

__version__ = "0.1.0"
