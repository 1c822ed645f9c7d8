"""Federated learning simulation with layer-wise model recombination."""

__version__ = "0.1.0"

from .data import (
    ClientShard,
    Dataset,
    PartitionSpec,
    generate_synthetic,
    load_idx_images,
    partition,
    train_test_split,
)
from .federated import (
    LocalTrainConfig,
    ModelList,
    client_update,
    dispatch_no_recombine,
    fedavg_aggregate,
    global_model_gen,
    model_recombine,
)
from .nn import LayeredModel, build_cnn, build_mlp, evaluate, forward, loss_and_grad, sgd_step
from .orchestrator import ExperimentConfig, ModelSpec, RoundRecord, Seeds, run_experiment, sample_clients
from .structure import decompose, load_checkpoint, reassemble, save_checkpoint
