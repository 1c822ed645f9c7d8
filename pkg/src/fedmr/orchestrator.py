"""End-to-end federated training runs.

:func:`run_experiment` keeps a list of K models. Each round it samples K
clients, trains model ``i`` on client ``i`` of the sample, then applies the
round operator chosen by the algorithm:

=============  ==============================================================
algorithm      operator after local training
=============  ==============================================================
``fedavg``     sample-weighted average, copied to all K slots
``fedprox``    same as fedavg; local training adds the proximal term
``fedmr``      layer-wise recombination (aggregation while
               ``round <= pretrain_rounds``)
``fedmr_no_mr``  random whole-model dispatch
=============  ==============================================================

Learning curves are scored on the uniform average of the current list.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ClientShard, Dataset, PartitionSpec
from .federated import (
    LocalTrainConfig,
    ModelList,
    dispatch_no_recombine,
    fedavg_aggregate,
    global_model_gen,
    model_recombine,
    train_local,
)
from .nn import LayeredModel, build_cnn, build_mlp, evaluate

ALGORITHMS = ("fedmr", "fedavg", "fedprox", "fedmr_no_mr")
STAGE_PRETRAIN = "pretrain"
STAGE_RECOMBINE = "recombine"

# sub-stream tags mixed into the data seed
DATASET_STREAM, PARTITION_STREAM, BATCH_STREAM = 0, 1, 2


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 0
    sampling: int = 0
    recombine: int = 0


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    cnn_hidden: int = 64

    def build(self, input_shape: Sequence[int], num_classes: int, seed) -> LayeredModel:
        if self.kind == "mlp":
            return build_mlp(int(np.prod(input_shape)), self.hidden, num_classes, seed)
        if self.kind == "cnn":
            return build_cnn(input_shape, num_classes, self.channels, self.kernel, self.cnn_hidden, seed=seed)
        raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedmr"
    num_clients: int = 100
    participation_fraction: float = 0.1
    rounds: int = 100
    pretrain_rounds: int = 0
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    seeds: Seeds = field(default_factory=Seeds)
    identical_init: bool = True
    eval_every: int = 1
    aggregation: str = "samples"

    @property
    def num_participants(self) -> int:
        return max(1, math.floor(self.participation_fraction * self.num_clients + 0.5))

    def problems(self) -> list[tuple[str, str]]:
        """``(field, message)`` pairs for every inconsistency; empty when valid."""
        out = []
        if self.algorithm not in ALGORITHMS:
            out.append(("algorithm", f"must be one of {', '.join(ALGORITHMS)}"))
        if self.num_clients < 1:
            out.append(("num_clients", "must be at least 1"))
        if not 0.0 < self.participation_fraction <= 1.0:
            out.append(("participation_fraction", "must lie in (0, 1]"))
        if self.rounds < 0:
            out.append(("rounds", "must be non-negative"))
        if self.pretrain_rounds < 0:
            out.append(("pretrain_rounds", "must be non-negative"))
        if self.pretrain_rounds > self.rounds:
            out.append(("pretrain_rounds", f"{self.pretrain_rounds} exceeds rounds={self.rounds}"))
        if self.pretrain_rounds and self.algorithm != "fedmr":
            out.append(("pretrain_rounds", "only meaningful for algorithm=fedmr"))
        if self.eval_every < 1:
            out.append(("eval_every", "must be at least 1"))
        if self.aggregation not in ("samples", "uniform"):
            out.append(("aggregation", "must be 'samples' or 'uniform'"))
        if self.partition.num_clients != self.num_clients:
            out.append(("partition.num_clients", f"{self.partition.num_clients} != num_clients={self.num_clients}"))
        if self.algorithm == "fedprox" and self.local.prox_mu <= 0:
            out.append(("local.prox_mu", "fedprox needs prox_mu > 0"))
        if self.algorithm != "fedprox" and self.local.prox_mu > 0:
            out.append(("local.prox_mu", "proximal term is only used by fedprox"))
        if self.model.kind not in ("mlp", "cnn"):
            out.append(("model.kind", "must be 'mlp' or 'cnn'"))
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(f"{k}: {msg}" for k, msg in problems))

    def operator_for(self, round_index: int) -> str:
        if self.algorithm in ("fedavg", "fedprox"):
            return "aggregate"
        if self.algorithm == "fedmr_no_mr":
            return "dispatch"
        return "aggregate" if round_index <= self.pretrain_rounds else "recombine"

    def stage_for(self, round_index: int) -> str:
        return STAGE_PRETRAIN if self.operator_for(round_index) == "aggregate" else STAGE_RECOMBINE


@dataclass(frozen=True)
class RoundRecord:
    round: int
    stage: str
    clients: tuple[int, ...]
    accuracy: float | None
    loss: float | None
    local_losses: tuple[float, ...]
    permutations: tuple[tuple[int, ...], ...] | None
    transfers_down: int
    transfers_up: int
    wall_time: float = field(default=0.0, compare=False)

    @property
    def model_transfers(self) -> int:
        return self.transfers_down + self.transfers_up

    def to_json(self) -> dict:
        d = asdict(self)
        d["clients"] = list(self.clients)
        d["local_losses"] = list(self.local_losses)
        d["permutations"] = None if self.permutations is None else [list(p) for p in self.permutations]
        d["model_transfers"] = self.model_transfers
        return d


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    global_model: LayeredModel
    model_list: ModelList


def sample_clients(N: int, K: int, seed: int, round_index: int) -> list[int]:
    """K distinct client ids, uniform without replacement, sorted ascending."""
    if not 1 <= K <= N:
        raise ValueError(f"cannot select K={K} clients from N={N}")
    rng = np.random.default_rng([int(seed), int(round_index)])
    return sorted(int(c) for c in rng.choice(N, size=K, replace=False))


def initial_models(cfg: ExperimentConfig, input_shape, num_classes: int) -> list[LayeredModel]:
    K = cfg.num_participants
    if cfg.identical_init:
        m = cfg.model.build(input_shape, num_classes, [cfg.seeds.init, 0])
        return [m] * K
    return [cfg.model.build(input_shape, num_classes, [cfg.seeds.init, i]) for i in range(K)]


def run_experiment(
    cfg: ExperimentConfig,
    shards: Sequence[ClientShard],
    test: Dataset,
    workers: int = 1,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> ExperimentResult:
    """Train for ``cfg.rounds`` rounds and return the records and final global model.

    ``workers > 1`` trains the selected clients on a thread pool; results
    are merged in slot order, so the outcome does not depend on it.
    """
    cfg.validate()
    if len(shards) != cfg.num_clients:
        raise ValueError(f"{len(shards)} shards for num_clients={cfg.num_clients}")
    if any(s.client_id != i for i, s in enumerate(shards)):
        raise ValueError("shards must be ordered by client_id 0..N-1")
    N, K = cfg.num_clients, cfg.num_participants
    input_shape = shards[0].data.xs.shape[1:]
    models = ModelList(initial_models(cfg, input_shape, test.num_classes), 0)
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            clients = sample_clients(N, K, cfg.seeds.sampling, r)

            def work(i: int, r=r, clients=clients, models=models):
                shard = shards[clients[i]]
                seed = [cfg.seeds.data, BATCH_STREAM, r, clients[i]]
                return train_local(models[i], shard, cfg.local, seed)

            results = list(pool.map(work, range(K)) if pool else map(work, range(K)))
            trained = [res.model for res in results]

            op = cfg.operator_for(r)
            perms = None
            if op == "aggregate":
                weights = [len(shards[c]) for c in clients] if cfg.aggregation == "samples" else None
                agg = fedavg_aggregate(trained, weights)
                models = ModelList([agg] * K, r)
            elif op == "recombine":
                models = model_recombine(ModelList(trained, r), [cfg.seeds.recombine, r])
                perms = models.sources
            else:
                models = dispatch_no_recombine(ModelList(trained, r), [cfg.seeds.recombine, r])
                perms = models.sources

            acc = loss = None
            if r % cfg.eval_every == 0 or r == cfg.rounds:
                acc, loss = evaluate(global_model_gen(models), test)
            record = RoundRecord(
                round=r,
                stage=cfg.stage_for(r),
                clients=tuple(clients),
                accuracy=acc,
                loss=loss,
                local_losses=tuple(res.loss for res in results),
                permutations=perms,
                transfers_down=K,
                transfers_up=K,
                wall_time=time.perf_counter() - t0,
            )
            records.append(record)
            if on_round is not None:
                on_round(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(records, global_model_gen(models), models)


# ---------------------------------------------------------------------------
# output


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_metrics_csv(records: Sequence[RoundRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "stage", "accuracy", "loss"])
        for rec in records:
            w.writerow([rec.round, rec.stage, _fmt(rec.accuracy), _fmt(rec.loss)])


def write_rounds_jsonl(records: Sequence[RoundRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
