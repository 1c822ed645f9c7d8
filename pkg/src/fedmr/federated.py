"""Client-side training and the server-side round operators.

The server keeps a list of K models. After the selected clients train their
copies, one of these operators turns the uploaded models into the next
list:

* :func:`model_recombine` shuffles each layer index independently across
  the K models (FedMR),
* :func:`fedavg_aggregate` replaces every model with the parameter mean
  (FedAvg / FedProx),
* :func:`dispatch_no_recombine` only permutes whole models (the ablation
  without recombination).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientShard
from .nn import LayeredModel, init_optimizer, loss_and_grad, sgd_step
from .structure import check_compatible, decompose, reassemble


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 5
    batch_size: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be non-negative")


@dataclass(frozen=True)
class ModelList:
    """The server's K models between rounds.

    ``sources[k][j]`` records which previous slot model ``j`` took its layer
    ``k`` from, when the list was produced by a shuffling operator.
    """

    entries: tuple[LayeredModel, ...]
    round: int = 0
    sources: tuple[tuple[int, ...], ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        check_compatible(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> LayeredModel:
        return self.entries[i]


def _entries(models) -> tuple[LayeredModel, ...]:
    return models.entries if isinstance(models, ModelList) else tuple(models)


def _round_of(models) -> int:
    return models.round if isinstance(models, ModelList) else 0


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# client side


@dataclass(frozen=True)
class LocalResult:
    model: LayeredModel
    loss: float  # mean training loss over the final epoch
    steps: int


def train_local(model_in: LayeredModel, shard: ClientShard, cfg: LocalTrainConfig, seed) -> LocalResult:
    """Mini-batch SGD with momentum over ``shard`` for ``cfg.epochs`` passes.

    The velocity starts at zero on every call. With ``cfg.prox_mu > 0`` the
    gradient gains the proximal pull ``prox_mu * (w - w_in)`` towards the
    dispatched model.
    """
    data = shard.data if isinstance(shard, ClientShard) else shard
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    rng = _rng(seed)
    model = model_in
    state = init_optimizer(model, cfg.learning_rate, cfg.momentum)
    anchor = model_in.parameters() if cfg.prox_mu > 0 else None
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(model, data.xs[idx], data.ys[idx])
            if anchor is not None:
                grads = tuple(
                    g + cfg.prox_mu * (p - a)
                    for g, p, a in zip(grads, model.parameters(), anchor)
                )
            model, state = sgd_step(model, grads, state)
            epoch_loss += loss * len(idx)
            steps += 1
    return LocalResult(model, epoch_loss / n, steps)


def client_update(model_in: LayeredModel, shard: ClientShard, cfg: LocalTrainConfig, seed) -> LayeredModel:
    return train_local(model_in, shard, cfg, seed).model


# ---------------------------------------------------------------------------
# server side


def fisher_yates(K: int, rng: np.random.Generator) -> list[int]:
    perm = list(range(K))
    for i in range(K - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def draw_layer_permutations(num_layers: int, K: int, seed) -> list[list[int]]:
    """One independent uniform permutation of ``range(K)`` per layer index."""
    rng = _rng(seed)
    return [fisher_yates(K, rng) for _ in range(num_layers)]


def model_recombine(models, rng_seed) -> ModelList:
    """Shuffle every layer index across the K models.

    Output model ``j`` takes layer ``k`` from input model ``perm[k][j]``.
    Each input layer ends up in exactly one output model.
    """
    entries = _entries(models)
    check_compatible(entries)
    table = decompose(entries)
    perms = draw_layer_permutations(table.num_layers, len(entries), rng_seed)
    return apply_layer_permutations(models, perms)


def apply_layer_permutations(models, permutations: Sequence[Sequence[int]]) -> ModelList:
    entries = _entries(models)
    table = decompose(entries).permuted(permutations)
    return ModelList(
        tuple(reassemble(table)),
        _round_of(models),
        tuple(tuple(s) for s in table.sources()),
    )


def dispatch_no_recombine(models, rng_seed) -> ModelList:
    """Permute whole models; no layer mixing, no averaging."""
    entries = _entries(models)
    check_compatible(entries)
    perm = fisher_yates(len(entries), _rng(rng_seed))
    n_layers = len(entries[0].layers)
    return ModelList(
        tuple(entries[p] for p in perm),
        _round_of(models),
        tuple(tuple(perm) for _ in range(n_layers)),
    )


def fedavg_aggregate(models, weights: Sequence[float] | None = None) -> LayeredModel:
    """Parameter-wise weighted mean (uniform when ``weights`` is None)."""
    entries = _entries(models)
    check_compatible(entries)
    K = len(entries)
    if weights is None:
        coefs = [1.0 / K] * K
    else:
        w = [float(v) for v in weights]
        if len(w) != K:
            raise ValueError(f"{len(w)} weights for {K} models")
        if any(v < 0 or not np.isfinite(v) for v in w):
            raise ValueError("weights must be finite and non-negative")
        total = sum(w)
        if total <= 0:
            raise ValueError("weights must have a positive sum")
        coefs = [v / total for v in w]
    per_model = [m.parameters() for m in entries]
    averaged = []
    for i in range(len(per_model[0])):
        acc = coefs[0] * per_model[0][i]
        for c, params in zip(coefs[1:], per_model[1:]):
            acc = acc + c * params[i]
        averaged.append(acc)
    return entries[0].with_parameters(averaged)


def global_model_gen(models) -> LayeredModel:
    """Uniform average of the K models, for inference only."""
    entries = _entries(models)
    if not entries:
        raise ValueError("cannot build a global model from an empty list")
    check_compatible(entries)
    scale = 1.0 / len(entries)
    params = [m.parameters() for m in entries]
    averaged = []
    for column in zip(*params):
        total = scale * column[0]
        for p in column[1:]:
            total = total + scale * p
        averaged.append(total)
    return entries[0].with_parameters(averaged)
