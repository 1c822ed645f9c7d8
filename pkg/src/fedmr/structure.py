"""Split models into per-layer parameter blocks and put them back together.

A :class:`LayerTable` holds one list per layer index. Entry ``j`` of list
``k`` is the ``k``-th layer of some model together with a tag naming which
input model it came from. Shuffling the lists and reassembling gives the
recombined models; parameterless layers travel as empty blocks so indices
stay aligned with the architecture.

The module also reads and writes the binary checkpoint format::

    magic      8 bytes  b"FEDMRCK1"
    arch_len   u32      length of the UTF-8 architecture id
    arch_id    bytes
    n_layers   u32
    per layer:
        n_params   u32
        per param (weight before bias):
            ndim   u32
            dims   ndim * u32
            data   prod(dims) * float64

All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .nn import (
    DTYPE,
    PARAM_NAMES,
    ArchitectureMismatchError,
    Layer,
    LayeredModel,
    model_from_architecture,
)

CHECKPOINT_MAGIC = b"FEDMRCK1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerBlock:
    layer_index: int
    source_model: int
    params: Mapping[str, np.ndarray]

    def key(self) -> tuple:
        """Hashable identity: layer index plus the exact bytes of each tensor."""
        return (
            self.layer_index,
            tuple((name, arr.shape, arr.tobytes()) for name, arr in sorted(self.params.items())),
        )


@dataclass(frozen=True)
class LayerTable:
    lists: tuple[tuple[LayerBlock, ...], ...]
    template: LayeredModel

    @property
    def num_layers(self) -> int:
        return len(self.lists)

    @property
    def num_models(self) -> int:
        return len(self.lists[0]) if self.lists else 0

    def sources(self) -> list[list[int]]:
        """``sources()[k][j]`` is the input model that slot ``j`` of layer ``k`` came from."""
        return [[block.source_model for block in lst] for lst in self.lists]

    def permuted(self, permutations: Sequence[Sequence[int]]) -> "LayerTable":
        """New table whose list ``k`` is ``[lists[k][p] for p in permutations[k]]``."""
        if len(permutations) != self.num_layers:
            raise ValueError(
                f"need {self.num_layers} permutations, got {len(permutations)}"
            )
        lists = []
        for k, (lst, perm) in enumerate(zip(self.lists, permutations)):
            if sorted(perm) != list(range(len(lst))):
                raise ValueError(f"layer {k}: {list(perm)} is not a permutation of 0..{len(lst) - 1}")
            lists.append(tuple(lst[p] for p in perm))
        return LayerTable(tuple(lists), self.template)


def check_compatible(models: Sequence[LayeredModel]) -> str:
    """Return the shared architecture id or raise naming the first divergent model."""
    if not models:
        raise ValueError("need at least one model")
    arch = models[0].architecture_id
    for j, m in enumerate(models[1:], start=1):
        if m.architecture_id != arch:
            raise ArchitectureMismatchError(j, arch, m.architecture_id)
    return arch


def decompose(models: Sequence[LayeredModel]) -> LayerTable:
    check_compatible(models)
    n = len(models[0].layers)
    lists = tuple(
        tuple(LayerBlock(k, j, m.layers[k].params) for j, m in enumerate(models))
        for k in range(n)
    )
    return LayerTable(lists, models[0])


def reassemble(table: LayerTable) -> list[LayeredModel]:
    """Model ``j`` takes layer ``k`` from ``table.lists[k][j]``."""
    template = table.template
    if table.num_layers != len(template.layers):
        raise ValueError(
            f"table has {table.num_layers} lists but the architecture has {len(template.layers)} layers"
        )
    K = table.num_models
    if K == 0:
        raise ValueError("table holds no models")
    models = []
    for j in range(K):
        layers = []
        for k, (lst, proto) in enumerate(zip(table.lists, template.layers)):
            if len(lst) != K:
                raise ValueError(f"list {k} has {len(lst)} entries, expected {K}")
            block = lst[j]
            if block.layer_index != k:
                raise ValueError(f"list {k} slot {j} holds a block for layer {block.layer_index}")
            layers.append(Layer(proto.kind, block.params, proto.hyper) if PARAM_NAMES[proto.kind] else proto)
        models.append(LayeredModel(tuple(layers)))
    return models


# ---------------------------------------------------------------------------
# checkpoints


def dumps_checkpoint(model: LayeredModel) -> bytes:
    buf = io.BytesIO()
    arch = model.architecture_id.encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        names = PARAM_NAMES[layer.kind]
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(layer.params[name], dtype="<f8")
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> LayeredModel:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    arch = bytes(take(u32())).decode("utf-8")
    try:
        skeleton = model_from_architecture(arch)
    except ValueError as exc:
        raise CheckpointError(f"bad architecture id: {exc}") from None
    n_layers = u32()
    if n_layers != len(skeleton.layers):
        raise CheckpointError(f"layer count {n_layers} does not match architecture ({len(skeleton.layers)})")
    arrays = []
    for i, layer in enumerate(skeleton.layers):
        n_params = u32()
        expected = layer.param_shapes()
        if n_params != len(expected):
            raise CheckpointError(f"layer {i}: expected {len(expected)} params, found {n_params}")
        for name in PARAM_NAMES[layer.kind]:
            ndim = u32()
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            if tuple(shape) != expected[name]:
                raise CheckpointError(f"layer {i}.{name}: shape {shape}, expected {expected[name]}")
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(take(8 * count), dtype="<f8").astype(DTYPE).reshape(shape)
            arrays.append(data)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    return skeleton.with_parameters(arrays)


def save_checkpoint(model: LayeredModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path: str | os.PathLike) -> LayeredModel:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
