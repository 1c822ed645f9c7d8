import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmr import nn
from fedmr.structure import (
    CheckpointError,
    decompose,
    dumps_checkpoint,
    load_checkpoint,
    loads_checkpoint,
    reassemble,
    save_checkpoint,
)


def _models(K, seed=0, hidden=(4, 3)):
    return [nn.build_mlp(3, hidden, 2, seed=[seed, j]) for j in range(K)]


def _four_layer(K):
    # conv, pool, dense, dense: four parameterised layers in a CNN-like stack
    models = []
    for j in range(K):
        rng = np.random.default_rng(j)
        models.append(
            nn.LayeredModel(
                [nn.conv2d(1, 2, 2, rng=rng), nn.relu(), nn.maxpool2d(2), nn.flatten(),
                 nn.dense(8, 5, rng), nn.relu(), nn.dense(5, 3, rng), nn.softmax()]
            )
        )
    return models


def _block_multiset(models):
    return Counter(
        (k, name, arr.tobytes())
        for m in models
        for k, layer in enumerate(m.layers)
        for name, arr in layer.params.items()
    )


def test_single_model_roundtrip():
    (m,) = _models(1)
    (back,) = reassemble(decompose([m]))
    assert back.equals(m)


def test_table_shape_four_layers_three_models():
    models = [nn.build_mlp(3, [4], 2, seed=j) for j in range(3)]  # dense relu dense softmax
    table = decompose(models)
    assert table.num_layers == 4
    assert all(len(lst) == 3 for lst in table.lists)
    assert sum(len(lst) for lst in table.lists) == 4 * 3


def test_parameterless_layers_hold_empty_blocks():
    table = decompose(_models(2))
    for lst, layer in zip(table.lists, table.template.layers):
        for block in lst:
            assert (len(block.params) == 0) == (layer.kind in ("relu", "softmax"))


def test_table_preserves_tensor_multiset():
    models = _models(5, hidden=(6, 6))
    table = decompose(models)
    in_table = Counter(
        (b.layer_index, name, arr.tobytes()) for lst in table.lists for b in lst for name, arr in b.params.items()
    )
    assert in_table == _block_multiset(models)


def test_entry_j_of_list_k_is_layer_k_of_model_j():
    models = _models(3)
    table = decompose(models)
    for k, lst in enumerate(table.lists):
        for j, block in enumerate(lst):
            assert block.source_model == j and block.layer_index == k
            for name, arr in block.params.items():
                assert arr is models[j].layers[k].params[name]


def test_rotating_every_list_swaps_two_models():
    # two models, two parameterised layers
    a = nn.LayeredModel([nn.dense(2, 2, np.random.default_rng(1)), nn.dense(2, 2, np.random.default_rng(2))])
    b = nn.LayeredModel([nn.dense(2, 2, np.random.default_rng(3)), nn.dense(2, 2, np.random.default_rng(4))])
    a2, b2 = reassemble(decompose([a, b]).permuted([[1, 0], [1, 0]]))
    assert a2.equals(b) and b2.equals(a)

    a3, b3 = reassemble(decompose([a, b]).permuted([[1, 0], [0, 1]]))
    assert a3.layers[0].params["weight"] is b.layers[0].params["weight"]
    assert a3.layers[1].params["weight"] is a.layers[1].params["weight"]
    assert b3.layers[0].params["weight"] is a.layers[0].params["weight"]
    assert b3.layers[1].params["weight"] is b.layers[1].params["weight"]


def test_recombined_model_carries_source_tags():
    # first recombined model takes its first three parameterised layers from models 1, 2 and K
    K = 4
    models = _four_layer(K)
    n = len(models[0].layers)
    perms = [list(range(K)) for _ in range(n)]
    conv, d1, d2 = 0, 4, 6
    perms[conv] = [0, 1, 2, 3]
    perms[d1] = [1, 0, 2, 3]
    perms[d2] = [K - 1, 1, 2, 0]
    table = decompose(models).permuted(perms)
    sources = table.sources()
    assert [sources[conv][0], sources[d1][0], sources[d2][0]] == [0, 1, K - 1]
    first = reassemble(table)[0]
    assert first.layers[d1].params["weight"] is models[1].layers[d1].params["weight"]
    assert first.layers[d2].params["weight"] is models[K - 1].layers[d2].params["weight"]


def test_architecture_mismatch_names_model():
    models = _models(3)
    models[2] = nn.build_mlp(3, [4, 4], 2, seed=9)
    with pytest.raises(nn.ArchitectureMismatchError) as info:
        decompose(models)
    assert info.value.model_index == 2


def test_malformed_tables_rejected():
    table = decompose(_models(3))
    with pytest.raises(ValueError):
        table.permuted([[0, 1, 2]])  # wrong number of lists
    with pytest.raises(ValueError):
        table.permuted([[0, 0, 1]] * table.num_layers)
    broken = type(table)(table.lists[:-1], table.template)
    with pytest.raises(ValueError):
        reassemble(broken)
    ragged = type(table)((table.lists[0][:2],) + table.lists[1:], table.template)
    with pytest.raises(ValueError):
        reassemble(ragged)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.data())
def test_shuffle_conserves_blocks_and_is_bijective(K, seed, data):
    models = _models(K, seed=seed, hidden=(3,))
    table = decompose(models)
    perms = [data.draw(st.permutations(range(K))) for _ in range(table.num_layers)]
    shuffled = table.permuted(perms)
    out = reassemble(shuffled)
    assert _block_multiset(out) == _block_multiset(models)
    for k, src in enumerate(shuffled.sources()):
        assert sorted(src) == list(range(K))
        assert src == list(perms[k])
    assert [m.equals(o) for m, o in zip(models, reassemble(decompose(models)))] == [True] * K


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    for model in (nn.build_mlp(5, [7, 3], 4, seed=1), nn.build_cnn((1, 10, 10), 3, seed=2)):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        assert load_checkpoint(path).equals(model)


def test_checkpoint_layout():
    w = np.array([[1.0, 2.0]])
    model = nn.LayeredModel([nn.Layer("dense", {"weight": w, "bias": np.array([0.5])},
                                      {"fan_in": 2, "fan_out": 1}), nn.softmax()])
    arch = b"dense(fan_in=2,fan_out=1)|softmax"
    expected = (
        b"FEDMRCK1"
        + struct.pack("<I", len(arch)) + arch
        + struct.pack("<I", 2)
        + struct.pack("<I", 2)
        + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0)
        + struct.pack("<II", 1, 1) + struct.pack("<d", 0.5)
        + struct.pack("<I", 0)
    )
    assert dumps_checkpoint(model) == expected


def test_checkpoint_errors():
    blob = dumps_checkpoint(nn.build_mlp(2, [2], 2, seed=0))
    with pytest.raises(CheckpointError, match="bad magic"):
        loads_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        loads_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(blob + b"\0")
