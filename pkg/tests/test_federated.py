import itertools
from collections import Counter

import numpy as np
import pytest

from conftest import finite_difference_grads
from fedmr import nn
from fedmr.data import ClientShard, Dataset, generate_synthetic
from fedmr.federated import (
    LocalTrainConfig,
    ModelList,
    apply_layer_permutations,
    client_update,
    dispatch_no_recombine,
    draw_layer_permutations,
    fedavg_aggregate,
    global_model_gen,
    model_recombine,
    train_local,
)


def _shard(n=40, classes=3, features=4, seed=0, client_id=0):
    data = generate_synthetic(n, classes, num_features=features, seed=seed)
    return ClientShard(client_id, data, np.arange(n))


def _models(K, seed=0, hidden=(5,), d_in=4, classes=3):
    return [nn.build_mlp(d_in, hidden, classes, seed=[seed, j]) for j in range(K)]


def _one_param(value):
    return nn.LayeredModel([nn.Layer("dense", {"weight": np.array([[float(value)]]), "bias": np.zeros(1)},
                                     {"fan_in": 1, "fan_out": 1})])


def _blocks(models):
    return Counter(
        (k, name, arr.tobytes()) for m in models for k, layer in enumerate(m.layers) for name, arr in layer.params.items()
    )


# ---------------------------------------------------------------------------
# client update


def test_defaults():
    cfg = LocalTrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.prox_mu) == (5, 50, 0.01, 0.9, 0.0)


def test_zero_learning_rate_returns_input():
    model = _models(1)[0]
    out = client_update(model, _shard(), LocalTrainConfig(learning_rate=0.0), seed=1)
    assert out.equals(model)


def test_input_model_untouched():
    model = _models(1)[0]
    before = [p.copy() for p in model.parameters()]
    client_update(model, _shard(), LocalTrainConfig(learning_rate=0.1), seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.parameters()))


def test_zero_mu_matches_plain_training_bit_exactly():
    model = _models(1)[0]
    shard = _shard()
    plain = client_update(model, shard, LocalTrainConfig(epochs=2, batch_size=7), seed=4)
    prox = client_update(model, shard, LocalTrainConfig(epochs=2, batch_size=7, prox_mu=0.0), seed=4)
    assert plain.equals(prox)


def test_full_batch_single_epoch_is_one_gradient_step():
    model = _models(1)[0]
    shard = _shard(n=12)
    lr = 0.3
    out = client_update(model, shard, LocalTrainConfig(epochs=1, batch_size=100, learning_rate=lr, momentum=0.0), 0)
    fd = finite_difference_grads(model, shard.data.xs, shard.data.ys)
    for new, old, g in zip(out.parameters(), model.parameters(), fd):
        np.testing.assert_allclose(new, old - lr * g, rtol=0, atol=1e-9)


def test_prox_term_pulls_towards_dispatched_model():
    model = _models(1)[0]
    shard = _shard(n=10)
    lr, mu = 0.2, 0.5
    cfg = LocalTrainConfig(epochs=2, batch_size=10, learning_rate=lr, momentum=0.0, prox_mu=mu)
    out = client_update(model, shard, cfg, 0)
    # hand-unrolled: step 1 has no pull (w == w_in); step 2 adds mu * (w1 - w0)
    w0 = model.parameters()
    _, g0 = nn.loss_and_grad(model, shard.data.xs, shard.data.ys)
    w1 = [p - lr * g for p, g in zip(w0, g0)]
    _, g1 = nn.loss_and_grad(model.with_parameters(w1), shard.data.xs, shard.data.ys)
    w2 = [p - lr * (g + mu * (p - a)) for p, g, a in zip(w1, g1, w0)]
    for got, want in zip(out.parameters(), w2):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)


def test_velocity_resets_each_call():
    model = _models(1)[0]
    shard = _shard()
    cfg = LocalTrainConfig(epochs=1, batch_size=8, learning_rate=0.05)
    first = client_update(model, shard, cfg, 3)
    again = client_update(model, shard, cfg, 3)
    assert first.equals(again)


def test_local_result_reports_loss_and_steps():
    res = train_local(_models(1)[0], _shard(n=23), LocalTrainConfig(epochs=3, batch_size=10), 0)
    assert res.steps == 3 * 3
    assert res.loss > 0


def test_empty_shard_and_shape_mismatch():
    empty = ClientShard(0, Dataset(np.zeros((0, 4)), np.zeros(0, int), 3), np.zeros(0, int))
    with pytest.raises(ValueError):
        client_update(_models(1)[0], empty, LocalTrainConfig(), 0)
    with pytest.raises(nn.ShapeMismatchError):
        client_update(_models(1, d_in=5)[0], _shard(), LocalTrainConfig(), 0)


# ---------------------------------------------------------------------------
# recombination


def test_single_model_recombine_is_identity():
    (m,) = _models(1)
    out = model_recombine([m], 123)
    assert out.entries[0].equals(m)


def _seed_for(target, num_layers, K):
    for seed in range(10_000):
        if draw_layer_permutations(num_layers, K, seed) == target:
            return seed
    raise AssertionError("no seed produces the target permutations")


def test_two_models_two_layers_swap_first_layer_only():
    a = nn.LayeredModel([nn.dense(2, 2, np.random.default_rng(1)), nn.dense(2, 2, np.random.default_rng(2))])
    b = nn.LayeredModel([nn.dense(2, 2, np.random.default_rng(3)), nn.dense(2, 2, np.random.default_rng(4))])
    seed = _seed_for([[1, 0], [0, 1]], 2, 2)
    a2, b2 = model_recombine([a, b], seed).entries
    assert a2.layers[0].params["weight"] is b.layers[0].params["weight"]
    assert a2.layers[1].params["weight"] is a.layers[1].params["weight"]
    assert b2.layers[0].params["weight"] is a.layers[0].params["weight"]
    assert b2.layers[1].params["weight"] is b.layers[1].params["weight"]


def test_first_model_can_draw_layers_from_models_1_2_and_K():
    K = 5
    models = _models(K, hidden=(4, 4, 4))  # dense layers at 0, 2, 4, 6
    for seed in range(50_000):
        perms = draw_layer_permutations(len(models[0].layers), K, seed)
        if (perms[0][0], perms[2][0], perms[4][0]) == (0, 1, K - 1):
            break
    out = model_recombine(models, seed)
    assert out.sources[0][0] == 0 and out.sources[2][0] == 1 and out.sources[4][0] == K - 1
    first = out.entries[0]
    for k, src in ((0, 0), (2, 1), (4, K - 1)):
        assert first.layers[k].params["weight"] is models[src].layers[k].params["weight"]


def test_recombine_output_layer_k_comes_from_permuted_input():
    models = _models(4, hidden=(3, 3))
    out = model_recombine(ModelList(models, round=7), [1, 2])
    assert out.round == 7
    perms = draw_layer_permutations(len(models[0].layers), 4, [1, 2])
    for j, m in enumerate(out.entries):
        for k, layer in enumerate(m.layers):
            for name, arr in layer.params.items():
                assert arr is models[perms[k][j]].layers[k].params[name]


def test_recombination_conserves_blocks_over_random_trials():
    rng = np.random.default_rng(0)
    for trial in range(200):
        K = int(rng.integers(1, 9))
        hidden = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(0, 3)))]
        models = [nn.build_mlp(2, hidden, 2, seed=rng) for _ in range(K)]
        out = model_recombine(models, trial)
        assert _blocks(out.entries) == _blocks(models)
        for src in out.sources:
            assert sorted(src) == list(range(K))


def test_permutations_are_uniform_for_three_models():
    counts = Counter()
    for seed in range(6000):
        counts[tuple(draw_layer_permutations(1, 3, seed)[0])] += 1
    assert set(counts) == set(itertools.permutations(range(3)))
    for c in counts.values():
        assert abs(c / 6000 - 1 / 6) < 0.02


def test_recombine_rejects_mixed_architectures():
    models = _models(2) + [nn.build_mlp(4, (6,), 3, seed=0)]
    with pytest.raises(nn.ArchitectureMismatchError):
        model_recombine(models, 0)


def test_apply_permutations_validates():
    with pytest.raises(ValueError):
        apply_layer_permutations(_models(2), [[0, 0]] * 4)


# ---------------------------------------------------------------------------
# aggregation


def test_fedavg_two_scalars():
    out = fedavg_aggregate([_one_param(1.0), _one_param(3.0)])
    assert out.parameters()[0][0, 0] == 2.0


def test_fedavg_idempotent_on_identical_models():
    m = _models(1)[0]
    out = fedavg_aggregate([m, m, m, m])
    for a, b in zip(out.parameters(), m.parameters()):
        np.testing.assert_allclose(a, b, rtol=1e-15)


def test_fedavg_sample_weights_match_scalar_oracle():
    models = _models(3)
    sizes = [5, 17, 8]
    out = fedavg_aggregate(models, sizes)
    total = sum(sizes)
    for i, got in enumerate(out.parameters()):
        flat = [m.parameters()[i].ravel().tolist() for m in models]
        want = [sum(sizes[j] / total * flat[j][e] for j in range(3)) for e in range(len(flat[0]))]
        np.testing.assert_allclose(got.ravel(), want, rtol=1e-14, atol=1e-15)


def test_fedavg_rejects_bad_weights():
    models = _models(2)
    for weights in ([0, 0], [1, -1], [1], [1, float("nan")]):
        with pytest.raises(ValueError):
            fedavg_aggregate(models, weights)


def test_global_model_examples():
    (m,) = _models(1)
    assert global_model_gen([m]).equals(m)
    a = nn.LayeredModel([nn.Layer("dense", {"weight": np.zeros((1, 1)), "bias": np.zeros(1)}, {"fan_in": 1, "fan_out": 1})])
    b = a.with_parameters([np.array([[2.0]]), np.array([4.0])])
    g = global_model_gen([a, b])
    assert g.parameters()[0][0, 0] == 1.0 and g.parameters()[1][0] == 2.0


def test_global_model_equals_uniform_fedavg_bit_exactly():
    models = _models(5, seed=3, hidden=(7, 4))
    assert global_model_gen(models).equals(fedavg_aggregate(models))


def test_global_model_of_empty_list():
    with pytest.raises(ValueError):
        global_model_gen([])


# ---------------------------------------------------------------------------
# ablation dispatch


def test_dispatch_single_model_identity():
    (m,) = _models(1)
    assert dispatch_no_recombine([m], 0).entries[0] is m


def test_dispatch_is_whole_model_permutation():
    models = _models(6)
    for seed in range(20):
        out = dispatch_no_recombine(models, seed)
        perm = out.sources[0]
        assert sorted(perm) == list(range(6))
        assert all(src == perm for src in out.sources)
        assert [models.index(m) for m in out.entries] == list(perm)
        assert _blocks(out.entries) == _blocks(models)
