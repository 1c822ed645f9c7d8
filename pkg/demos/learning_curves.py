"""FedAvg, FedMR, FedMR without recombination, and two-stage FedMR on one task.

A small label-skewed problem: 20 clients, Dirichlet alpha 0.1, two clients
per round. Accuracy is that of the averaged model on a held-out split.
Takes under a minute.
"""
from fedmr import ExperimentConfig, ModelSpec, PartitionSpec, Seeds, generate_synthetic, partition, run_experiment
from fedmr.data import train_test_split

ROUNDS = 150
full = generate_synthetic(5000, 8, num_features=10, noise=2.5, clusters_per_class=2, seed=0)
train, test = train_test_split(full, 0.2, seed=0)
spec = PartitionSpec("dirichlet", 20, 0.1)
shards = partition(train, spec, seed=0)

runs = {
    "fedavg": dict(algorithm="fedavg"),
    "fedmr": dict(algorithm="fedmr"),
    "fedmr-50": dict(algorithm="fedmr", pretrain_rounds=50),
    "fedmr w/o mr": dict(algorithm="fedmr_no_mr"),
}
curves = {}
for label, kw in runs.items():
    cfg = ExperimentConfig(num_clients=20, rounds=ROUNDS, partition=spec, model=ModelSpec(hidden=(64, 64)),
                           seeds=Seeds(0, 0, 0, 0), eval_every=25, **kw)
    res = run_experiment(cfg, shards, test)
    curves[label] = {r.round: r.accuracy for r in res.records if r.accuracy is not None}
    print(f"{label:13s} done, final accuracy {res.records[-1].accuracy:.3f}")

print()
rounds = sorted(next(iter(curves.values())))
print("round " + "".join(f"{label:>14s}" for label in curves))
for r in rounds:
    print(f"{r:5d} " + "".join(f"{curves[label][r]:14.3f}" for label in curves))
