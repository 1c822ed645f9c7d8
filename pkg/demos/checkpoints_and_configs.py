"""Configs, checkpoints and replay without the command line.

Loads the example TOML next to this file, trains a few rounds, saves the
global model and reloads it bit for bit.
"""
import pathlib
import tempfile

from fedmr import evaluate, load_checkpoint, run_experiment, save_checkpoint
from fedmr.config import load_config, prepare_data, to_toml

here = pathlib.Path(__file__).parent
cfg = load_config(here / "fedmr.toml", overrides=[("rounds", 5)])
print(to_toml(cfg.resolved))
print("run label:", cfg.label, " content hash:", cfg.config_hash()[:12])

shards, test = prepare_data(cfg)
res = run_experiment(cfg.experiment, shards, test)
for rec in res.records:
    print(f"round {rec.round}: {rec.stage:9s} acc {rec.accuracy:.3f} transfers {rec.model_transfers}")

with tempfile.TemporaryDirectory() as tmp:
    path = pathlib.Path(tmp) / "model.ckpt"
    save_checkpoint(res.global_model, path)
    back = load_checkpoint(path)
    print()
    print("checkpoint bytes:", path.stat().st_size)
    print("reloaded model identical:", back.equals(res.global_model))
    print("reloaded accuracy: %.3f" % evaluate(back, test)[0])

# the same config from a shell:
#   fedmr run --config demos/fedmr.toml --set rounds=5 --out runs
