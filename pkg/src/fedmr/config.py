"""TOML experiment configs: parsing, defaults, overrides and data preparation.

Every key has a default, so an empty file resolves to the standard protocol
(SGD lr 0.01, momentum 0.9, batch 50, 5 local epochs, 10% participation).
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (
    Dataset,
    PartitionSpec,
    generate_synthetic,
    load_idx_images,
    partition,
    train_test_split,
)
from .federated import LocalTrainConfig
from .orchestrator import (
    DATASET_STREAM,
    PARTITION_STREAM,
    ExperimentConfig,
    ModelSpec,
    Seeds,
)

DEFAULTS: dict[str, dict[str, Any]] = {
    "experiment": {
        "name": "",
        "algorithm": "fedmr",
        "num_clients": 100,
        "participation_fraction": 0.1,
        "rounds": 100,
        "pretrain_rounds": 0,
        "identical_init": True,
        "eval_every": 1,
        "aggregation": "samples",
    },
    "local": {
        "epochs": 5,
        "batch_size": 50,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "prox_mu": 0.0,
    },
    "partition": {
        "scheme": "dirichlet",
        "alpha": 0.5,
        "min_samples_per_client": 2,
    },
    "data": {
        "source": "synthetic",
        "kind": "blobs",
        "num_samples": 5000,
        "num_classes": 10,
        "num_features": 10,
        "noise": 1.0,
        "clusters_per_class": 1,
        "spread": 3.0,
        "test_fraction": 0.2,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
    },
    "model": {
        "kind": "mlp",
        "hidden": [64, 64],
        "channels": [8, 16],
        "kernel": 3,
        "cnn_hidden": 64,
    },
    "seeds": {
        "init": 0,
        "data": 0,
        "sampling": 0,
        "recombine": 0,
    },
}

IDX_FIELDS = ("train_images", "train_labels", "test_images", "test_labels")


class ConfigError(ValueError):
    """Carries one ``(field, message)`` diagnostic per problem found."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{f}: {m}" for f, m in problems))


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    data: dict[str, Any]
    name: str
    resolved: dict[str, dict[str, Any]] = field(repr=False)

    @property
    def label(self) -> str:
        return self.name or self.experiment.algorithm

    def config_hash(self) -> str:
        return git_blob_hash(canonical_json(self.resolved).encode())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def git_blob_hash(content: bytes) -> str:
    """SHA-1 of ``b"blob <len>\\0" + content``, as ``git hash-object`` computes it."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(content))
    h.update(content)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# parsing


def load_raw(path: str | os.PathLike) -> dict:
    """Read a TOML config, or the ``config`` table of a run manifest (``.json``)."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise ConfigError([("config", f"file not found: {path}")]) from None
    if path.endswith(".json"):
        try:
            doc = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise ConfigError([("config", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")]) from None
        if not isinstance(doc, dict) or not isinstance(doc.get("config"), dict):
            raise ConfigError([("config", f"{path}: manifest has no 'config' table")])
        return doc["config"]
    try:
        return tomllib.loads(blob.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        line, col = getattr(exc, "lineno", "?"), getattr(exc, "colno", "?")
        msg = getattr(exc, "msg", str(exc))
        raise ConfigError([("config", f"{path}:{line}:{col}: {msg}")]) from None


def parse_override(item: str) -> tuple[str, Any]:
    """Split ``key=value``; the value is read as a TOML literal, else kept as a string."""
    key, sep, text = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError([("--set", f"expected key=value, got {item!r}")])
    try:
        value = tomllib.loads(f"v = {text.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = text.strip()
    return key, value


def _locate(key: str) -> tuple[str, str]:
    if "." in key:
        section, _, name = key.partition(".")
        if section not in DEFAULTS or name not in DEFAULTS[section]:
            raise ConfigError([(key, "unknown setting")])
        return section, name
    hits = [s for s, fields in DEFAULTS.items() if key in fields]
    if not hits:
        raise ConfigError([(key, "unknown setting")])
    if len(hits) > 1:
        raise ConfigError([(key, f"ambiguous; qualify as one of {', '.join(f'{s}.{key}' for s in hits)}")])
    return hits[0], key


def apply_overrides(raw: dict, overrides) -> dict:
    """Return a copy of ``raw`` with ``(key, value)`` overrides applied."""
    out = {s: dict(v) if isinstance(v, dict) else v for s, v in raw.items()}
    for key, value in overrides:
        section, name = _locate(key)
        table = out.setdefault(section, {})
        if not isinstance(table, dict):
            raise ConfigError([(section, "must be a table")])
        table[name] = value
    return out


def _coerce(where: str, default, value, problems):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
    problems.append((where, f"expected {type(default).__name__}, got {value!r}"))
    return default


def resolve(raw: dict) -> RunConfig:
    """Fill defaults, type-check, and validate; raises :class:`ConfigError`."""
    problems: list[tuple[str, str]] = []
    resolved: dict[str, dict[str, Any]] = {}
    for section, value in raw.items():
        if section not in DEFAULTS:
            problems.append((section, "unknown section"))
        elif not isinstance(value, dict):
            problems.append((section, "must be a table"))
    for section, fields in DEFAULTS.items():
        given = raw.get(section, {})
        given = given if isinstance(given, dict) else {}
        for key in given:
            if key not in fields:
                problems.append((f"{section}.{key}", "unknown setting"))
        resolved[section] = {
            key: _coerce(f"{section}.{key}", default, given[key], problems) if key in given else default
            for key, default in fields.items()
        }
    if problems:
        raise ConfigError(problems)

    ex, lc, pt, dt, md, sd = (resolved[s] for s in ("experiment", "local", "partition", "data", "model", "seeds"))
    built = {}
    for where, make in (
        ("local", lambda: LocalTrainConfig(**lc)),
        ("partition", lambda: PartitionSpec(num_clients=ex["num_clients"], **pt)),
        ("model", lambda: ModelSpec(
            kind=md["kind"], hidden=tuple(md["hidden"]), channels=tuple(md["channels"]),
            kernel=md["kernel"], cnn_hidden=md["cnn_hidden"])),
        ("seeds", lambda: Seeds(**sd)),
    ):
        try:
            built[where] = make()
        except (ValueError, TypeError) as exc:
            problems.append((where, str(exc)))
    if len(md["channels"]) != 2:
        problems.append(("model.channels", "needs exactly two conv widths"))
    problems += _data_problems(dt)
    if md["kind"] == "cnn" and dt["source"] != "idx":
        problems.append(("model.kind", "cnn needs image data (data.source = 'idx')"))
    if problems:
        raise ConfigError(problems)

    exp = ExperimentConfig(
        algorithm=ex["algorithm"],
        num_clients=ex["num_clients"],
        participation_fraction=ex["participation_fraction"],
        rounds=ex["rounds"],
        pretrain_rounds=ex["pretrain_rounds"],
        local=built["local"],
        partition=built["partition"],
        model=built["model"],
        seeds=built["seeds"],
        identical_init=ex["identical_init"],
        eval_every=ex["eval_every"],
        aggregation=ex["aggregation"],
    )
    problems += [(f if "." in f else f"experiment.{f}", m) for f, m in exp.problems()]
    if problems:
        raise ConfigError(problems)
    return RunConfig(exp, dt, ex["name"], resolved)


def _data_problems(dt: dict) -> list[tuple[str, str]]:
    out = []
    if dt["source"] == "synthetic":
        if dt["kind"] not in ("blobs", "spiral"):
            out.append(("data.kind", "must be 'blobs' or 'spiral'"))
        if dt["num_classes"] < 2:
            out.append(("data.num_classes", "must be at least 2"))
        if dt["num_samples"] < dt["num_classes"]:
            out.append(("data.num_samples", "must be at least num_classes"))
        if not 0.0 < dt["test_fraction"] < 1.0:
            out.append(("data.test_fraction", "must lie in (0, 1)"))
    elif dt["source"] == "idx":
        for key in IDX_FIELDS:
            path = dt[key]
            if not path:
                out.append((f"data.{key}", "required when source = 'idx'"))
            elif not os.path.isfile(path):
                out.append((f"data.{key}", f"file not found: {path}"))
    else:
        out.append(("data.source", "must be 'synthetic' or 'idx'"))
    return out


def load_config(path, overrides=()) -> RunConfig:
    return resolve(apply_overrides(load_raw(path), overrides))


# ---------------------------------------------------------------------------
# output


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {v!r} as TOML")


def to_toml(resolved: dict[str, dict[str, Any]]) -> str:
    lines = []
    for section, fields in resolved.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in fields.items()]
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# data


def prepare_data(cfg: RunConfig):
    """Build ``(shards, test_set)`` for ``cfg``; deterministic in the data seed."""
    dt = cfg.data
    seed = cfg.experiment.seeds.data
    flatten = cfg.experiment.model.kind == "mlp"
    if dt["source"] == "synthetic":
        full = generate_synthetic(
            dt["num_samples"],
            dt["num_classes"],
            num_features=dt["num_features"],
            kind=dt["kind"],
            noise=dt["noise"],
            seed=[seed, DATASET_STREAM],
            clusters_per_class=dt["clusters_per_class"],
            spread=dt["spread"],
        )
        train, test = train_test_split(full, dt["test_fraction"], seed=[seed, DATASET_STREAM, 1])
    else:
        train = load_idx_images(dt["train_images"], dt["train_labels"], flatten=flatten)
        test = load_idx_images(dt["test_images"], dt["test_labels"], flatten=flatten)
        k = max(train.num_classes, test.num_classes)
        train = Dataset(train.xs, train.ys, k)
        test = Dataset(test.xs, test.ys, k)
    shards = partition(train, cfg.experiment.partition, seed=[seed, PARTITION_STREAM])
    return shards, test


def input_files(cfg: RunConfig) -> dict[str, str]:
    """Git-style content hashes of the data files a config reads."""
    if cfg.data["source"] != "idx":
        return {}
    out = {}
    for key in IDX_FIELDS:
        with open(cfg.data[key], "rb") as fh:
            out[cfg.data[key]] = git_blob_hash(fh.read())
    return out
