"""Experiment pipeline: declarative JSON configs driving dataset
generation, two-stage training, baseline training, rollout and
evaluation, with content-hashed manifests for reproducibility.

Every stage writes its artifacts plus a ``manifest.json`` recording the
hash of the config sections it depends on and the fingerprints of its
input artifacts. Re-running a completed stage with an identical config
is a no-op; a hash mismatch refuses to overwrite without ``force``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from .checkpoint import load_checkpoint
from .data import Dataset, SystemSpec, generate_dataset, load_dataset, save_dataset
from .embedding import (EmbeddedDataset, EmbeddingConfig, EmbeddingModel,
                        EmbeddingTrainConfig, embed_dataset, train_embedding)
from .errors import ConfigError, PrerequisiteError
from .pca import PcaEmbedder, pca_fit
from .transformer import (TransformerConfig, TransformerModel, TransformerTrainConfig,
                          rollout, train_transformer)

STAGES = ("generate", "train-embedding", "train-transformer", "train-baseline",
          "rollout", "evaluate", "all")

CONFIG_VERSION = 1

_FREE_PATHS = {"system.params", "system.init_sampler"}

_LORENZ_DEFAULTS = {
    "version": CONFIG_VERSION,
    "name": "lorenz",
    "seed": 42,
    "system": {
        "system_id": "lorenz",
        "params": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
        "dt": 0.01,
        "n_steps": 256,
        "state_shape": None,
        "init_sampler": {"kind": "uniform_box", "low": [-20.0, -20.0, 10.0],
                         "high": [20.0, 20.0, 40.0]},
    },
    "dataset": {
        "train": {"count": 2048, "base_seed": None, "n_steps": None},
        "valid": {"count": 64, "base_seed": None, "n_steps": 1024},
        "test": {"count": 256, "base_seed": None, "n_steps": 1024},
    },
    "embedding": {
        "variant": "koopman",
        "arch": "dense",
        "embed_dim": 32,
        "hidden": [128, 96],
        "channels": [16, 32, 48, 64],
        "half_bandwidth": None,
        "pad_mode": "wrap",
        "epochs": 300,
        "batch_size": 64,
        "window": 64,
        "windows_per_epoch": 2,
        "lambda_recon": 1.0,
        "lambda_dynamics": 1.0,
        "lambda_decay": None,
        "ramp_epochs": 50,
        "lr": 1e-3,
        "lr_decay": 0.5,
        "lr_decay_every": 75,
        "seed": None,
    },
    "transformer": {
        "context_window": 64,
        "n_layers": 4,
        "n_heads": 4,
        "ff_width": None,
        "dropout": 0.0,
        "head_mode": "residual",
        "epochs": 200,
        "batch_size": 64,
        "windows_per_epoch": 2,
        "input_noise": 0.03,
        "noise_ramp": 8,
        "lr": 1e-3,
        "lr_decay": 0.5,
        "lr_decay_every": 50,
        "seed": None,
    },
    "baselines": None,  # defaults to every kind; see _BASELINE_DEFAULTS
    "rollout": {"steps": 320, "map_enabled": True, "map_steps": 25000, "map_case": 0},
    "evaluation": {
        "windows": [[0, 64], [64, 128], [128, 192]],
        "field_names": None,
        "map_epsilon": 1.0,
        "reference_map_steps": 25000,
        "reference_map_seed": None,
        "bounds": [[-30.0, 30.0], [-30.0, 30.0], [0.0, 60.0]],
    },
}

_GRAY_SCOTT_DEFAULTS = {
    "version": CONFIG_VERSION,
    "name": "gray_scott",
    "seed": 42,
    "system": {
        "system_id": "gray_scott",
        "params": {"r_u": 0.2, "r_v": 0.1, "f": 0.025, "kill_k": 0.055,
                   "domain_length": 64.0, "grid_points_per_axis": 16},
        "dt": 5.0,
        "n_steps": 100,
        "state_shape": None,
        "init_sampler": {"kind": "seeded_blobs", "n_blobs": 3, "radius_cells": None,
                         "u_inside": 0.5, "v_inside": 0.25},
    },
    "dataset": {
        "train": {"count": 64, "base_seed": None, "n_steps": None},
        "valid": {"count": 8, "base_seed": None, "n_steps": None},
        "test": {"count": 16, "base_seed": None, "n_steps": None},
    },
    "embedding": {
        "variant": "koopman",
        "arch": "conv",
        "embed_dim": 128,
        "hidden": [128, 64],
        "channels": [16, 32, 48, 64],
        "half_bandwidth": None,
        "pad_mode": "wrap",
        "epochs": 150,
        "batch_size": 8,
        "window": 16,
        "windows_per_epoch": 1,
        "lambda_recon": 1.0,
        "lambda_dynamics": 1.0,
        "lambda_decay": None,
        "ramp_epochs": 50,
        "lr": 1e-3,
        "lr_decay": 0.5,
        "lr_decay_every": 75,
        "seed": None,
    },
    "transformer": {
        "context_window": 64,
        "n_layers": 4,
        "n_heads": 8,
        "ff_width": None,
        "dropout": 0.1,
        "head_mode": "residual",
        "epochs": 150,
        "batch_size": 8,
        "windows_per_epoch": 1,
        "input_noise": 0.03,
        "noise_ramp": 8,
        "lr": 1e-3,
        "lr_decay": 0.5,
        "lr_decay_every": 50,
        "seed": None,
    },
    "baselines": {},  # reduced-scale runs gate only the embedding + transformer
    "rollout": {"steps": 100, "map_enabled": False, "map_steps": 0, "map_case": 0},
    "evaluation": {
        "windows": [[0, 100]],
        "field_names": ["u", "v"],
        "map_epsilon": 1.0,
        "reference_map_steps": 0,
        "reference_map_seed": None,
        "bounds": None,
    },
}

_DEFAULTS = {"lorenz": _LORENZ_DEFAULTS, "gray_scott": _GRAY_SCOTT_DEFAULTS,
             "external": _LORENZ_DEFAULTS}

_BASELINE_DEFAULTS = {
    "ar_mlp": {"widths": [200, 200, 200], "epochs": 300, "batch_size": 512,
               "pairs_per_epoch": 65536, "lr": 1e-3, "lr_decay": 0.5,
               "lr_decay_every": 75, "seed": None},
    "lstm": {"lift_dim": 64, "hidden": 128, "window": 64, "epochs": 200,
             "batch_size": 64, "lr": 1e-3, "lr_decay": 0.5, "lr_decay_every": 50,
             "seed": None},
    "koopman_only": {},
    "echo_state": {"reservoir_size": 2500, "spectral_radius": 0.9,
                   "input_scaling": 0.5, "ridge": 1e-6, "washout": 32,
                   "max_series": 256, "seed": None},
}


def derive_seed(master, label):
    """Stable 63-bit sub-seed for a named role under one master seed."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def _check_unknown_keys(user, defaults, path):
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    if path in _FREE_PATHS:
        return
    for key, value in user.items():
        full = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"{full}: unknown key")
        if isinstance(defaults[key], dict) and value is not None:
            _check_unknown_keys(value, defaults[key], full)


def _merge(defaults, user):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """Fully materialized experiment configuration."""

    raw: dict

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.raw == other.raw

    def to_json(self):
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    @property
    def name(self):
        return self.raw["name"]

    @property
    def seed(self):
        return self.raw["seed"]

    def section(self, key):
        return self.raw[key]

    def system_spec(self, split=None):
        sys = self.raw["system"]
        n_steps = sys["n_steps"]
        if split is not None:
            n_steps = self.raw["dataset"][split]["n_steps"]
        return SystemSpec(system_id=sys["system_id"], params=dict(sys["params"]),
                          dt=sys["dt"], n_steps=n_steps,
                          state_shape=tuple(sys["state_shape"]),
                          init_sampler=dict(sys["init_sampler"]))

    def embedding_model_config(self):
        emb = self.raw["embedding"]
        return EmbeddingConfig(
            state_shape=tuple(self.raw["system"]["state_shape"]),
            embed_dim=emb["embed_dim"], variant=emb["variant"], arch=emb["arch"],
            hidden=tuple(emb["hidden"]), channels=tuple(emb["channels"]),
            half_bandwidth=emb["half_bandwidth"], pad_mode=emb["pad_mode"],
            seed=emb["seed"])

    def embedding_train_config(self):
        emb = self.raw["embedding"]
        return EmbeddingTrainConfig(
            epochs=emb["epochs"], batch_size=emb["batch_size"], window=emb["window"],
            windows_per_epoch=emb["windows_per_epoch"],
            lambda_recon=emb["lambda_recon"], lambda_dynamics=emb["lambda_dynamics"],
            lambda_decay=emb["lambda_decay"], ramp_epochs=emb["ramp_epochs"],
            lr=emb["lr"], lr_decay=emb["lr_decay"], lr_decay_every=emb["lr_decay_every"],
            seed=emb["seed"])

    def transformer_model_config(self):
        tf = self.raw["transformer"]
        return TransformerConfig(
            embed_dim=self.raw["embedding"]["embed_dim"], n_layers=tf["n_layers"],
            n_heads=tf["n_heads"], context_window=tf["context_window"],
            ff_width=tf["ff_width"], dropout=tf["dropout"],
            head_mode=tf["head_mode"], seed=tf["seed"])

    def transformer_train_config(self):
        tf = self.raw["transformer"]
        return TransformerTrainConfig(
            epochs=tf["epochs"], batch_size=tf["batch_size"],
            windows_per_epoch=tf["windows_per_epoch"], input_noise=tf["input_noise"],
            noise_ramp=tf["noise_ramp"], lr=tf["lr"], lr_decay=tf["lr_decay"],
            lr_decay_every=tf["lr_decay_every"], seed=tf["seed"])


def parse_config(source):
    """Parse and validate a config from a path, JSON text or dict; every
    default is materialized (including derived sub-seeds), unknown keys
    are rejected with their JSON path."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON at root: {err}") from None
    elif isinstance(source, str):
        try:
            user = json.loads(source)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON at root: {err}") from None
    else:
        user = copy.deepcopy(source)
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    system_id = user.get("system", {}).get("system_id", "lorenz")
    if system_id not in _DEFAULTS:
        raise ConfigError(f"system.system_id: unknown system {system_id!r}")
    defaults = _DEFAULTS[system_id]
    user_baselines = user.pop("baselines", None) if isinstance(user, dict) else None
    _check_unknown_keys(user, {k: v for k, v in defaults.items() if k != "baselines"}, "")
    raw = _merge({k: v for k, v in defaults.items() if k != "baselines"}, user)
    raw["baselines"] = _materialize_baselines(system_id, user_baselines, defaults)
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {raw.get('version')!r}")
    _materialize(raw)
    cfg = ExperimentConfig(raw=raw)
    _validate(cfg)
    return cfg


def _materialize_baselines(system_id, user_baselines, defaults):
    """The baselines section selects kinds: listing any kind replaces the
    default set; each selected kind merges with that kind's defaults."""
    if user_baselines is None:
        if defaults["baselines"] is None:
            selected = {k: {} for k in _BASELINE_DEFAULTS}
        else:
            selected = dict(defaults["baselines"])
    else:
        if not isinstance(user_baselines, dict):
            raise ConfigError("baselines: expected an object keyed by baseline kind")
        selected = user_baselines
    out = {}
    for kind, bcfg in selected.items():
        if kind not in _BASELINE_DEFAULTS:
            raise ConfigError(f"baselines.{kind}: unknown baseline kind")
        bcfg = bcfg or {}
        _check_unknown_keys(bcfg, _BASELINE_DEFAULTS[kind], f"baselines.{kind}")
        out[kind] = _merge(_BASELINE_DEFAULTS[kind], bcfg)
    return out


def _materialize(raw):
    master = raw["seed"]
    sys = raw["system"]
    if sys["system_id"] == "gray_scott":
        n = int(sys["params"]["grid_points_per_axis"])
        if sys["state_shape"] is None:
            sys["state_shape"] = [2, n, n, n]
        if sys["init_sampler"].get("radius_cells") is None:
            sys["init_sampler"]["radius_cells"] = n / 8.0
    elif sys["state_shape"] is None:
        sys["state_shape"] = [3]
    for split in ("train", "valid", "test"):
        ds = raw["dataset"][split]
        if ds["n_steps"] is None:
            ds["n_steps"] = sys["n_steps"]
        if ds["base_seed"] is None:
            ds["base_seed"] = derive_seed(master, f"dataset.{split}")
    emb = raw["embedding"]
    if emb["seed"] is None:
        emb["seed"] = derive_seed(master, "embedding") % (2 ** 31)
    if emb["half_bandwidth"] is None:
        from .embedding import default_half_bandwidth

        emb["half_bandwidth"] = default_half_bandwidth(emb["embed_dim"])
    if emb["lambda_decay"] is None:
        emb["lambda_decay"] = 0.1 / emb["embed_dim"]
    tf = raw["transformer"]
    if tf["seed"] is None:
        tf["seed"] = derive_seed(master, "transformer") % (2 ** 31)
    if tf["ff_width"] is None:
        tf["ff_width"] = 4 * emb["embed_dim"]
    for kind, bcfg in raw["baselines"].items():
        if bcfg is None:
            raw["baselines"][kind] = bcfg = {}
        if kind != "koopman_only" and bcfg.get("seed") is None:
            bcfg["seed"] = derive_seed(master, f"baseline.{kind}") % (2 ** 31)
    evx = raw["evaluation"]
    if evx["reference_map_seed"] is None:
        evx["reference_map_seed"] = derive_seed(master, "reference_map")


def _validate(cfg):
    raw = cfg.raw
    for split in ("train", "valid", "test"):
        if raw["dataset"][split]["count"] < 1:
            raise ConfigError(f"dataset.{split}.count: must be >= 1")
    for kind in raw["baselines"]:
        if kind not in bl.BASELINE_KINDS:
            raise ConfigError(f"baselines.{kind}: unknown baseline kind")
    last = 0
    for win in raw["evaluation"]["windows"]:
        if len(win) != 2 or win[1] <= win[0] or win[0] < last:
            raise ConfigError(f"evaluation.windows: must be ordered non-overlapping "
                              f"[start, end) pairs, got {raw['evaluation']['windows']}")
        last = win[1]
    # constructing the typed sub-configs runs their invariant checks
    cfg.system_spec()
    if raw["embedding"]["variant"] != "pca":
        cfg.embedding_model_config()
    cfg.transformer_model_config()
    _baseline_configs(cfg)


def _baseline_configs(cfg):
    out = {}
    for kind, bcfg in cfg.raw["baselines"].items():
        if kind == "ar_mlp":
            out[kind] = bl.ArMlpConfig(**{k: tuple(v) if k == "widths" else v
                                          for k, v in bcfg.items()})
        elif kind == "lstm":
            out[kind] = bl.LstmConfig(**bcfg)
        elif kind == "echo_state":
            out[kind] = bl.EchoStateConfig(**bcfg)
        elif kind == "koopman_only":
            out[kind] = None
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _hash_dict(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _fingerprint(artifact_dir):
    manifest = Path(artifact_dir) / "manifest.json"
    if not manifest.exists():
        return None
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


def _require(artifact_dir, what, producer):
    if _fingerprint(artifact_dir) is None:
        raise PrerequisiteError(f"missing {what} at {artifact_dir}; "
                                f"run stage '{producer}' first")
    return _fingerprint(artifact_dir)


class _Stage:
    """Idempotence guard for one stage directory."""

    def __init__(self, directory, stage, config_hash, inputs, seeds, force, log):
        self.directory = Path(directory)
        self.manifest = {"stage": stage, "config_hash": config_hash,
                         "inputs": inputs, "seeds": seeds}
        self.force = force
        self.log = log

    def up_to_date(self):
        path = self.directory / "manifest.json"
        if not path.exists():
            return False
        existing = json.loads(path.read_text())
        if existing == self.manifest:
            self.log(f"[{self.manifest['stage']}] up to date at {self.directory}")
            return True
        if not self.force:
            raise ConfigError(
                f"{self.directory} holds an artifact built from a different "
                f"configuration; pass --force to rebuild it")
        shutil.rmtree(self.directory)
        return False

    def begin(self):
        if self.directory.exists() and not (self.directory / "manifest.json").exists():
            # interrupted previous run: rebuild from scratch
            shutil.rmtree(self.directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def commit(self):
        (self.directory / "manifest.json").write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _load_embedder(path):
    kind, cfg, _ = load_checkpoint(path)
    if cfg.get("model", {}).get("variant") == "pca":
        return PcaEmbedder.load(path)
    return EmbeddingModel.load(path)


def stage_generate(cfg, out, force, log):
    dataset_root = out / "dataset"
    seeds = {split: cfg.raw["dataset"][split]["base_seed"]
             for split in ("train", "valid", "test")}
    stage = _Stage(dataset_root, "generate",
                   _hash_dict({"system": cfg.raw["system"], "dataset": cfg.raw["dataset"]}),
                   inputs={}, seeds=seeds, force=force, log=log)
    if stage.up_to_date():
        return dataset_root
    stage.begin()
    for split in ("train", "valid", "test"):
        spec = cfg.system_spec(split)
        dcfg = cfg.raw["dataset"][split]
        log(f"[generate] {split}: {dcfg['count']} series x {spec.n_steps} steps")
        ds = generate_dataset(spec, dcfg["count"], dcfg["base_seed"], split=split)
        save_dataset(ds, dataset_root / split)
    stage.commit()
    return dataset_root


def stage_train_embedding(cfg, out, force, log):
    dataset_root = out / "dataset"
    ckpt_dir = out / "checkpoints" / "embedding"
    dataset_fp = _require(dataset_root, "dataset", "generate")
    stage = _Stage(ckpt_dir, "train-embedding",
                   _hash_dict({"embedding": cfg.raw["embedding"]}),
                   inputs={"dataset": dataset_fp},
                   seeds={"embedding": cfg.raw["embedding"]["seed"]}, force=force, log=log)
    if stage.up_to_date():
        return ckpt_dir
    stage.begin()
    train = load_dataset(dataset_root / "train")
    if cfg.raw["embedding"]["variant"] == "pca":
        model = pca_fit(train, cfg.raw["embedding"]["embed_dim"])
        history = {"epoch": [], "loss": []}
    else:
        model = EmbeddingModel(cfg.embedding_model_config())
        log(f"[train-embedding] {model.n_parameters()} trainable parameters")
        history = train_embedding(model, train, cfg.embedding_train_config(),
                                  log=lambda m: log(f"[train-embedding] {m}"))
    model.save(ckpt_dir)
    (ckpt_dir / "history.json").write_text(json.dumps(history) + "\n")
    stage.commit()
    return ckpt_dir


def stage_train_transformer(cfg, out, force, log):
    dataset_root = out / "dataset"
    emb_dir = out / "checkpoints" / "embedding"
    ckpt_dir = out / "checkpoints" / "transformer"
    inputs = {"dataset": _require(dataset_root, "dataset", "generate"),
              "embedding": _require(emb_dir, "embedding checkpoint", "train-embedding")}
    stage = _Stage(ckpt_dir, "train-transformer",
                   _hash_dict({"transformer": cfg.raw["transformer"]}),
                   inputs=inputs, seeds={"transformer": cfg.raw["transformer"]["seed"]},
                   force=force, log=log)
    if stage.up_to_date():
        return ckpt_dir
    stage.begin()
    train = load_dataset(dataset_root / "train")
    embedder = _load_embedder(emb_dir)
    log("[train-transformer] embedding the training split")
    embedded = embed_dataset(embedder, train)
    model = TransformerModel(cfg.transformer_model_config())
    log(f"[train-transformer] {model.n_parameters()} trainable parameters")
    history = train_transformer(model, embedded, cfg.transformer_train_config(),
                                log=lambda m: log(f"[train-transformer] {m}"))
    model.save(ckpt_dir)
    (ckpt_dir / "history.json").write_text(json.dumps(history) + "\n")
    stage.commit()
    return ckpt_dir


def stage_train_baseline(cfg, out, force, log):
    dataset_root = out / "dataset"
    root = out / "checkpoints" / "baselines"
    configs = _baseline_configs(cfg)
    inputs = {"dataset": _require(dataset_root, "dataset", "generate")}
    if "koopman_only" in configs:
        inputs["embedding"] = _require(out / "checkpoints" / "embedding",
                                       "embedding checkpoint", "train-embedding")
    stage = _Stage(root, "train-baseline",
                   _hash_dict({"baselines": cfg.raw["baselines"]}),
                   inputs=inputs,
                   seeds={k: v.seed for k, v in configs.items() if v is not None},
                   force=force, log=log)
    if stage.up_to_date():
        return root
    stage.begin()
    train = load_dataset(dataset_root / "train")
    for kind, bcfg in configs.items():
        log(f"[train-baseline] {kind}")
        if kind == "ar_mlp":
            model, history = bl.train_ar_mlp(train, bcfg,
                                             log=lambda m: log(f"[train-baseline] {m}"))
            model.save(root / kind)
        elif kind == "lstm":
            model, history = bl.train_lstm(train, bcfg,
                                           log=lambda m: log(f"[train-baseline] {m}"))
            model.save(root / kind)
        elif kind == "echo_state":
            model, history = bl.train_echo_state(train, bcfg,
                                                 log=lambda m: log(f"[train-baseline] {m}"))
            model.save(root / kind)
        elif kind == "koopman_only":
            # self-contained copy of the trained embedding under the baseline kind
            emb_kind, emb_cfg, emb_store = load_checkpoint(out / "checkpoints" / "embedding")
            from .checkpoint import save_checkpoint

            save_checkpoint(root / kind, "baseline:koopman_only", emb_cfg, emb_store)
            history = {}
        (root / kind / "history.json").write_text(json.dumps(history) + "\n")
    stage.commit()
    return root


def _predicted_dataset(spec, preds, seeds, steps):
    pred_spec = SystemSpec(system_id=spec.system_id, params=spec.params, dt=spec.dt,
                           n_steps=steps, state_shape=spec.state_shape,
                           init_sampler=spec.init_sampler)
    return Dataset(spec=pred_spec, data=np.ascontiguousarray(preds, dtype=np.float32),
                   seeds=list(seeds), split="test", norm=None)


def _save_rollout(result, spec, seeds, steps, path):
    safe = np.nan_to_num(result.data, nan=0.0, posinf=0.0, neginf=0.0)
    save_dataset(_predicted_dataset(spec, safe, seeds, steps), path)
    flags = {"diverged": [bool(v) for v in result.diverged],
             "first_bad_step": [int(v) for v in result.first_bad_step]}
    (Path(path) / "flags.json").write_text(json.dumps(flags) + "\n")


def stage_rollout(cfg, out, force, log):
    dataset_root = out / "dataset"
    roll_root = out / "rollouts"
    rcfg = cfg.raw["rollout"]
    inputs = {"dataset": _require(dataset_root, "dataset", "generate"),
              "transformer": _require(out / "checkpoints" / "transformer",
                                      "transformer checkpoint", "train-transformer"),
              "embedding": _require(out / "checkpoints" / "embedding",
                                    "embedding checkpoint", "train-embedding")}
    baseline_root = out / "checkpoints" / "baselines"
    baseline_kinds = sorted(cfg.raw["baselines"])
    if baseline_kinds:
        inputs["baselines"] = _require(baseline_root, "baseline checkpoints", "train-baseline")
    stage = _Stage(roll_root, "rollout", _hash_dict({"rollout": rcfg}),
                   inputs=inputs, seeds={}, force=force, log=log)
    if stage.up_to_date():
        return roll_root
    stage.begin()
    test = load_dataset(dataset_root / "test")
    initial = test.data[:, 0]
    steps = min(rcfg["steps"], test.spec.n_steps)
    embedder = _load_embedder(out / "checkpoints" / "embedding")
    tmodel = TransformerModel.load(out / "checkpoints" / "transformer")
    log(f"[rollout] transformer: {len(test)} cases x {steps} steps")
    result = rollout(tmodel, embedder, initial, steps)
    _save_rollout(result, test.spec, test.seeds, steps, roll_root / "transformer")
    if rcfg["map_enabled"] and rcfg["map_steps"] > 0:
        case = int(rcfg["map_case"])
        log(f"[rollout] transformer map trajectory: case {case} x {rcfg['map_steps']} steps")
        map_result = rollout(tmodel, embedder, initial[case:case + 1], rcfg["map_steps"])
        _save_rollout(map_result, test.spec, [test.seeds[case]], rcfg["map_steps"],
                      roll_root / "transformer_map")
    for kind in baseline_kinds:
        log(f"[rollout] {kind}: {len(test)} cases x {steps} steps")
        if kind == "ar_mlp":
            result = bl.rollout_ar_mlp(bl.ArMlpModel.load(baseline_root / kind), initial, steps)
        elif kind == "lstm":
            result = bl.rollout_lstm(bl.LstmModel.load(baseline_root / kind), initial, steps)
        elif kind == "echo_state":
            result = bl.rollout_echo_state(bl.EchoStateModel.load(baseline_root / kind),
                                           initial, steps)
        elif kind == "koopman_only":
            emb = EmbeddingModel.load(baseline_root / kind, expected_kind="baseline:koopman_only")
            result = bl.rollout_koopman_only(emb, initial, steps)
        _save_rollout(result, test.spec, test.seeds, steps, roll_root / kind)
    stage.commit()
    return roll_root


def stage_evaluate(cfg, out, force, log):
    dataset_root = out / "dataset"
    roll_root = out / "rollouts"
    report_root = out / "reports"
    ecfg = cfg.raw["evaluation"]
    inputs = {"dataset": _require(dataset_root, "dataset", "generate"),
              "rollouts": _require(roll_root, "rollouts", "rollout"),
              "embedding": _require(out / "checkpoints" / "embedding",
                                    "embedding checkpoint", "train-embedding")}
    stage = _Stage(report_root, "evaluate", _hash_dict({"evaluation": ecfg}),
                   inputs=inputs, seeds={"reference_map": ecfg["reference_map_seed"]},
                   force=force, log=log)
    if stage.up_to_date():
        return report_root
    stage.begin()
    test = load_dataset(dataset_root / "test")
    windows = [tuple(w) for w in ecfg["windows"]]
    field_names = ecfg["field_names"]
    summary = {"models": {}, "dataset": {"split": "test", "count": len(test)},
               "seed": cfg.seed}
    model_names = ["transformer"] + sorted(cfg.raw["baselines"])
    for name in model_names:
        pred_dir = roll_root / name
        if _fingerprint(roll_root) is None or not (pred_dir / "meta.json").exists():
            raise PrerequisiteError(f"missing rollout for {name}; run stage 'rollout' first")
        preds = load_dataset(pred_dir)
        horizon = preds.spec.n_steps + 1
        targets = test.data[:, :horizon]
        report = ev.relative_mse(
            preds.data, targets, windows, state_shape=test.spec.state_shape,
            field_names=field_names,
            metadata={"model": name, "dataset": f"{cfg.name}/test", "seed": cfg.seed,
                      "normalization": "sum of squared errors over sum of squared "
                                       "target magnitudes, all cases jointly, per field"})
        flags = json.loads((pred_dir / "flags.json").read_text())
        report.divergence = {"any": any(flags["diverged"]),
                             "first_bad_step": flags["first_bad_step"]}
        if name == "transformer" and (roll_root / "transformer_map").exists():
            map_pred = load_dataset(roll_root / "transformer_map")
            map_flags = json.loads((roll_root / "transformer_map" / "flags.json").read_text())
            log(f"[evaluate] reference map trajectory ({ecfg['reference_map_steps']} steps)")
            ref_spec = cfg.system_spec()
            ref_spec = SystemSpec(system_id=ref_spec.system_id, params=ref_spec.params,
                                  dt=ref_spec.dt, n_steps=ecfg["reference_map_steps"],
                                  state_shape=ref_spec.state_shape,
                                  init_sampler=ref_spec.init_sampler)
            reference = generate_dataset(ref_spec, 1, ecfg["reference_map_seed"], split="test")
            ref_pairs = ev.lorenz_map(reference.data[0])
            pred_pairs = ev.lorenz_map(map_pred.data[0])
            report.map_pairs = pred_pairs
            report.map_score = ev.map_proximity(pred_pairs, ref_pairs, ecfg["map_epsilon"])
            report.map_score["reference_pairs"] = int(len(ref_pairs))
            report.map_score["diverged"] = any(map_flags["diverged"])
            if ecfg["bounds"] is not None:
                report.map_score["bounded"] = bool(
                    ev.within_bounds(map_pred.data[0], ecfg["bounds"])
                    and not any(map_flags["diverged"]))
        ev.emit_report(report, report_root / name)
        entry = {"windows": {f"[{a},{b})": {row["field"]: row["value"]
                                            for row in report.windows
                                            if row["start"] == a and row["end"] == b}
                             for a, b in windows},
                 "diverged": report.divergence["any"]}
        if report.map_score:
            entry["map"] = report.map_score
        summary["models"][name] = entry
        shown = ", ".join(f"[{a},{b}) " + " ".join(
            f"{f}={report.window_value(a, b, f):.4g}" for f in sorted(report.curve))
            for a, b in windows)
        log(f"[evaluate] {name}: {shown}")
    # embedding reconstruction diagnostic (encode -> decode, eval mode)
    embedder = _load_embedder(out / "checkpoints" / "embedding")
    recon = _embedding_reconstruction(embedder, test, field_names)
    summary["embedding_reconstruction"] = recon
    (report_root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    stage.commit()
    return report_root


def _embedding_reconstruction(embedder, dataset, field_names):
    from . import tensor as T

    spec = dataset.spec
    states = embedder.norm.apply(dataset.data, spec.state_shape).astype(np.float32)
    flat = states.reshape(-1, *spec.state_shape)
    decoded = []
    chunk = max(1, 65536 // max(int(np.prod(spec.state_shape)), 1))
    with T.no_grad():
        for lo in range(0, flat.shape[0], chunk):
            z = embedder.encode(flat[lo:lo + chunk])
            decoded.append(embedder.decode(z).data)
    decoded = np.concatenate(decoded).reshape(dataset.data.shape)
    recon = embedder.norm.invert(decoded, spec.state_shape)
    horizon = dataset.data.shape[1]
    report = ev.relative_mse(recon, dataset.data, [(0, horizon)],
                             state_shape=spec.state_shape, field_names=field_names)
    return {row["field"]: row["value"] for row in report.windows}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def run_pipeline(config, stage, out_dir, force=False, threads=None, log=None):
    """Run one stage (or ``all``) of the experiment; artifacts land under
    ``out_dir``. Returns the path of the stage's artifact directory."""
    log = log or (lambda message: None)
    if isinstance(config, (str, Path, dict)):
        config = parse_config(config)
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    if not config_path.exists():
        config_path.write_text(config.to_json())

    def dispatch():
        runners = {
            "generate": stage_generate,
            "train-embedding": stage_train_embedding,
            "train-transformer": stage_train_transformer,
            "train-baseline": stage_train_baseline,
            "rollout": stage_rollout,
            "evaluate": stage_evaluate,
        }
        if stage == "all":
            result = None
            order = ["generate", "train-embedding", "train-transformer"]
            if config.raw["baselines"]:
                order.append("train-baseline")
            order += ["rollout", "evaluate"]
            for name in order:
                result = runners[name](config, out, force, log)
            return result
        return runners[stage](config, out, force, log)

    if threads is not None:
        import threadpoolctl

        with threadpoolctl.threadpool_limits(limits=int(threads)):
            return dispatch()
    return dispatch()
