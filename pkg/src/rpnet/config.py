"""Experiment configuration files (YAML, versioned schema).

Schema version 1::

    schema_version: 1
    name: omniglot-reference
    seed: 0
    deterministic: false
    output_dir: runs/omniglot-reference     # relative paths resolve under $RPNET_OUTPUT_ROOT
    dataset:
      kind: omniglot                    # or image_folder
      root: data/omniglot
      size: [28, 28]
      train_classes: 1140
      val_classes: 60
      split_seed: 0
    model:
      architecture: siam1               # siam1 | siam2 | srpn | wrn_siamese
      dtype: float32
      options: {}                       # builder keyword arguments
    gr:
      enabled: false
      generator_widths: [32, 64, 128]
      corruption: {mode: both, sigma: 0.2, dropout_p: 0.1}
    train: {...}                        # TrainConfig fields
    eval: {...}                         # EvalConfig fields
    monitor: {oneshot: false, num_tests: 20, runs_per_test: 10}
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .evaluation import EvalConfig
from .exceptions import ConfigError
from .models import CorruptionConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "RPNET_OUTPUT_ROOT"
ARCHITECTURES = ("siam1", "siam2", "srpn", "wrn_siamese")
PRESETS = ("omniglot-reference", "mini-imagenet-reference")


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    architecture: str
    train: TrainConfig
    eval: EvalConfig
    model_options: dict = field(default_factory=dict)
    dtype: str = "float32"
    gr: bool = False
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    generator_widths: tuple = (32, 64, 128)
    monitor: dict = field(default_factory=dict)
    output_dir: str = "runs/experiment"
    seed: int = 0
    deterministic: bool = False

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "output_dir": str(self.output_dir),
            "dataset": copy.deepcopy(self.dataset),
            "model": {"architecture": self.architecture, "dtype": self.dtype,
                      "options": copy.deepcopy(self.model_options)},
            "gr": {"enabled": self.gr, "generator_widths": list(self.generator_widths),
                   "corruption": asdict(self.corruption)},
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "monitor": dict(self.monitor),
        }

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _section(doc, key, errors, default=None):
    v = doc.get(key, default)
    if v is None:
        errors.append(f"{key}: missing section")
        return {}
    if not isinstance(v, dict):
        errors.append(f"{key}: expected a mapping")
        return {}
    return v


def _build(cls, d, prefix, errors):
    try:
        obj = cls(**d)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except TypeError as e:
        errors.append(f"{prefix}: {e}")
    except (ConfigError, ValueError) as e:
        errors.append(f"{prefix}: {e}")
    return None


def from_dict(doc: dict, check_paths: bool = True) -> ExperimentConfig:
    """Validate a parsed config document; all problems are reported together."""
    errors = []
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    ds = _section(doc, "dataset", errors)
    kind = ds.get("kind")
    if kind not in ("omniglot", "image_folder"):
        errors.append(f"dataset.kind: must be 'omniglot' or 'image_folder', got {kind!r}")
    root = ds.get("root")
    if not root:
        errors.append("dataset.root: missing")
    elif check_paths and not Path(root).is_dir():
        errors.append(f"dataset.root: directory {root} does not exist")
    for key in ("train_classes", "val_classes"):
        if not isinstance(ds.get(key), int) or ds.get(key) < 0:
            errors.append(f"dataset.{key}: must be a non-negative integer")
    manifest = ds.get("split_manifest")
    if manifest and check_paths and not Path(manifest).is_file():
        errors.append(f"dataset.split_manifest: file {manifest} does not exist")

    model = _section(doc, "model", errors)
    arch = model.get("architecture")
    if arch not in ARCHITECTURES:
        errors.append(f"model.architecture: must be one of {ARCHITECTURES}, got {arch!r}")
    dtype = model.get("dtype", "float32")
    if dtype not in ("float32", "float64"):
        errors.append(f"model.dtype: must be float32 or float64, got {dtype!r}")

    gr = doc.get("gr") or {}
    corruption = _build(CorruptionConfig, gr.get("corruption", {}), "gr.corruption", errors)
    train = _build(TrainConfig, _section(doc, "train", errors, {}), "train", errors)
    ev = _build(EvalConfig, _section(doc, "eval", errors, {}), "eval", errors)
    known = {"schema_version", "name", "seed", "deterministic", "output_dir", "dataset",
             "model", "gr", "train", "eval", "monitor"}
    for k in sorted(set(doc) - known):
        errors.append(f"{k}: unknown top-level field")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return ExperimentConfig(
        name=str(doc.get("name", "experiment")), dataset=dict(ds), architecture=arch,
        train=train, eval=ev, model_options=dict(model.get("options") or {}), dtype=dtype,
        gr=bool(gr.get("enabled", False)), corruption=corruption,
        generator_widths=tuple(gr.get("generator_widths", (32, 64, 128))),
        monitor=dict(doc.get("monitor") or {}),
        output_dir=str(doc.get("output_dir", f"runs/{doc.get('name', 'experiment')}")),
        seed=int(doc.get("seed", 0)), deterministic=bool(doc.get("deterministic", False)))


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    return from_dict(doc, check_paths=check_paths)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("rpnet").joinpath("presets", f"{name}.yaml").read_text()


def load_preset(name: str, check_paths: bool = False, **overrides) -> ExperimentConfig:
    doc = yaml.safe_load(preset_text(name))
    for dotted, value in overrides.items():
        node = doc
        *parents, leaf = dotted.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(doc, check_paths=check_paths)
