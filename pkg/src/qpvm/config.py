"""Run configuration: JSON document, schema validation, dataset resolution."""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from qpvm.data import Dataset, DataError, load_cifar, load_idx, subset, synthetic_dataset
from qpvm.model import ConfigError, ConvLayerSpec, ModelConfig

OUTPUT_DIR_ENV = "QPVM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs/latest"

_subset_props = {
    "train_per_class": {"type": ["integer", "null"], "minimum": 1},
    "test_per_class": {"type": ["integer", "null"], "minimum": 1},
    "train_total": {"type": ["integer", "null"], "minimum": 1},
    "test_total": {"type": ["integer", "null"], "minimum": 1},
    "subset_seed": {"type": "integer"},
}

DATASET_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "kind": {"const": "synthetic"},
                "name": {"type": "string"},
                "generator": {"enum": ["corner_blobs", "bars_stripes"]},
                "train_size": {"type": "integer", "minimum": 1},
                "test_size": {"type": "integer", "minimum": 0},
                "image_dim": {"type": "integer", "minimum": 4},
                "num_classes": {"type": "integer", "minimum": 2, "maximum": 4},
                "seed": {"type": "integer"},
            },
            "required": ["kind", "generator", "train_size"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "kind": {"const": "idx"},
                "name": {"type": "string"},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "num_classes": {"type": "integer", "minimum": 2},
                "label_offset": {"type": "integer"},
                **_subset_props,
            },
            "required": ["kind", "train_images", "train_labels", "num_classes"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "kind": {"const": "cifar"},
                "name": {"type": "string"},
                "train_files": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "test_files": {"type": "array", "items": {"type": "string"}},
                "num_classes": {"type": "integer", "minimum": 2},
                **_subset_props,
            },
            "required": ["kind", "train_files"],
            "additionalProperties": False,
        },
    ]
}

_conv_schema = {
    "type": "object",
    "properties": {
        "kernel": {"type": "integer", "minimum": 1},
        "stride": {"type": "integer", "minimum": 1},
        "padding": {"type": "integer", "minimum": 0},
        "in_channels": {"type": "integer", "minimum": 1},
        "out_channels": {"type": "integer", "minimum": 1},
        "qubits": {"type": "integer", "minimum": 1, "maximum": 24},
        "pqc_depth": {"type": "integer", "minimum": 1},
        "entangler": {"enum": ["ring_cnot", "ring_crx"]},
        "angle_scale": {"type": "number"},
    },
    "required": ["kernel", "stride"],
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "conv_layers": {"type": "array", "items": _conv_schema},
                "head_qubits": {"type": "integer", "minimum": 1, "maximum": 24},
                "head_depth": {"type": "integer", "minimum": 1},
                "head_entangler": {"enum": ["ring_cnot", "ring_crx"]},
                "angle_scale": {"type": "number"},
                "num_classes": {"type": "integer", "minimum": 2},
                "input_shape": {
                    "type": "array", "items": {"type": "integer", "minimum": 1},
                    "minItems": 3, "maxItems": 3,
                },
            },
            "required": ["head_qubits"],
            "additionalProperties": False,
        },
        "optimizer": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["adam", "sgd"]},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "dataset": DATASET_SCHEMA,
        "regularizer": {"type": "boolean"},
        "povm_softmax_baseline": {"type": "boolean"},
        "beta": {"type": "number"},
        "grad_fraction": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "output_dir": {"type": "string"},
    },
    "required": ["model", "dataset"],
    "additionalProperties": False,
}

DEFAULTS = {
    "optimizer": {"kind": "adam", "learning_rate": 8e-3},
    "batch_size": 1024,
    "epochs": 10,
    "seed": 0,
    "regularizer": True,
    "povm_softmax_baseline": False,
    "beta": 1.0,
    "grad_fraction": None,
}


def _field_path(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<root>"


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> RunConfig:
        try:
            jsonschema.validate(doc, RUN_SCHEMA)
        except jsonschema.ValidationError as err:
            best = jsonschema.exceptions.best_match([err]) or err
            raise ConfigError(f"config field '{_field_path(best)}': {best.message}") from None
        raw = copy.deepcopy(DEFAULTS)
        for key, value in doc.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = copy.deepcopy(value)
        return cls(raw, Path(base_dir) if base_dir else Path.cwd())

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path}: invalid JSON ({err})") from None
        return cls.from_dict(doc, path.parent)

    def __getattr__(self, name):
        try:
            return self.__dict__["raw"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def output_path(self) -> Path:
        out = self.raw.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
        out = Path(out)
        return out if out.is_absolute() else self.base_dir / out

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def load_datasets(self) -> tuple[Dataset, Dataset | None]:
        return load_dataset_spec(self.raw["dataset"], self.base_dir)

    def model_config(self, train: Dataset) -> ModelConfig:
        m = self.raw["model"]
        num_classes = m.get("num_classes", train.num_classes)
        if num_classes != train.num_classes:
            raise ConfigError(
                f"config field 'model.num_classes': {num_classes} does not match "
                f"dataset class count {train.num_classes}"
            )
        input_shape = tuple(m.get("input_shape", train.image_shape))
        if input_shape != train.image_shape:
            raise ConfigError(
                f"config field 'model.input_shape': {list(input_shape)} does not match "
                f"dataset images {list(train.image_shape)}"
            )
        readout = "povm_softmax" if self.raw["povm_softmax_baseline"] else "pvm"
        try:
            return ModelConfig(
                input_shape=input_shape,
                conv_layers=tuple(ConvLayerSpec(**c) for c in m.get("conv_layers", [])),
                head_qubits=m["head_qubits"],
                num_classes=num_classes,
                head_depth=m.get("head_depth", 1),
                head_entangler=m.get("head_entangler", "ring_cnot"),
                angle_scale=m.get("angle_scale", math.pi),
                readout=readout,
                beta=self.raw["beta"],
            )
        except ConfigError as err:
            raise ConfigError(f"config field 'model': {err}") from None


def parse_dataset_arg(value: str, base_dir=None) -> dict:
    """Dataset spec from a JSON file path or an inline JSON object."""
    text = value.strip()
    if not text.startswith("{"):
        path = Path(value)
        if not path.exists():
            raise ConfigError(f"dataset spec file not found: {value}")
        text = path.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"dataset spec: invalid JSON ({err})") from None
    return spec


def load_dataset_spec(spec: dict, base_dir=None) -> tuple[Dataset, Dataset | None]:
    try:
        jsonschema.validate(spec, DATASET_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config field 'dataset': {err.message}") from None
    base = Path(base_dir) if base_dir else Path.cwd()

    def path_of(key):
        p = Path(spec[key])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigError(f"config field 'dataset.{key}': file not found: {p}")
        return p

    kind = spec["kind"]
    name = spec.get("name", kind)
    if kind == "synthetic":
        gen = spec["generator"]
        dim = spec.get("image_dim", 8)
        k = spec.get("num_classes", 4)
        seed = spec.get("seed", 0)
        train = synthetic_dataset(gen, spec["train_size"], dim, k, seed)
        test_size = spec.get("test_size", 0)
        test = synthetic_dataset(gen, test_size, dim, k, seed + 1) if test_size else None
        return train, test
    if kind == "idx":
        k = spec["num_classes"]
        offset = spec.get("label_offset", 1 if name.lower().startswith("emnist") else 0)
        train = load_idx(path_of("train_images"), path_of("train_labels"), k, offset, name)
        test = None
        if "test_images" in spec:
            test = load_idx(path_of("test_images"), path_of("test_labels"), k, offset, name)
    else:
        k = spec.get("num_classes", 10)
        train = load_cifar([_resolve_each(base, p) for p in spec["train_files"]], k, name)
        test = None
        if spec.get("test_files"):
            test = load_cifar([_resolve_each(base, p) for p in spec["test_files"]], k, name)
    seed = spec.get("subset_seed", 0)
    try:
        train = _maybe_subset(train, spec.get("train_per_class"), spec.get("train_total"), seed)
        if test is not None:
            test = _maybe_subset(test, spec.get("test_per_class"), spec.get("test_total"), seed + 1)
    except DataError as err:
        raise ConfigError(f"config field 'dataset': {err}") from None
    return train, test


def _resolve_each(base: Path, p: str) -> Path:
    path = Path(p)
    path = path if path.is_absolute() else base / path
    if not path.exists():
        raise ConfigError(f"config field 'dataset': file not found: {path}")
    return path


def _maybe_subset(ds: Dataset, per_class, total, seed) -> Dataset:
    if per_class is None and total is None:
        return ds
    return subset(ds, n_per_class=per_class, total=total, seed=seed)
