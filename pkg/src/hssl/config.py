"""Strict JSON run configuration.

Every section maps onto a frozen dataclass. Unknown keys are rejected with
their dotted paths, and :meth:`RunConfig.resolved` writes out every default
so that a resolved document re-parses to an equal one.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from enum import Enum

from .data import AugmentPolicy
from .engine import HsslConfig, ObjectiveConfig, OptimConfig
from .errors import ConfigError
from .zoo import AuxiliaryHeadSpec, BaseModelSpec, BlockSpec, MixerKind


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 4
    per_class: int = 100
    test_per_class: int = 50
    image_size: int = 32
    seed: int = 0
    train_path: str = ""
    test_path: str = ""

    def validate(self):
        if self.kind not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'cifar', got {self.kind!r}",
                              keys=["dataset.kind"])
        if self.kind == "cifar" and not self.train_path:
            raise ConfigError("cifar dataset needs train_path", keys=["dataset.train_path"])
        if self.kind == "synthetic" and (self.num_classes < 2 or self.per_class < 1):
            raise ConfigError("synthetic dataset needs >= 2 classes and >= 1 image per class",
                              keys=["dataset.num_classes", "dataset.per_class"])


@dataclass(frozen=True)
class SearchConfig:
    data_fraction: float = 0.1
    epochs: int = -1
    # False: pretrain starts from the searched base stored at ``resume_base``
    reinitialize: bool = True
    resume_base: str = ""

    def validate(self):
        if not 0 < self.data_fraction <= 1:
            raise ConfigError("search.data_fraction must lie in (0, 1]", keys=["search.data_fraction"])
        if not self.reinitialize and not self.resume_base:
            raise ConfigError("search.reinitialize=false needs search.resume_base",
                              keys=["search.reinitialize", "search.resume_base"])


@dataclass(frozen=True)
class ProbeConfig:
    k: int = 10
    temperature: float = 0.07
    linear_epochs: int = 100
    linear_lr: float = 0.1
    alphas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)

    def validate(self):
        if self.k < 1 or not self.temperature > 0:
            raise ConfigError("probe.k must be >= 1 and probe.temperature > 0",
                              keys=["probe.k", "probe.temperature"])
        if any(not 0 <= a <= 1 for a in self.alphas):
            raise ConfigError("probe.alphas must lie in [0, 1]", keys=["probe.alphas"])


_MODEL_KEYS = ("base", "heads", "share_projections", "multi_head", "supervision")
_TOP_KEYS = ("dataset", "model", "objective", "optimizer", "augment", "search", "probe",
             "output_dir", "seed", "workers", "checkpoint_every")


def _coerce(value, default, path: str):
    """Type-check a JSON scalar/list against the field default's type."""
    if isinstance(default, Enum):
        return type(default).parse(value) if hasattr(type(default), "parse") else type(default)(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean", keys=[path])
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer", keys=[path])
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number", keys=[path])
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string", keys=[path])
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list", keys=[path])
        inner = default[0] if default else None
        return tuple(_coerce(v, inner, f"{path}[{i}]") if inner is not None else v
                     for i, v in enumerate(value))
    if default is None:
        return value
    raise ConfigError(f"{path}: unsupported value", keys=[path])


def _section(cls, data, path: str, overrides: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object", keys=[path])
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {unknown}", keys=[f"{path}.{k}" for k in unknown])
    kwargs = dict(overrides or {})
    for name, value in data.items():
        f = names[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[name] = _coerce(value, default, f"{path}.{name}")
    return cls(**kwargs)


_BLOCK_DEFAULTS = {"mlp_ratio": 4.0, "keep_shortcut": True, "num_heads": 4, "kernel_size": 0}
_HEAD_SHORTHAND = ("mixer", "depth", "width", "mlp_ratio", "num_heads", "kernel_size")


def _block(data, path) -> BlockSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object", keys=[path])
    allowed = {"mixer", "width"} | set(_BLOCK_DEFAULTS)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {unknown}", keys=[f"{path}.{k}" for k in unknown])
    for req in ("mixer", "width"):
        if req not in data:
            raise ConfigError(f"{path}.{req} is required", keys=[f"{path}.{req}"])
    kw = {k: _coerce(data[k], d, f"{path}.{k}") for k, d in _BLOCK_DEFAULTS.items() if k in data}
    if kw.get("kernel_size") == 0:
        kw["kernel_size"] = None
    return BlockSpec(MixerKind.parse(data["mixer"]), _coerce(data["width"], 0, f"{path}.width"), **kw)


def _head(data, path) -> AuxiliaryHeadSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object", keys=[path])
    allowed = {"id", "blocks", "remove_first_shortcut"} | set(_HEAD_SHORTHAND)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {unknown}", keys=[f"{path}.{k}" for k in unknown])
    if "id" not in data:
        raise ConfigError(f"{path}.id is required", keys=[f"{path}.id"])
    head_id = str(data["id"])
    rfs = _coerce(data.get("remove_first_shortcut", False), False, f"{path}.remove_first_shortcut")
    if "blocks" in data:
        if any(k in data for k in _HEAD_SHORTHAND):
            raise ConfigError(f"{path}: give either blocks or mixer/depth/width, not both", keys=[path])
        blocks = tuple(_block(b, f"{path}.blocks[{i}]") for i, b in enumerate(data["blocks"]))
        return AuxiliaryHeadSpec(head_id, blocks, rfs)
    for req in ("mixer", "depth", "width"):
        if req not in data:
            raise ConfigError(f"{path}.{req} is required", keys=[f"{path}.{req}"])
    block = {k: data[k] for k in ("mixer", "width", "mlp_ratio", "num_heads", "kernel_size") if k in data}
    depth = _coerce(data["depth"], 0, f"{path}.depth")
    spec = AuxiliaryHeadSpec(head_id, tuple(_block(block, path) for _ in range(depth)), rfs)
    spec.validate()
    return spec


def _dump(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [_dump(v) for v in obj]
    return obj


def _dump_section(obj) -> dict:
    return {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _dump_head(h: AuxiliaryHeadSpec) -> dict:
    blocks = []
    for i, b in enumerate(h.blocks):
        d = _dump_section(b)
        d["kernel_size"] = d["kernel_size"] or 0
        if i == 0 and h.remove_first_shortcut:
            d["keep_shortcut"] = True  # re-applied by remove_first_shortcut on parse
        blocks.append(d)
    return {"id": h.id, "remove_first_shortcut": h.remove_first_shortcut, "blocks": blocks}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hssl: HsslConfig = field(default_factory=HsslConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    output_dir: str = "runs/default"
    checkpoint_every: int = 1

    @property
    def seed(self) -> int:
        return self.hssl.seed

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(_TOP_KEYS))
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}", keys=unknown)
        model = doc.get("model", {}) or {}
        if not isinstance(model, dict):
            raise ConfigError("model must be an object", keys=["model"])
        bad = sorted(set(model) - set(_MODEL_KEYS))
        if bad:
            raise ConfigError(f"unknown keys in model: {bad}", keys=[f"model.{k}" for k in bad])
        base = _section(BaseModelSpec, model.get("base"), "model.base")
        heads_doc = model.get("heads", [])
        if not isinstance(heads_doc, list):
            raise ConfigError("model.heads must be a list", keys=["model.heads"])
        heads = tuple(_head(h, f"model.heads[{i}]") for i, h in enumerate(heads_doc))
        seed = _coerce(doc.get("seed", 0), 0, "seed")
        hssl = HsslConfig(
            base=base, heads=heads,
            share_projections=_coerce(model.get("share_projections", False), False, "model.share_projections"),
            multi_head=_coerce(model.get("multi_head", "concat"), "", "model.multi_head"),
            supervision=_coerce(model.get("supervision", "heterogeneous"), "", "model.supervision"),
            objective=_section(ObjectiveConfig, doc.get("objective"), "objective"),
            optim=_section(OptimConfig, doc.get("optimizer"), "optimizer"),
            augment=_section(AugmentPolicy, doc.get("augment"), "augment"),
            seed=seed, workers=_coerce(doc.get("workers", 0), 0, "workers"))
        cfg = cls(dataset=_section(DatasetConfig, doc.get("dataset"), "dataset"), hssl=hssl,
                  search=_section(SearchConfig, doc.get("search"), "search"),
                  probe=_section(ProbeConfig, doc.get("probe"), "probe"),
                  output_dir=_coerce(doc.get("output_dir", "runs/default"), "", "output_dir"),
                  checkpoint_every=_coerce(doc.get("checkpoint_every", 1), 0, "checkpoint_every"))
        return cfg.validate()

    def validate(self, require_heads: bool = False) -> "RunConfig":
        self.dataset.validate()
        self.search.validate()
        self.probe.validate()
        self.hssl.validate()
        return self

    def resolved(self) -> dict:
        h = self.hssl
        return {
            "dataset": _dump_section(self.dataset),
            "model": {"base": _dump_section(h.base), "heads": [_dump_head(x) for x in h.heads],
                      "share_projections": h.share_projections, "multi_head": h.multi_head,
                      "supervision": h.supervision},
            "objective": _dump_section(h.objective),
            "optimizer": _dump_section(h.optim),
            "augment": _dump_section(h.augment),
            "search": _dump_section(self.search),
            "probe": _dump_section(self.probe),
            "output_dir": self.output_dir,
            "seed": h.seed,
            "workers": h.workers,
            "checkpoint_every": self.checkpoint_every,
        }

    def to_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, hssl=dataclasses.replace(self.hssl, seed=int(seed)))


def parse_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc)


def load_config(path) -> RunConfig:
    with open(os.fspath(path), encoding="utf-8") as fh:
        return parse_config(fh.read())
