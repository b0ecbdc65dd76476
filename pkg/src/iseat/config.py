"""Experiment configuration files (JSON) and dataset resolution."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

from .data import SYNTHETIC_KINDS, Dataset, gen_synthetic, load_idx, split
from .errors import ConfigError, IdxFormatError
from .model import ACTIVATIONS, ModelSpec
from .training import RunConfig


class SyntheticSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["synthetic"]
    kind: Literal[SYNTHETIC_KINDS]  # type: ignore[valid-type]
    n: int = Field(400, ge=2)
    noise: float = Field(0.1, ge=0)
    seed: int = Field(0, ge=0)
    test_fraction: float = Field(0.25, gt=0, lt=1)


class IdxSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["idx"]
    images: str
    labels: str
    test_images: str | None = None
    test_labels: str | None = None
    classes: list[int] | None = None
    test_fraction: float = Field(0.2, gt=0, lt=1)
    split_seed: int | None = Field(None, ge=0, description="defaults to the run seed")


DatasetBlock = Annotated[Union[SyntheticSource, IdxSource], Field(discriminator="source")]


class ModelBlock(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    widths: list[int] = Field(min_length=2)
    activation: Literal[ACTIVATIONS] = "relu"  # type: ignore[valid-type]
    seed: int | None = Field(None, ge=0, description="initialisation seed; defaults to the run seed")


class ExperimentConfig(RunConfig):
    label: str = "run"
    out_dir: str | None = None
    dataset: DatasetBlock
    model: ModelBlock
    init_checkpoint: str | None = None

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self._base_dir / p

    def run_config(self) -> RunConfig:
        fields = set(RunConfig.model_fields)
        return RunConfig.model_validate(self.model_dump(include=fields, by_alias=True))

    def model_spec(self) -> ModelSpec:
        seed = self.seed if self.model.seed is None else self.model.seed
        return ModelSpec(tuple(self.model.widths), self.model.activation, seed)

    def snapshot(self) -> dict:
        doc = self.model_dump(by_alias=True, mode="json")
        ds = doc["dataset"]
        for key in ("images", "labels", "test_images", "test_labels"):
            if ds.get(key):
                ds[key] = str(self.resolve(ds[key]))
        if doc.get("init_checkpoint"):
            doc["init_checkpoint"] = str(self.resolve(doc["init_checkpoint"]))
        return doc


def _format_errors(exc: ValidationError, origin: str) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{origin}: {loc}: {err['msg']}")
    return "\n".join(lines)


def parse_config(doc: dict, *, base_dir: Path | None = None, origin: str = "<config>", **overrides) -> ExperimentConfig:
    doc = dict(doc)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, origin)) from None
    if cfg.model.widths[0] < 1 or any(w < 1 for w in cfg.model.widths):
        raise ConfigError(f"{origin}: model.widths: all widths must be >= 1")
    if cfg.method == "topn_finetune" and cfg.init_checkpoint is None:
        raise ConfigError(f"{origin}: init_checkpoint: required for method 'topn_finetune'")
    if base_dir is not None:
        cfg._base_dir = base_dir
    return cfg


def load_config(path, *, seed: int | None = None, precision: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc, base_dir=path.parent.resolve(), origin=str(path), seed=seed, precision=precision)


def _read_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if isinstance(ds, SyntheticSource):
        full = gen_synthetic(ds.kind, ds.n, ds.noise, ds.seed)
        return split(full, ds.test_fraction, ds.seed)
    full = load_idx(cfg.resolve(ds.images), cfg.resolve(ds.labels))
    if ds.classes is not None:
        full = full.select_classes(ds.classes)
    if ds.test_images is None or ds.test_labels is None:
        return split(full, ds.test_fraction, cfg.seed if ds.split_seed is None else ds.split_seed)
    test = load_idx(cfg.resolve(ds.test_images), cfg.resolve(ds.test_labels))
    if ds.classes is not None:
        test = test.select_classes(ds.classes)
    return full, test


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for a config; IDX errors propagate, anything else is a ConfigError."""
    try:
        train, test = _read_datasets(cfg)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    except IdxFormatError:
        raise
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    if train.n_features != cfg.model.widths[0]:
        raise ConfigError(f"model.widths: input width {cfg.model.widths[0]} does not match {train.n_features} features")
    if max(train.n_classes, test.n_classes) > cfg.model.widths[-1]:
        raise ConfigError(f"model.widths: {cfg.model.widths[-1]} outputs cannot cover the dataset's labels")
    return train, test
