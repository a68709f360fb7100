"""Experiment configuration: a validated tree of blocks loaded from YAML or JSON.

Every field has a default, so an empty file is a complete configuration.
Unknown keys are rejected at every level.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attacks import AttackGrid
from .datasets import SyntheticSpec
from .detector import DetectorConfig, config_fingerprint
from .exceptions import ConfigError
from .federation import FederationConfig
from .pca import EmbeddingConfig
from .rng import derive_rng

__all__ = ["ExperimentConfig", "load_config", "dump_config", "config_from_dict"]

CONFIG_SCHEMA = 1


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FederationBlock(_Block):
    n_clients: int = Field(100, ge=1)
    participants: int = Field(10, ge=1)
    rounds: int = Field(500, ge=1)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    aggregator: Literal["fedavg", "krum", "mkrum", "geomed", "trimmed_mean"] = "fedavg"
    fedavg_weighting: Literal["uniform", "samples"] = "uniform"
    krum_f: Optional[int] = Field(None, ge=0)
    mkrum_k: int = Field(5, ge=1)
    trim: float = Field(0.2, ge=0.0, lt=0.5)
    geomed_tol: float = Field(1e-8, gt=0)
    geomed_maxit: int = Field(1000, ge=1)
    detector: Literal["none", "waffle_wst", "waffle_ft", "oracle"] = "none"
    malicious_fraction: float = Field(0.0, ge=0.0, le=1.0)
    dirichlet_alpha: float = Field(1000.0, gt=0)
    model: Literal["linear_softmax", "small_mlp"] = "linear_softmax"
    hidden: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _participants_fit(self):
        if self.participants > self.n_clients:
            raise ValueError("participants must not exceed n_clients")
        return self


class AttackBlock(_Block):
    beta_min: int = 3
    beta_max: int = 19
    sigma_min: float = Field(0.5, gt=0)
    sigma_max: float = Field(2.0, gt=0)
    noise_mode: Literal["iid_gaussian", "brownian_sheet"] = "iid_gaussian"

    @model_validator(mode="after")
    def _grid_valid(self):
        try:
            AttackGrid(self.beta_min, self.beta_max, self.sigma_min, self.sigma_max)
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        return self


class DetectorBlock(_Block):
    epochs: int = Field(100, ge=1)
    n_fictitious: int = Field(20, ge=2)
    hidden: tuple[int, ...] = (64, 32, 16)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    partition: Literal["by_kind", "random"] = "by_kind"
    standardize: bool = True

    @field_validator("n_fictitious")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("n_fictitious must be even")
        return v


class SpectralBlock(_Block):
    representation: Literal["wst", "ft"] = "wst"
    J: int = Field(3, ge=1)
    L: int = Field(6, ge=1)
    Q: int = Field(1, ge=1)
    relative_width: float = Field(0.5, gt=0.0, le=1.0)
    pool: int = Field(8, ge=1)
    max_order: int = Field(1, ge=1, le=2)


class PcaBlock(_Block):
    n_components: int = Field(10, ge=1)


class SyntheticBlock(_Block):
    num_classes: int = Field(2, ge=2)
    samples_per_class: int = Field(1500, ge=1)
    height: int = Field(28, ge=4)
    width: int = Field(28, ge=4)
    channels: int = Field(1, ge=1)
    generator: Literal["textured_patches", "gaussian_blobs"] = "textured_patches"
    separation: float = Field(1.0, gt=0)
    jitter: float = Field(2.0, ge=0)
    texture: float = Field(0.15, ge=0)
    ring_radius: float = Field(0.25, ge=0)
    blob_sigma: float = Field(0.12, gt=0)
    size_spread: float = Field(0.0, ge=0)
    size_jitter: float = Field(0.0, ge=0, lt=1)
    background: float = 0.35
    background_texture: float = Field(0.08, ge=0)
    pixel_noise: float = Field(0.0, ge=0)


class DatasetBlock(_Block):
    source: Literal["synthetic", "idx"] = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    synthetic: SyntheticBlock = SyntheticBlock()
    aux_fraction: float = Field(1 / 3, gt=0.0, lt=1.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx source needs train_images and train_labels")
        if bool(self.test_images) != bool(self.test_labels):
            raise ValueError("test_images and test_labels must be given together")
        return self


class TheoryBlock(_Block):
    trials: int = Field(100_000, ge=1000)
    distribution: Literal["gaussian", "uniform"] = "gaussian"


class ExperimentConfig(_Block):
    schema_version: int = CONFIG_SCHEMA
    seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    federation: FederationBlock = FederationBlock()
    attacks: AttackBlock = AttackBlock()
    detector: DetectorBlock = DetectorBlock()
    spectral: SpectralBlock = SpectralBlock()
    pca: PcaBlock = PcaBlock()
    dataset: DatasetBlock = DatasetBlock()
    theory: TheoryBlock = TheoryBlock()

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema version {v}")
        return v

    # conversions to the runtime dataclasses

    def attack_grid(self, p_attack: float = 0.5) -> AttackGrid:
        a = self.attacks
        return AttackGrid(a.beta_min, a.beta_max, a.sigma_min, a.sigma_max, p_attack=p_attack,
                          noise_mode=a.noise_mode)

    def embedding_config(self, representation: str | None = None) -> EmbeddingConfig:
        s = self.spectral
        return EmbeddingConfig(self.pca.n_components, representation or s.representation, s.J, s.L, s.Q,
                               s.relative_width, s.pool, s.max_order)

    def detector_config(self) -> DetectorConfig:
        d = self.detector
        return DetectorConfig(tuple(d.hidden), d.epochs, d.n_fictitious, d.learning_rate, d.batch_size,
                              d.threshold, d.partition, d.standardize, self.attack_grid())

    def federation_config(self, detector: str | None = None, seed: int | None = None) -> FederationConfig:
        f = self.federation.model_dump()
        if detector is not None:
            f["detector"] = detector
        return FederationConfig(**f, threshold=self.detector.threshold, attack_grid=self.attack_grid(1.0),
                                seed=self.seed if seed is None else seed)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.dataset.synthetic.model_dump())

    def fingerprint(self, representation: str | None = None) -> str:
        """Hash of the spectral, PCA and detector blocks (as stored in checkpoints)."""
        return config_fingerprint(self.embedding_config(representation), self.detector_config())

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def rng(self, component: str, *ids: int):
        """Random stream owned by ``component``; a pure function of the master seed."""
        return derive_rng(self.seed, component, *ids)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": int(seed)})

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_format_error(exc)}") from None


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) overlay and fill in every default."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return config_from_dict(data)


def dump_config(config: ExperimentConfig, path) -> Path:
    """Write the fully defaulted config; YAML unless the suffix is .json."""
    path = Path(path)
    data = config.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=True))
    return path
