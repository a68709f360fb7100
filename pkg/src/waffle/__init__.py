"""Offline detection of malicious federated-learning clients from spectral
embeddings of their data, plus the federated simulator it plugs into."""

from .aggregators import (
    aggregate,
    aggregate_fedavg,
    aggregate_geomed,
    aggregate_krum,
    aggregate_mkrum,
    aggregate_trimmed_mean,
)
from .attacks import AttackGrid, AttackSpec, apply_attack, apply_blur, apply_noise, sample_attack
from .config import ExperimentConfig, load_config
from .datasets import Dataset, SyntheticSpec, load_idx, synth_dataset
from .detector import MLPDetector, WaffleDetector, classify_and_filter, train_detector
from .federation import FederationConfig, build_federation, run_federation
from .metrics import DetectionReport, detection_metrics
from .pca import ClientEmbedder, ClientRecord, EmbeddingConfig, representative, top_r_pca
from .spectral import SpectralEmbedder, build_filter_bank, ft_embedding, wst

__version__ = "0.1.0"

__all__ = [
    "aggregate",
    "aggregate_fedavg",
    "aggregate_geomed",
    "aggregate_krum",
    "aggregate_mkrum",
    "aggregate_trimmed_mean",
    "AttackGrid",
    "AttackSpec",
    "apply_attack",
    "apply_blur",
    "apply_noise",
    "sample_attack",
    "ExperimentConfig",
    "load_config",
    "Dataset",
    "SyntheticSpec",
    "load_idx",
    "synth_dataset",
    "MLPDetector",
    "WaffleDetector",
    "classify_and_filter",
    "train_detector",
    "FederationConfig",
    "build_federation",
    "run_federation",
    "DetectionReport",
    "detection_metrics",
    "ClientEmbedder",
    "ClientRecord",
    "EmbeddingConfig",
    "representative",
    "top_r_pca",
    "SpectralEmbedder",
    "build_filter_bank",
    "ft_embedding",
    "wst",
]
