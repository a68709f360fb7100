"""End-to-end pipelines driven by an ``ExperimentConfig``.

Each pipeline draws its randomness from streams named after its stage, so a
stage's output does not change when an unrelated stage is added or skipped.
Report files are canonical JSON without timestamps: equal seeds give
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets import Dataset, load_idx, split_dataset, synth_dataset
from .detector import classify_and_filter, load_checkpoint, save_checkpoint, train_detector
from .exceptions import SchemaVersionError
from .federation import build_federation, run_federation, write_history
from .metrics import detection_metrics
from .pca import embed_clients
from .theory import LemmaScenario, lemma_bias_mc, lemma_variance_mc, proposition_report

__all__ = [
    "REPORT_SCHEMA",
    "prepare_data",
    "train_detector_from_config",
    "run_detection",
    "run_fl",
    "run_theory_suite",
    "spectral_dump",
    "write_report",
    "read_report",
    "THEORY_BIAS_SCENARIO",
    "THEORY_VARIANCE_GRID",
]

REPORT_SCHEMA = 1


def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Return ``(aux, train, test)``; the auxiliary set is disjoint from the federation's data."""
    ds = cfg.dataset
    if ds.source == "synthetic":
        data = synth_dataset(cfg.synthetic_spec(), cfg.rng("dataset"))
    else:
        data = load_idx(ds.train_images, ds.train_labels)
    aux, rest = split_dataset(data, ds.aux_fraction, cfg.rng("aux-split"))
    if ds.test_images:
        test = load_idx(ds.test_images, ds.test_labels)
        train = rest
    else:
        test, train = split_dataset(rest, ds.test_fraction, cfg.rng("test-split"))
    return aux, train, test


def train_detector_from_config(cfg: ExperimentConfig, aux: Dataset | None = None, representation=None,
                               n_jobs=None):
    """Train on the auxiliary split; returns ``(model, loss_trace)``."""
    if aux is None:
        aux = prepare_data(cfg)[0]
    return train_detector(aux.images, cfg.detector_config(), cfg.embedding_config(representation),
                          cfg.rng("detector-training"), n_jobs)


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_report(path, kind: str, payload: dict) -> Path:
    """Write ``payload`` as a schema-versioned JSON report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_canonical({"schema_version": REPORT_SCHEMA, "kind": kind, **payload}))
    return path


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != REPORT_SCHEMA:
        raise SchemaVersionError(f"{path}: unsupported report schema version {doc.get('schema_version')!r}")
    return doc


def run_detection(cfg: ExperimentConfig, model, representation=None, n_jobs=None):
    """Build the attacked federation, embed every client and classify it.

    Returns ``(report_dict, clients)``.
    """
    _, train, _ = prepare_data(cfg)
    clients = build_federation(train, cfg.federation_config())
    failed = set(embed_clients(clients, cfg.embedding_config(representation), n_jobs))
    embedded = [c for c in clients if c.client_id not in failed]
    benign, flagged, scores = classify_and_filter(model, embedded, cfg.detector.threshold)
    flagged = sorted(set(flagged) | failed)
    truth = [c.is_malicious for c in clients]
    pred = [c.client_id in set(flagged) for c in clients]
    report = detection_metrics(pred, truth)
    payload = {
        "seed": cfg.seed,
        "fingerprint": cfg.fingerprint(representation),
        "metrics": report.to_dict(),
        "flagged_ids": flagged,
        "unembeddable_ids": sorted(failed),
        "clients": [
            {"id": c.client_id, "role": None if c.role is None else c.role.to_dict(),
             "score": scores.get(c.client_id), "n_samples": len(c.samples)}
            for c in clients
        ],
    }
    return payload, clients


def run_fl(cfg: ExperimentConfig, model=None, detector: str | None = None, out_dir=None, n_jobs=None):
    """Run one federation; optionally write ``rounds.jsonl`` / ``summary.csv`` to ``out_dir``."""
    fed = cfg.federation_config(detector)
    representation = {"waffle_wst": "wst", "waffle_ft": "ft"}.get(fed.detector)
    _, train, test = prepare_data(cfg)
    clients = build_federation(train, fed)
    emb = cfg.embedding_config(representation) if representation else None
    history = run_federation(fed, clients, test, model, emb, n_jobs)
    if out_dir is not None:
        write_history(history, out_dir)
    return history


THEORY_BIAS_SCENARIO = dict(B=6, M=4, theta_b=0.0, theta_m=1.0, sigma_b=1.0, sigma_m=1.0)
# sm^2 values straddle the threshold (2 + M/B) sb^2, staying outside the 10% guard band
THEORY_VARIANCE_GRID = [
    dict(B=5, M=5, sigma_b=1.0, sigma_m=float(np.sqrt(1.0))),
    dict(B=5, M=5, sigma_b=1.0, sigma_m=float(np.sqrt(2.5))),
    dict(B=5, M=5, sigma_b=1.0, sigma_m=float(np.sqrt(3.5))),
    dict(B=8, M=2, sigma_b=1.0, sigma_m=float(np.sqrt(1.5))),
    dict(B=8, M=2, sigma_b=1.0, sigma_m=3.0),
    dict(B=6, M=4, sigma_b=1.0, sigma_m=5.0),
]


def run_theory_suite(cfg: ExperimentConfig) -> dict:
    """Bias check, the variance threshold grid and the proposition on each grid point."""
    t = cfg.theory
    bias_s = LemmaScenario(**THEORY_BIAS_SCENARIO, trials=t.trials, seed=int(cfg.rng("theory-bias").integers(2**31)),
                           distribution=t.distribution)
    bias = lemma_bias_mc(bias_s)
    rows = []
    for i, kw in enumerate(THEORY_VARIANCE_GRID):
        s = LemmaScenario(**kw, trials=t.trials, seed=int(cfg.rng("theory-variance", i).integers(2**31)),
                          distribution=t.distribution)
        var = lemma_variance_mc(s)
        prop = proposition_report(lemma_bias_mc(s), var, s.M)
        rows.append({"scenario": kw, "variance": var.to_dict(), "proposition": prop.to_dict()})
    passed = bias.passed and all(r["variance"]["passed"] and r["proposition"]["outcome"] != "fail" for r in rows)
    return {"seed": cfg.seed, "bias": {"scenario": THEORY_BIAS_SCENARIO, **bias.to_dict()},
            "variance_grid": rows, "passed": bool(passed)}


def spectral_dump(cfg: ExperimentConfig, out_dir, n_jobs=None) -> Path:
    """Write every client's embedding with its ground-truth role to ``embeddings.csv``."""
    _, train, _ = prepare_data(cfg)
    clients = build_federation(train, cfg.federation_config())
    embed_clients(clients, cfg.embedding_config(), n_jobs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "embeddings.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = max((len(c.embedding) for c in clients if c.embedding is not None), default=0)
        w.writerow(["schema_version", "client_id", "attack", "beta", "sigma", *[f"f{i}" for i in range(dim)]])
        for c in clients:
            role = c.role
            feats = [] if c.embedding is None else [repr(float(v)) for v in c.embedding]
            w.writerow([REPORT_SCHEMA, c.client_id, "none" if role is None else role.kind,
                        "" if role is None or role.beta is None else role.beta,
                        "" if role is None or role.sigma is None else repr(role.sigma), *feats])
    return path


def load_detector(path, cfg: ExperimentConfig, representation=None):
    """Load a checkpoint, insisting that it matches ``cfg``."""
    model, _ = load_checkpoint(path, cfg.fingerprint(representation))
    return model


def save_detector(path, model, cfg: ExperimentConfig, trace, representation=None):
    save_checkpoint(path, model, cfg.embedding_config(representation), cfg.detector_config(), cfg.seed, trace)
    return Path(path)
