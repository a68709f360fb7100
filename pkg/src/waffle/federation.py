"""Federated training simulator with optional offline filtering before round 1.

Parameters of the global model travel as flat float64 vectors. A run is
fully determined by ``FederationConfig.seed``: every random draw comes from
a stream derived from that seed and the role it plays (partitioning,
attacks, participant sampling, each client's local training).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from ._validation import check_positive_int, check_random_state
from .aggregators import AGGREGATORS, aggregate
from .attacks import AttackGrid, attack_stack, sample_attack
from .datasets import Dataset
from .exceptions import DataValidationError, EmptyFederationError, SchemaVersionError
from .metrics import detection_metrics
from .optim import AdamState, adam_update
from .pca import ClientRecord, EmbeddingConfig, embed_clients
from .rng import derive_rng

__all__ = [
    "GlobalModelSpec",
    "init_params",
    "model_logits",
    "cross_entropy_and_grad",
    "model_accuracy",
    "local_train",
    "LocalTrainingError",
    "dirichlet_partition",
    "FederationConfig",
    "build_federation",
    "RoundRecord",
    "RoundHistory",
    "run_federation",
    "write_history",
    "read_history",
]

HISTORY_SCHEMA = 1
DETECTORS = ("none", "waffle_wst", "waffle_ft", "oracle")


class LocalTrainingError(FloatingPointError):
    """A client's local loss became non-finite."""


# ---------------------------------------------------------------------------
# global model

@dataclass(frozen=True)
class GlobalModelSpec:
    """``linear_softmax`` or ``small_mlp`` (one tanh hidden layer) with cross-entropy."""

    input_dim: int
    num_classes: int
    architecture: str = "linear_softmax"
    hidden: int = 32

    def __post_init__(self):
        if self.architecture not in ("linear_softmax", "small_mlp"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        check_positive_int(self.input_dim, "input_dim")
        check_positive_int(self.num_classes, "num_classes", minimum=2)
        check_positive_int(self.hidden, "hidden")

    @property
    def shapes(self) -> list:
        d, c, h = self.input_dim, self.num_classes, self.hidden
        if self.architecture == "linear_softmax":
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))


def _unpack(theta, spec: GlobalModelSpec):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise DataValidationError(f"parameter vector has shape {theta.shape}, model needs ({spec.n_params},)")
    out, pos = [], 0
    for s in spec.shapes:
        n = int(np.prod(s))
        out.append(theta[pos:pos + n].reshape(s))
        pos += n
    return out


def init_params(spec: GlobalModelSpec, rng=None) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in) for weights, zero biases."""
    rng = check_random_state(rng)
    parts = []
    for s in spec.shapes:
        if len(s) == 2:
            parts.append(rng.uniform(-1, 1, s).ravel() / np.sqrt(s[0]))
        else:
            parts.append(np.zeros(s))
    return np.concatenate(parts)


def _flat_inputs(X, spec):
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    if X.shape[1] != spec.input_dim:
        raise DataValidationError(f"inputs have {X.shape[1]} features, model expects {spec.input_dim}")
    return X


def model_logits(theta, spec: GlobalModelSpec, X) -> np.ndarray:
    X = _flat_inputs(X, spec)
    p = _unpack(theta, spec)
    if spec.architecture == "linear_softmax":
        return X @ p[0] + p[1]
    return np.tanh(X @ p[0] + p[1]) @ p[2] + p[3]


def cross_entropy_and_grad(theta, spec: GlobalModelSpec, X, y):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``theta``."""
    X = _flat_inputs(X, spec)
    y = np.asarray(y, dtype=np.int64)
    p = _unpack(theta, spec)
    if spec.architecture == "linear_softmax":
        z = X @ p[0] + p[1]
    else:
        a = np.tanh(X @ p[0] + p[1])
        z = a @ p[2] + p[3]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(y)
    loss = float(np.mean(logsum - z[np.arange(n), y]))
    dz = np.exp(z - logsum[:, None])
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if spec.architecture == "linear_softmax":
        grads = [X.T @ dz, dz.sum(axis=0)]
    else:
        da = (dz @ p[2].T) * (1.0 - a * a)
        grads = [X.T @ da, da.sum(axis=0), a.T @ dz, dz.sum(axis=0)]
    return loss, np.concatenate([g.ravel() for g in grads])


def model_accuracy(theta, spec: GlobalModelSpec, X, y) -> float:
    return float(np.mean(np.argmax(model_logits(theta, spec, X), axis=1) == np.asarray(y)))


def local_train(theta, spec: GlobalModelSpec, X, y, epochs: int = 1, lr: float = 1e-3, batch_size: int = 64,
                rng=None, return_loss: bool = False):
    """``epochs`` passes of mini-batch Adam (fresh optimizer state) from ``theta``.

    With ``return_loss`` the mean training loss of the last epoch is returned
    too (NaN when ``epochs`` is 0).
    """
    theta = np.array(theta, dtype=np.float64)
    if len(X) == 0:
        raise DataValidationError("local training needs a non-empty shard")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = check_random_state(rng)
    y = np.asarray(y)
    state = AdamState.for_params([theta], lr=lr)
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss, grad = cross_entropy_and_grad(theta, spec, X[idx], y[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise LocalTrainingError(f"non-finite loss {loss} at sample offset {start}")
            (theta,), state = adam_update([theta], [grad], state)
            total += loss * len(idx)
        last = total / len(y)
    return (theta, last) if return_loss else theta


# ---------------------------------------------------------------------------
# data partitioning and federation construction

def dirichlet_partition(labels, n_clients: int, alpha: float, rng=None, max_retries: int = 100) -> list:
    """Split sample indices over clients with Dirichlet(alpha) class proportions.

    Each class's samples are divided among the clients in proportions drawn
    from Dirichlet(alpha * 1). Draws leaving any client empty are redrawn up
    to ``max_retries`` times.
    """
    labels = np.asarray(labels)
    n_clients = check_positive_int(n_clients, "n_clients")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if len(labels) < n_clients:
        raise DataValidationError(f"{len(labels)} samples cannot fill {n_clients} non-empty clients")
    rng = check_random_state(rng)
    classes = np.unique(labels)
    for _ in range(max_retries):
        shards = [[] for _ in range(n_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_clients, float(alpha)))
            cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].extend(part.tolist())
        if all(shards):
            return [np.sort(np.array(s, dtype=np.int64)) for s in shards]
    raise DataValidationError(f"no partition with {n_clients} non-empty clients after {max_retries} draws; "
                              f"increase alpha or the dataset size")


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 100
    participants: int = 10
    rounds: int = 500
    local_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-3
    aggregator: str = "fedavg"
    fedavg_weighting: str = "uniform"
    krum_f: int | None = None
    mkrum_k: int = 5
    trim: float = 0.2
    geomed_tol: float = 1e-8
    geomed_maxit: int = 1000
    detector: str = "none"
    threshold: float = 0.5
    malicious_fraction: float = 0.0
    attack_grid: AttackGrid = AttackGrid(p_attack=1.0)
    dirichlet_alpha: float = 1000.0
    model: str = "linear_softmax"
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.n_clients, "n_clients")
        check_positive_int(self.participants, "participants")
        check_positive_int(self.rounds, "rounds")
        check_positive_int(self.local_epochs, "local_epochs")
        if self.participants > self.n_clients:
            raise ValueError("participants must not exceed n_clients")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {DETECTORS}")
        if self.fedavg_weighting not in ("uniform", "samples"):
            raise ValueError("fedavg_weighting must be 'uniform' or 'samples'")
        if not 0.0 <= self.trim < 0.5:
            raise ValueError(f"trim must lie in [0, 0.5), got {self.trim}")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError("malicious_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def build_federation(train: Dataset, config: FederationConfig) -> list:
    """Dirichlet-partition ``train`` and attack a random subset of clients.

    ``round(malicious_fraction * n_clients)`` clients are chosen as attackers;
    each draws one attack from ``config.attack_grid`` and applies it to all of
    its images. Labels are left untouched.
    """
    shards = dirichlet_partition(train.labels, config.n_clients, config.dirichlet_alpha,
                                 derive_rng(config.seed, "partition"))
    rng = derive_rng(config.seed, "attacks")
    n_bad = int(round(config.malicious_fraction * config.n_clients))
    bad = set(rng.choice(config.n_clients, size=n_bad, replace=False).tolist())
    clients = []
    for k, idx in enumerate(shards):
        spec = None
        if k in bad:
            while spec is None:
                spec = sample_attack(rng, config.attack_grid)
        clients.append(ClientRecord(k, attack_stack(train.images[idx], spec), spec, train.labels[idx]))
    return clients


# ---------------------------------------------------------------------------
# rounds and history

@dataclass
class RoundRecord:
    round: int
    participants: list
    train_loss: float
    test_accuracy: float
    theta_sha256: str
    theta_norm: float
    failed_clients: list = field(default_factory=list)


@dataclass
class RoundHistory:
    config: dict
    rounds: list = field(default_factory=list)
    filtered_ids: list = field(default_factory=list)
    detection: dict | None = None
    final_theta: np.ndarray | None = None
    wall_clock: float = 0.0  # kept in memory only, so written files stay reproducible

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].test_accuracy if self.rounds else float("nan")


def _digest(theta) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def _client_update(theta, spec, client, config, r):
    rng = derive_rng(config.seed, "local", r, client.client_id)
    try:
        new, loss = local_train(theta, spec, client.samples, client.labels, config.local_epochs,
                                config.learning_rate, config.batch_size, rng, return_loss=True)
        return new, loss, None
    except LocalTrainingError as exc:
        return None, float("nan"), f"client {client.client_id} round {r}: {exc}"


def _filter_clients(clients, config, detector, embedding):
    """Return (pool, filtered_ids, detection metrics) for ``config.detector``."""
    if config.detector == "none":
        return list(clients), [], None
    if config.detector == "oracle":
        pool = [c for c in clients if not c.is_malicious]
        return pool, sorted(c.client_id for c in clients if c.is_malicious), None
    from .detector import classify_and_filter

    if detector is None or embedding is None:
        raise ValueError(f"detector {config.detector!r} needs a trained model and its embedding config")
    expected = "wst" if config.detector == "waffle_wst" else "ft"
    if embedding.representation != expected:
        raise ValueError(f"detector {config.detector!r} needs a {expected} embedding, "
                         f"got {embedding.representation!r}")
    pending = [c for c in clients if c.embedding is None]
    failed = set(embed_clients(pending, embedding))
    embedded = [c for c in clients if c.client_id not in failed]
    benign, flagged, _ = classify_and_filter(detector, embedded, config.threshold)
    # clients whose embedding could not be computed are excluded as well
    flagged = sorted(set(flagged) | failed)
    keep = set(benign)
    pool = [c for c in clients if c.client_id in keep]
    truth = [c.is_malicious for c in clients]
    pred = [c.client_id in set(flagged) for c in clients]
    return pool, flagged, detection_metrics(pred, truth).to_dict()


def run_federation(config: FederationConfig, clients, test: Dataset, detector=None,
                   embedding: EmbeddingConfig | None = None, n_jobs=None) -> RoundHistory:
    """Optional filtering, then ``config.rounds`` rounds of sample / train / aggregate.

    ``detector`` is a trained ``MlpModel`` (required for the waffle modes).
    Client training may fan out over ``n_jobs`` workers; updates are always
    aggregated in ascending client-id order.
    """
    start = time.perf_counter()
    if not clients:
        raise EmptyFederationError("the federation has no clients")
    pool, flagged, report = _filter_clients(clients, config, detector, embedding)
    if not pool:
        raise EmptyFederationError(f"all {len(clients)} clients were filtered out")
    d = int(np.prod(clients[0].samples.shape[1:]))
    n_classes = int(max(np.max(test.labels), *(np.max(c.labels) for c in clients))) + 1
    spec = GlobalModelSpec(d, n_classes, config.model, config.hidden)
    theta = init_params(spec, derive_rng(config.seed, "init"))
    history = RoundHistory(config.to_dict(), filtered_ids=flagged, detection=report)
    sampler = derive_rng(config.seed, "participants")
    for r in range(config.rounds):
        m = min(config.participants, len(pool))
        chosen = sorted(sampler.choice(len(pool), size=m, replace=False).tolist())
        members = [pool[i] for i in chosen]
        if n_jobs in (None, 1):
            results = [_client_update(theta, spec, c, config, r) for c in members]
        else:
            results = Parallel(n_jobs=n_jobs)(delayed(_client_update)(theta, spec, c, config, r) for c in members)
        ok = [(c, res) for c, res in zip(members, results) if res[2] is None]
        errors = [res[2] for res in results if res[2] is not None]
        if ok:
            updates = [res[0] for _, res in ok]
            weights = [len(c.samples) for c, _ in ok] if config.fedavg_weighting == "samples" else None
            theta = aggregate(config.aggregator, updates, weights=weights, f=config.krum_f, k=config.mkrum_k,
                              trim=config.trim, tol=config.geomed_tol, maxit=config.geomed_maxit)
            loss = float(np.mean([res[1] for _, res in ok]))
        else:
            loss = float("nan")
        X_test = test.images.reshape(len(test), -1)
        history.rounds.append(RoundRecord(r, [c.client_id for c in members], loss,
                                          model_accuracy(theta, spec, X_test, test.labels),
                                          _digest(theta), float(np.linalg.norm(theta)), errors))
    history.final_theta = theta
    history.wall_clock = time.perf_counter() - start
    return history


def _json_float(v):
    return None if v is None or not np.isfinite(v) else float(v)


def write_history(history: RoundHistory, out_dir) -> tuple[Path, Path]:
    """Write ``rounds.jsonl`` (header line then one line per round) and ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"schema_version": HISTORY_SCHEMA, "kind": "header", "config": history.config,
              "filtered_ids": list(history.filtered_ids), "detection": history.detection,
              "final_theta_sha256": None if history.final_theta is None else _digest(history.final_theta)}
    lines = [json.dumps(header, sort_keys=True)]
    for rec in history.rounds:
        d = asdict(rec)
        d["kind"] = "round"
        d["train_loss"] = _json_float(rec.train_loss)
        lines.append(json.dumps(d, sort_keys=True))
    jl = out / "rounds.jsonl"
    jl.write_text("\n".join(lines) + "\n")
    cs = out / "summary.csv"
    with cs.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "round", "n_participants", "train_loss", "test_accuracy", "theta_norm"])
        for rec in history.rounds:
            w.writerow([HISTORY_SCHEMA, rec.round, len(rec.participants), repr(rec.train_loss),
                        repr(rec.test_accuracy), repr(rec.theta_norm)])
    return jl, cs


def read_history(path) -> RoundHistory:
    """Read a ``rounds.jsonl`` file written by :func:`write_history`."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SchemaVersionError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "header" or header.get("schema_version") != HISTORY_SCHEMA:
        raise SchemaVersionError(f"{path}: unsupported history schema {header.get('schema_version')!r}")
    hist = RoundHistory(header["config"], filtered_ids=header["filtered_ids"], detection=header["detection"])
    for line in lines[1:]:
        d = json.loads(line)
        d.pop("kind")
        if d["train_loss"] is None:
            d["train_loss"] = float("nan")
        hist.rounds.append(RoundRecord(**d))
    return hist
