"""The offline malicious-client detector.

A tanh MLP with a sigmoid output is trained on fictitious federations that
the server simulates from an auxiliary dataset: every auxiliary sample is
attacked at random, clean samples go to benign fictitious clients and
attacked ones to malicious clients, and each client is reduced to its
spectral embedding. At deployment the trained model scores the embeddings
transmitted by real clients and flags those above a threshold.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite_array, check_positive_int, check_random_state
from .attacks import AttackGrid, attack_stack, sample_attack
from .exceptions import DataValidationError, FingerprintMismatchError, InsufficientSamplesError, SchemaVersionError
from .optim import AdamState, adam_update
from .pca import ClientRecord, EmbeddingConfig, _embed_samples, embed_clients

__all__ = [
    "MlpModel",
    "init_mlp",
    "mlp_forward",
    "bce_loss_and_grad",
    "adam_step",
    "TrainingEpochSet",
    "DetectorConfig",
    "simulate_epoch",
    "train_detector",
    "classify_and_filter",
    "config_fingerprint",
    "save_checkpoint",
    "load_checkpoint",
    "MLPDetector",
    "WaffleDetector",
]

CHECKPOINT_FORMAT = "waffle-detector-checkpoint"
CHECKPOINT_VERSION = 1
_CLAMP = 1e-12


@dataclass
class MlpModel:
    """Weights (fan_in, fan_out) and biases of a tanh MLP with a sigmoid head.

    Inputs are standardized with the fixed ``input_mean`` / ``input_scale``
    before the first layer; they default to the identity map.
    """

    layer_dims: tuple
    weights: list
    biases: list
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.input_mean is None:
            self.input_mean = np.zeros(self.layer_dims[0])
        if self.input_scale is None:
            self.input_scale = np.ones(self.layer_dims[0])
        if self.layer_dims[-1] != 1:
            raise ValueError("the output layer must have width 1")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}/{b.shape}, expected dims {self.layer_dims}")

    @property
    def params(self) -> list:
        return [*self.weights, *self.biases]

    def with_params(self, params) -> "MlpModel":
        n = len(self.layer_dims) - 1
        return MlpModel(self.layer_dims, list(params[:n]), list(params[n:]), self.input_mean, self.input_scale)

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.input_mean.copy(), self.input_scale.copy())

    def standardize_inputs(self, X) -> "MlpModel":
        """Return a copy whose input map centres and scales ``X`` column-wise."""
        X = np.asarray(X, dtype=np.float64)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12 * max(scale.max(), 1e-300), scale, 1.0)
        out = self.copy()
        out.input_mean, out.input_scale = X.mean(axis=0), scale
        return out


def init_mlp(layer_dims, rng=None) -> MlpModel:
    """Uniform init in +-1/sqrt(fan_in)."""
    rng = check_random_state(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(tuple(layer_dims), weights, biases)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_inputs(m: MlpModel, X):
    X = check_finite_array(X, "embedding")
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != m.layer_dims[0]:
        raise DataValidationError(f"embedding length {X.shape[1]} does not match model input {m.layer_dims[0]}")
    return X, single


def _forward(m: MlpModel, X):
    h = (X - m.input_mean) / m.input_scale
    acts = [h]
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    z = (h @ m.weights[-1] + m.biases[-1])[:, 0]
    return acts, z


def mlp_forward(m: MlpModel, phi):
    """Attack probability for one embedding (scalar) or a batch (vector)."""
    X, single = _check_inputs(m, phi)
    _, z = _forward(m, X)
    p = _sigmoid(z)
    return float(p[0]) if single else p


def bce_loss_and_grad(m: MlpModel, X, y):
    """Mean binary cross-entropy over the batch and its gradient.

    Labels are 0 (benign) or 1 (attacker). Probabilities are clamped to
    [1e-12, 1 - 1e-12]; clamped samples contribute zero gradient.
    The gradient is returned as a list shaped like ``m.params``.
    """
    X, _ = _check_inputs(m, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(y) != len(X):
        raise ValueError(f"{len(X)} embeddings but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n = len(y)
    acts, z = _forward(m, X)
    p = _sigmoid(z)
    pc = np.clip(p, _CLAMP, 1 - _CLAMP)
    loss = float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))

    inside = (p > _CLAMP) & (p < 1 - _CLAMP)
    delta = (np.where(inside, p - y, 0.0) / n)[:, None]
    gw = [None] * len(m.weights)
    gb = [None] * len(m.biases)
    for i in range(len(m.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ m.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, [*gw, *gb]


def adam_step(m: MlpModel, grad, state: AdamState):
    """One Adam update of the detector; returns (new_model, new_state)."""
    params, state = adam_update(m.params, grad, state)
    return m.with_params(params), state


@dataclass
class TrainingEpochSet:
    """Embeddings and labels (0 benign, 1 attacker) of one simulated federation."""

    embeddings: np.ndarray
    labels: np.ndarray
    roles: list = field(default_factory=list)

    def __post_init__(self):
        n_pos = int(self.labels.sum())
        if 2 * n_pos != len(self.labels):
            raise ValueError("epoch set is not class balanced")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class DetectorConfig:
    """Hyperparameters of offline detector training."""

    hidden: tuple = (64, 32, 16)
    epochs: int = 100
    n_fictitious: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 16
    threshold: float = 0.5
    partition: str = "by_kind"
    standardize: bool = True
    grid: AttackGrid = AttackGrid()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _partition_attacked(attacked_idx, kinds, n_clients, min_samples, mode, rng):
    """Split attacked sample indices over ``n_clients`` malicious clients."""
    attacked_idx = rng.permutation(attacked_idx)
    if mode == "random":
        return np.array_split(attacked_idx, n_clients)
    if mode != "by_kind":
        raise ValueError(f"unknown partition mode {mode!r}")
    groups = [attacked_idx[kinds[attacked_idx] == k] for k in np.unique(kinds[attacked_idx])]
    total = len(attacked_idx)
    alloc = [int(round(n_clients * len(g) / total)) for g in groups]
    # fix rounding drift so allocations sum to n_clients
    while sum(alloc) > n_clients:
        alloc[int(np.argmax(alloc))] -= 1
    while sum(alloc) < n_clients:
        alloc[int(np.argmax([len(g) / (a + 1) for g, a in zip(groups, alloc)]))] += 1
    chunks = []
    leftovers = []
    for g, a in zip(groups, alloc):
        if a == 0:
            leftovers.append(g)
            continue
        # a group too small for its quota gives clients fewer samples than min_samples;
        # shrink the quota and move the surplus clients elsewhere
        while a > 1 and len(g) // a < min_samples:
            a -= 1
        chunks.extend(np.array_split(g, a))
    while len(chunks) < n_clients:
        # split the largest chunk to honour the client count
        i = int(np.argmax([len(c) for c in chunks]))
        big = chunks.pop(i)
        chunks[i:i] = np.array_split(big, 2)
    if leftovers:
        extra = np.concatenate(leftovers)
        for j, part in enumerate(np.array_split(extra, len(chunks))):
            chunks[j] = np.concatenate([chunks[j], part])
    return chunks


def simulate_epoch(aux, n_clients: int, config: DetectorConfig, embedding: EmbeddingConfig, rng=None,
                   n_jobs=None) -> TrainingEpochSet:
    """Build one balanced set of fictitious clients from the auxiliary images.

    Each auxiliary image is independently left clean or attacked via
    ``sample_attack``; clean images are split across ``n_clients // 2``
    benign clients and attacked ones across the same number of malicious
    clients, and every client is embedded.
    """
    rng = check_random_state(rng)
    n_clients = check_positive_int(n_clients, "n_clients", minimum=2)
    if n_clients % 2:
        raise ValueError("the number of fictitious clients must be even")
    aux = np.asarray(aux, dtype=np.float64)
    half = n_clients // 2
    min_samples = embedding.n_components + 1

    specs = [sample_attack(rng, config.grid) for _ in range(len(aux))]
    attacked = np.array([s is not None for s in specs])
    n_att = int(attacked.sum())
    n_clean = len(aux) - n_att
    if n_clean < half * min_samples or n_att < half * min_samples:
        raise InsufficientSamplesError(
            f"need at least {half * min_samples} clean and attacked samples each, got {n_clean} clean and "
            f"{n_att} attacked; enlarge the auxiliary set or reduce the number of fictitious clients")

    simulated = aux.copy()
    kinds = np.array([0 if s is None else (1 if s.kind == "blur" else 2) for s in specs])
    blur_idx = np.flatnonzero(kinds == 1)
    for beta in np.unique([specs[i].beta for i in blur_idx]) if len(blur_idx) else []:
        idx = [i for i in blur_idx if specs[i].beta == beta]
        simulated[idx] = attack_stack(aux[idx], specs[idx[0]])
    for i in np.flatnonzero(kinds == 2):
        simulated[i] = attack_stack(aux[i:i + 1], specs[i])[0]

    clean_chunks = np.array_split(rng.permutation(np.flatnonzero(~attacked)), half)
    bad_chunks = _partition_attacked(np.flatnonzero(attacked), kinds, half, min_samples, config.partition, rng)
    clients = [ClientRecord(i, simulated[idx]) for i, idx in enumerate([*clean_chunks, *bad_chunks])]
    failed = embed_clients(clients, embedding, n_jobs)
    if failed:
        raise InsufficientSamplesError(f"fictitious clients {failed} could not be embedded: "
                                       f"{clients[failed[0]].embed_error}")
    roles = ["benign"] * half + [
        "blur" if np.all(kinds[idx] == 1) else "noise" if np.all(kinds[idx] == 2) else "mixed"
        for idx in bad_chunks
    ]
    return TrainingEpochSet(np.stack([c.embedding for c in clients]),
                            np.repeat([0.0, 1.0], half), roles)


def _train_pass(model, state, X, y, batch_size, rng):
    order = rng.permutation(len(y))
    total = 0.0
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        loss, grad = bce_loss_and_grad(model, X[idx], y[idx])
        model, state = adam_step(model, grad, state)
        total += loss * len(idx)
    return model, state, total / len(y)


def train_detector(aux, config: DetectorConfig, embedding: EmbeddingConfig, rng=None, n_jobs=None):
    """Offline detector training on freshly simulated federations every epoch.

    Returns ``(model, loss_trace)`` where ``loss_trace[e]`` is the mean BCE of
    epoch ``e``'s mini-batch pass.
    """
    rng = check_random_state(rng)
    epochs = check_positive_int(config.epochs, "epochs")
    aux = np.asarray(aux, dtype=np.float64)
    channels = 1 if aux.ndim == 3 else aux.shape[3]
    dims = (embedding.length(channels), *config.hidden, 1)
    model = init_mlp(dims, rng)
    state = AdamState.for_params(model.params, lr=config.learning_rate)
    trace = []
    for e in range(epochs):
        epoch_set = simulate_epoch(aux, config.n_fictitious, config, embedding, rng, n_jobs)
        if e == 0 and config.standardize:
            model = model.standardize_inputs(epoch_set.embeddings)
        model, state, loss = _train_pass(model, state, epoch_set.embeddings, epoch_set.labels,
                                         config.batch_size, rng)
        trace.append(loss)
    return model, np.array(trace)


def classify_and_filter(m: MlpModel, clients, threshold: float = 0.5):
    """Score embedded clients; returns (benign_ids, flagged_ids, scores by id).

    A client is flagged when its score is strictly above ``threshold``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    missing = [c.client_id for c in clients if c.embedding is None]
    if missing:
        raise DataValidationError(f"clients {missing} have no embedding")
    if not clients:
        return [], [], {}
    scores = mlp_forward(m, np.stack([c.embedding for c in clients]))
    benign, flagged, by_id = [], [], {}
    for c, s in zip(clients, np.atleast_1d(scores)):
        by_id[c.client_id] = float(s)
        c.predicted_label = "A" if s > threshold else "B"
        (flagged if s > threshold else benign).append(c.client_id)
    return sorted(benign), sorted(flagged), by_id


def config_fingerprint(embedding: EmbeddingConfig, detector: DetectorConfig) -> str:
    """SHA-256 over the canonical JSON of the embedding and detector settings."""
    payload = json.dumps({"embedding": asdict(embedding), "detector": detector.to_dict()},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(path, model: MlpModel, embedding: EmbeddingConfig, detector: DetectorConfig, seed,
                    loss_trace=None):
    """Write a JSON checkpoint; floats are written with round-trip precision."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": CHECKPOINT_VERSION,
        "fingerprint": config_fingerprint(embedding, detector),
        "seed": seed,
        "layer_dims": list(model.layer_dims),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "input_mean": model.input_mean.tolist(),
        "input_scale": model.input_scale.tolist(),
        "embedding": asdict(embedding),
        "detector": detector.to_dict(),
        "loss_trace": [] if loss_trace is None else [float(v) for v in loss_trace],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path, expected_fingerprint: str | None = None):
    """Load ``(model, document)``; rejects unknown versions and fingerprint mismatches."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaVersionError(f"{path} is not a detector checkpoint")
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise SchemaVersionError(f"unsupported checkpoint schema version {doc.get('schema_version')!r}")
    if expected_fingerprint is not None and doc["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatchError(
            f"checkpoint fingerprint {doc['fingerprint'][:12]} does not match configuration {expected_fingerprint[:12]}")
    model = MlpModel(tuple(doc["layer_dims"]), [np.array(w, dtype=np.float64) for w in doc["weights"]],
                     [np.array(b, dtype=np.float64) for b in doc["biases"]],
                     np.array(doc["input_mean"], dtype=np.float64), np.array(doc["input_scale"], dtype=np.float64))
    return model, doc


def embedding_config_from_dict(d) -> EmbeddingConfig:
    return EmbeddingConfig(**d)


def detector_config_from_dict(d) -> DetectorConfig:
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    d["grid"] = AttackGrid(**d["grid"])
    return DetectorConfig(**d)


class MLPDetector(ClassifierMixin, BaseEstimator):
    """tanh MLP + sigmoid binary classifier on embedding vectors, trained with Adam/BCE.

    ``partial_fit`` runs one shuffled mini-batch pass, which is what the
    offline training does once per simulated federation.
    """

    def __init__(self, hidden_layer_sizes=(64, 32, 16), learning_rate=1e-3, batch_size=16, max_epochs=100,
                 threshold=0.5, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.threshold = threshold
        self.random_state = random_state

    def _init(self, n_features):
        self._rng = check_random_state(self.random_state)
        self.model_ = init_mlp((n_features, *self.hidden_layer_sizes, 1), self._rng)
        self.optimizer_ = AdamState.for_params(self.model_.params, lr=self.learning_rate)
        self.classes_ = np.array([0, 1])
        self.loss_curve_ = []

    def partial_fit(self, X, y, classes=None):
        X = check_finite_array(X, "X")
        y = np.asarray(y, dtype=np.float64)
        if not hasattr(self, "model_"):
            self._init(X.shape[1])
        self.model_, self.optimizer_, loss = _train_pass(self.model_, self.optimizer_, X, y, self.batch_size,
                                                         self._rng)
        self.loss_curve_.append(loss)
        return self

    def fit(self, X, y):
        X = check_finite_array(X, "X")
        self._init(X.shape[1])
        for _ in range(self.max_epochs):
            self.partial_fit(X, y)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = np.atleast_1d(mlp_forward(self.model_, np.atleast_2d(X)))
        return np.column_stack([1 - p, p])

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        return (self.decision_function(X) > self.threshold).astype(int)


class WaffleDetector(ClassifierMixin, BaseEstimator):
    """Offline detector trained on an auxiliary image set.

    ``fit(X_aux)`` takes unlabelled auxiliary images (n, H, W[, C]) and runs
    the simulated-federation training loop. ``predict`` / ``predict_proba``
    take the (n_clients, D) matrix of embeddings the clients transmit
    (see :meth:`embed_clients`); 1 means attacker.
    """

    def __init__(self, representation="wst", n_components=10, J=3, L=6, Q=1, relative_width=0.5, pool=8,
                 hidden_layer_sizes=(64, 32, 16), n_epochs=100, n_fictitious_clients=20, learning_rate=1e-3,
                 batch_size=16, threshold=0.5, beta_range=(3, 19), sigma_range=(0.5, 2.0), partition="by_kind",
                 random_state=None, n_jobs=None):
        self.representation = representation
        self.n_components = n_components
        self.J = J
        self.L = L
        self.Q = Q
        self.relative_width = relative_width
        self.pool = pool
        self.hidden_layer_sizes = hidden_layer_sizes
        self.n_epochs = n_epochs
        self.n_fictitious_clients = n_fictitious_clients
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.threshold = threshold
        self.beta_range = beta_range
        self.sigma_range = sigma_range
        self.partition = partition
        self.random_state = random_state
        self.n_jobs = n_jobs

    @property
    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(self.n_components, self.representation, self.J, self.L, self.Q,
                               self.relative_width, self.pool)

    @property
    def detector_config(self) -> DetectorConfig:
        grid = AttackGrid(beta_min=self.beta_range[0], beta_max=self.beta_range[1],
                          sigma_min=self.sigma_range[0], sigma_max=self.sigma_range[1])
        return DetectorConfig(hidden=tuple(self.hidden_layer_sizes), epochs=self.n_epochs,
                              n_fictitious=self.n_fictitious_clients, learning_rate=self.learning_rate,
                              batch_size=self.batch_size, threshold=self.threshold, partition=self.partition,
                              grid=grid)

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (3, 4):
            raise DataValidationError(f"expected auxiliary images (n, H, W[, C]), got shape {X.shape}")
        self.model_, self.loss_curve_ = train_detector(X, self.detector_config, self.embedding_config,
                                                       self.random_state, self.n_jobs)
        self.image_shape_ = X.shape[1:]
        self.classes_ = np.array([0, 1])
        self.fingerprint_ = config_fingerprint(self.embedding_config, self.detector_config)
        return self

    def embed_clients(self, client_samples):
        """Embeddings of a list of per-client sample stacks, one row per client."""
        return np.stack([_embed_samples(s, self.embedding_config) for s in client_samples])

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = np.atleast_1d(mlp_forward(self.model_, np.atleast_2d(X)))
        return np.column_stack([1 - p, p])

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        return (self.decision_function(X) > self.threshold).astype(int)

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.embedding_config, self.detector_config,
                        None if isinstance(self.random_state, np.random.Generator) else self.random_state,
                        self.loss_curve_)

    def load(self, path):
        """Load weights into this estimator; its parameters must match the checkpoint."""
        self.model_, doc = load_checkpoint(path, config_fingerprint(self.embedding_config, self.detector_config))
        self.loss_curve_ = np.array(doc["loss_trace"])
        self.classes_ = np.array([0, 1])
        self.fingerprint_ = doc["fingerprint"]
        return self
