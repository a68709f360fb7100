import numpy as np
import pytest

from oracles import central_difference
from waffle.aggregators import AGGREGATORS
from waffle.attacks import AttackGrid
from waffle.datasets import Dataset, SyntheticSpec, split_dataset, synth_dataset
from waffle.detector import MlpModel
from waffle.exceptions import DataValidationError, EmptyFederationError, SchemaVersionError
from waffle.federation import (
    FederationConfig,
    GlobalModelSpec,
    LocalTrainingError,
    build_federation,
    cross_entropy_and_grad,
    dirichlet_partition,
    init_params,
    local_train,
    read_history,
    run_federation,
    write_history,
)
from waffle.pca import EmbeddingConfig
from waffle.rng import derive_rng

EMB = EmbeddingConfig(n_components=3, J=2, L=4)


@pytest.fixture(scope="module")
def small_data():
    spec = SyntheticSpec(num_classes=2, samples_per_class=120, height=16, width=16)
    data = synth_dataset(spec, np.random.default_rng(0))
    test, train = split_dataset(data, 0.25, np.random.default_rng(1))
    return train, test


def _cfg(**kw):
    base = dict(n_clients=8, participants=4, rounds=3, batch_size=16, learning_rate=1e-2, seed=3,
                attack_grid=AttackGrid(beta_max=15, p_attack=1.0))
    base.update(kw)
    return FederationConfig(**base)


def _constant_detector(bias):
    d = EMB.length(1)
    return MlpModel((d, 1), [np.zeros((d, 1))], [np.array([float(bias)])])


@pytest.mark.parametrize("arch", ["linear_softmax", "small_mlp"])
def test_cross_entropy_gradient(arch, rng):
    spec = GlobalModelSpec(5, 3, arch, hidden=4)
    theta = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
    X, y = rng.standard_normal((6, 5)), rng.integers(0, 3, 6)
    _, g = cross_entropy_and_grad(theta, spec, X, y)
    (num,) = central_difference(lambda: cross_entropy_and_grad(theta, spec, X, y)[0], [theta])
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-6


def test_local_train_zero_epochs(rng):
    spec = GlobalModelSpec(4, 2)
    theta = init_params(spec, rng)
    np.testing.assert_array_equal(local_train(theta, spec, rng.random((5, 4)), [0, 1, 0, 1, 1], epochs=0), theta)


def test_local_train_single_step_hand_computed(rng):
    spec = GlobalModelSpec(3, 2)
    theta = init_params(spec, rng)
    X, y = rng.standard_normal((4, 3)), np.array([0, 1, 1, 0])
    _, g = cross_entropy_and_grad(theta, spec, X, y)
    # first Adam step: m_hat = g, v_hat = g^2
    expected = theta - 0.05 * g / (np.abs(g) + 1e-8)
    out = local_train(theta, spec, X, y, epochs=1, lr=0.05, batch_size=4, rng=0)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_local_train_loss_decreases(rng):
    spec = GlobalModelSpec(2, 2)
    y = np.repeat([0, 1], 40)
    X = rng.standard_normal((80, 2)) + 3.0 * y[:, None]
    theta = init_params(spec, rng)
    losses = []
    for _ in range(5):
        theta, loss = local_train(theta, spec, X, y, epochs=1, lr=1e-2, batch_size=16, rng=rng, return_loss=True)
        losses.append(loss)
    assert np.all(np.diff(losses) <= 0)


def test_local_train_non_finite_aborts():
    spec = GlobalModelSpec(2, 2)
    with np.errstate(all="ignore"):
        with pytest.raises(LocalTrainingError):
            local_train(np.zeros(spec.n_params) + 1e300, spec, np.full((4, 2), 1e300), [0, 1, 0, 1], rng=0)


def test_dirichlet_near_iid():
    labels = np.repeat(np.arange(4), 500)
    for seed in range(5):
        shards = dirichlet_partition(labels, 10, 1000.0, np.random.default_rng(seed))
        for s in shards:
            hist = np.bincount(labels[s], minlength=4)
            assert np.all(np.abs(hist / hist.mean() - 1) <= 0.2)


def test_dirichlet_partition_contract(rng):
    labels = rng.integers(0, 3, 200)
    shards = dirichlet_partition(labels, 7, 0.5, rng)
    allidx = np.concatenate(shards)
    assert sorted(allidx.tolist()) == list(range(200))
    assert all(len(s) > 0 for s in shards)
    one = dirichlet_partition(labels, 1, 1.0, rng)
    np.testing.assert_array_equal(one[0], np.arange(200))


def test_dirichlet_too_small():
    with pytest.raises(DataValidationError):
        dirichlet_partition(np.zeros(3), 5, 1.0, 0)


def test_build_federation_attackers(small_data):
    train, _ = small_data
    clients = build_federation(train, _cfg(malicious_fraction=0.5))
    assert sum(c.is_malicious for c in clients) == 4
    assert sum(len(c.samples) for c in clients) == len(train)
    again = build_federation(train, _cfg(malicious_fraction=0.5))
    for a, b in zip(clients, again):
        assert a.role == b.role
        np.testing.assert_array_equal(a.samples, b.samples)


def test_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(trim=0.5)
    with pytest.raises(ValueError):
        FederationConfig(n_clients=5, participants=6)
    with pytest.raises(ValueError):
        FederationConfig(aggregator="median")


@pytest.mark.parametrize("aggregator", AGGREGATORS)
@pytest.mark.parametrize("detector", ["none", "oracle", "waffle_wst"])
def test_any_aggregator_with_detector_on_or_off(small_data, aggregator, detector):
    train, test = small_data
    cfg = _cfg(aggregator=aggregator, detector=detector, malicious_fraction=0.25)
    model = _constant_detector(-20.0) if detector == "waffle_wst" else None
    hist = run_federation(cfg, build_federation(train, cfg), test, model, EMB if model else None)
    assert len(hist.rounds) == cfg.rounds
    assert 0.0 <= hist.final_accuracy <= 1.0
    if detector == "oracle":
        assert len(hist.filtered_ids) == 2
    if detector == "waffle_wst":
        assert hist.detection["fp"] == 0 and hist.detection["tp"] == 0


def test_detector_flags_everyone(small_data):
    train, test = small_data
    cfg = _cfg(detector="waffle_wst")
    with pytest.raises(EmptyFederationError):
        run_federation(cfg, build_federation(train, cfg), test, _constant_detector(20.0), EMB)


def test_waffle_mode_requires_matching_embedding(small_data):
    train, test = small_data
    cfg = _cfg(detector="waffle_ft")
    with pytest.raises(ValueError):
        run_federation(cfg, build_federation(train, cfg), test, _constant_detector(-20.0), EMB)


def test_deterministic_across_runs_and_workers(small_data, tmp_path):
    train, test = small_data
    cfg = _cfg(malicious_fraction=0.25)
    h1 = run_federation(cfg, build_federation(train, cfg), test)
    h2 = run_federation(cfg, build_federation(train, cfg), test, n_jobs=2)
    assert [r.theta_sha256 for r in h1.rounds] == [r.theta_sha256 for r in h2.rounds]
    write_history(h1, tmp_path / "a")
    write_history(h2, tmp_path / "b")
    for name in ("rounds.jsonl", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_history_round_trip_and_schema(small_data, tmp_path):
    train, test = small_data
    cfg = _cfg()
    h = run_federation(cfg, build_federation(train, cfg), test)
    jl, _ = write_history(h, tmp_path)
    back = read_history(jl)
    assert [r.theta_sha256 for r in back.rounds] == [r.theta_sha256 for r in h.rounds]
    assert back.final_accuracy == h.final_accuracy
    lines = jl.read_text().splitlines()
    jl.write_text(lines[0].replace('"schema_version": 1', '"schema_version": 7') + "\n")
    with pytest.raises(SchemaVersionError):
        read_history(jl)


def test_detector_that_flags_nobody_leaves_training_unchanged(small_data):
    train, test = small_data
    cfg = _cfg(rounds=10)
    base = run_federation(cfg, build_federation(train, cfg), test)
    cfg_w = _cfg(rounds=10, detector="waffle_wst")
    filt = run_federation(cfg_w, build_federation(train, cfg_w), test, _constant_detector(-20.0), EMB)
    assert abs(base.final_accuracy - filt.final_accuracy) < 1e-12


def test_rng_streams_independent():
    a = derive_rng(0, "partition").random(3)
    b = derive_rng(0, "attacks").random(3)
    c = derive_rng(0, "partition").random(3)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, c)
    assert not np.allclose(derive_rng(0, "local", 1, 2).random(3), derive_rng(0, "local", 2, 1).random(3))


def test_empty_federation():
    with pytest.raises(EmptyFederationError):
        run_federation(_cfg(), [], Dataset(np.zeros((1, 16, 16)), np.zeros(1, dtype=int)))
