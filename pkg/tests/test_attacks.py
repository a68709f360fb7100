import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import direct_circular_conv, gaussian_kernel_closed_form
from waffle.attacks import (
    AttackGrid,
    AttackSpec,
    apply_attack,
    apply_block_dropout,
    apply_blur,
    apply_noise,
    apply_shift_noise,
    attack_stack,
    sample_attack,
)
from waffle.exceptions import DataValidationError


def test_noise_vanishing_sigma(rng):
    x = rng.random((16, 16))
    out = apply_noise(x, 1e-9, rng=np.random.default_rng(0))
    assert np.abs(out - x).max() < 1e-6


def test_noise_iid_moment():
    x = np.full((64, 64), 0.5)
    out = apply_noise(x, 0.2, rng=np.random.default_rng(7), clip=False)
    assert abs((out - x).std() - 0.2) < 0.01


def test_noise_determinism(rng):
    x = rng.random((8, 8))
    a = apply_noise(x, 0.5, rng=np.random.default_rng(3))
    b = apply_noise(x, 0.5, rng=np.random.default_rng(3))
    c = apply_noise(x, 0.5, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("mode", ["iid_gaussian", "brownian_sheet"])
def test_noise_clipped(mode, rng):
    out = apply_noise(rng.random((12, 12)), 2.0, mode, rng)
    assert out.min() >= 0 and out.max() <= 1


def test_brownian_sheet_variance_grows():
    # Var W(u, v) = u v on the unit square: the far corner carries variance ~1
    h = w = 32
    corner = [apply_noise(np.zeros((h, w)), 1.0, "brownian_sheet", np.random.default_rng(s), clip=False)[-1, -1]
              for s in range(2000)]
    near = [apply_noise(np.zeros((h, w)), 1.0, "brownian_sheet", np.random.default_rng(s), clip=False)[0, 0]
            for s in range(2000)]
    assert abs(np.var(corner) - 1.0) < 0.1
    assert np.var(near) < 0.01


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_noise_rejects_nonpositive_sigma(sigma):
    with pytest.raises(ValueError):
        apply_noise(np.zeros((4, 4)), sigma)


def test_blur_beta_one_identity(rng):
    x = rng.random((10, 10))
    np.testing.assert_allclose(apply_blur(x, 1), x, atol=1e-12)


def test_blur_constant_unchanged():
    np.testing.assert_allclose(apply_blur(np.full((16, 16), 0.4), 7), 0.4, atol=1e-12)


def test_blur_monotone_smoothing():
    card = np.zeros((32, 32))
    card[10:22, 10:22] = 1.0
    assert apply_blur(card, 11).var() < apply_blur(card, 3).var()


def test_blur_matches_direct_sum_and_preserves_mean(rng):
    x = rng.random((9, 9))
    y = apply_blur(x, 5)
    np.testing.assert_allclose(y, direct_circular_conv(x, gaussian_kernel_closed_form(5)), atol=1e-12)
    assert abs(y.mean() - x.mean()) < 1e-9


def test_blur_multichannel_per_channel(rng):
    x = rng.random((12, 12, 3))
    y = apply_blur(x, 5)
    for c in range(3):
        np.testing.assert_allclose(y[..., c], apply_blur(x[..., c], 5), atol=1e-12)


@pytest.mark.parametrize("beta", [2, 0, 33])
def test_blur_invalid_beta(beta):
    with pytest.raises(ValueError):
        apply_blur(np.zeros((16, 16)), beta)


def test_block_total_dropout(rng):
    assert np.all(apply_block_dropout(rng.random((16, 16)), 1.0, 4, rng) == 0)


def test_block_half_grid():
    x = np.ones((32, 32))
    out = apply_block_dropout(x, 0.5, 4, np.random.default_rng(0))
    assert (out == 0).sum() == 32 * 16
    blocks = (out.reshape(8, 4, 8, 4) == 0).all(axis=(1, 3))
    assert blocks.sum() == 32


def test_block_ratio_over_seeds():
    x = np.ones((28, 28))
    gran = 16 / (28 * 28)
    for s in range(100):
        ratio = (apply_block_dropout(x, 0.5, 4, np.random.default_rng(s)) == 0).mean()
        assert 0.5 <= ratio < 0.5 + gran


def test_block_channels_together(rng):
    out = apply_block_dropout(np.ones((8, 8, 3)), 0.25, 2, rng)
    z = out == 0
    assert np.all(z[..., 0] == z[..., 1]) and np.all(z[..., 1] == z[..., 2])


def test_block_infeasible_rejected():
    # only one full 4x4 tile on a 6x6 image: 16/36 < 0.9
    with pytest.raises(DataValidationError):
        apply_block_dropout(np.ones((6, 6)), 0.9, 4)


def test_shift_noise_vanishing(rng):
    v = rng.standard_normal(20)
    out = apply_shift_noise(v, 1e-9, rng)
    np.testing.assert_allclose(np.sort(out), np.sort(v), atol=1e-6)


def test_shift_noise_norm_moment(rng):
    v = rng.standard_normal(50)
    sigma = 0.7
    sq = [np.sum(apply_shift_noise(v, sigma, np.random.default_rng(s)) ** 2) for s in range(1000)]
    expected = np.sum(v**2) + v.size * sigma**2
    assert abs(np.mean(sq) / expected - 1) < 0.05


def test_shift_noise_reproducible(rng):
    v = rng.standard_normal(10)
    np.testing.assert_array_equal(apply_shift_noise(v, 1.0, np.random.default_rng(5)),
                                  apply_shift_noise(v, 1.0, np.random.default_rng(5)))


def test_shift_noise_rejects():
    with pytest.raises(ValueError):
        apply_shift_noise(np.ones(4), 0.0)
    with pytest.raises(DataValidationError):
        apply_shift_noise(np.ones(1), 1.0)


def test_sample_attack_frequencies():
    g = np.random.default_rng(0)
    draws = [sample_attack(g) for _ in range(10000)]
    attacked = [d for d in draws if d is not None]
    assert abs(1 - len(attacked) / len(draws) - 0.5) < 0.02
    blur = [d for d in attacked if d.kind == "blur"]
    assert abs(len(blur) / len(attacked) - 0.5) < 0.03
    for d in attacked:
        if d.kind == "blur":
            assert d.beta % 2 == 1 and 3 <= d.beta <= 19
        else:
            assert 0.5 <= d.sigma <= 2.0


def test_sample_attack_deterministic():
    a = [sample_attack(np.random.default_rng(1)) for _ in range(3)]
    b = [sample_attack(np.random.default_rng(1)) for _ in range(3)]
    assert a == b


def test_sample_attack_p_zero_never_attacks():
    g = np.random.default_rng(0)
    assert all(sample_attack(g, AttackGrid(p_attack=0.0)) is None for _ in range(100))


def test_attack_spec_fields():
    assert AttackSpec("noise", sigma=1.0).noise_mode == "iid_gaussian"
    with pytest.raises(ValueError):
        AttackSpec("blur", beta=3, sigma=1.0)
    with pytest.raises(ValueError):
        AttackSpec("blur", beta=4)
    with pytest.raises(ValueError):
        AttackSpec("noise", sigma=-1.0)
    with pytest.raises(ValueError):
        AttackSpec("block", fraction=1.5, block_size=2)
    s = AttackSpec("block", fraction=0.5, block_size=4, seed=3)
    assert AttackSpec.from_dict(s.to_dict()) == s


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5, 7]))
def test_attack_stack_matches_per_image(seed, beta):
    g = np.random.default_rng(seed)
    X = g.random((3, 10, 10))
    spec = AttackSpec("blur", beta=beta)
    np.testing.assert_allclose(attack_stack(X, spec), np.stack([apply_attack(x, spec) for x in X]), atol=1e-12)


def test_attack_stack_clean_is_copy(rng):
    X = rng.random((2, 4, 4))
    out = attack_stack(X, None)
    np.testing.assert_array_equal(out, X)
    assert out is not X
