"""Client-data perturbations: additive noise, Gaussian blur, block dropout, shift-and-noise.

Every attack is a pure function of (input, parameters, random generator).
Images are (H, W) or (H, W, C) arrays with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._validation import check_finite_array, check_image, check_odd_int, check_positive_int, check_random_state
from .exceptions import DataValidationError
from .signal import gaussian_kernel, pad_kernel

__all__ = [
    "AttackSpec",
    "AttackGrid",
    "apply_noise",
    "apply_blur",
    "apply_block_dropout",
    "apply_shift_noise",
    "apply_attack",
    "attack_stack",
    "sample_attack",
]

ATTACK_KINDS = ("noise", "blur", "block", "shift_noise")
NOISE_MODES = ("iid_gaussian", "brownian_sheet")

_FIELDS = {
    "noise": {"sigma", "noise_mode"},
    "blur": {"beta"},
    "block": {"fraction", "block_size"},
    "shift_noise": {"sigma"},
}


@dataclass(frozen=True)
class AttackSpec:
    """Parameters of one attack. Only the fields used by ``kind`` may be set."""

    kind: str
    sigma: float | None = None
    noise_mode: str | None = None
    beta: int | None = None
    fraction: float | None = None
    block_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "noise" and self.noise_mode is None:
            object.__setattr__(self, "noise_mode", "iid_gaussian")
        allowed = _FIELDS[self.kind]
        for name in ("sigma", "noise_mode", "beta", "fraction", "block_size"):
            value = getattr(self, name)
            if name in allowed and value is None:
                raise ValueError(f"{self.kind} attack requires {name}")
            if name not in allowed and value is not None:
                raise ValueError(f"{self.kind} attack does not take {name}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.noise_mode is not None and self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.beta is not None:
            check_odd_int(self.beta, "beta")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.block_size is not None:
            check_positive_int(self.block_size, "block_size")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "AttackSpec":
        return cls(**data)


@dataclass(frozen=True)
class AttackGrid:
    """Sampling ranges for Algorithm-style random attacks.

    ``beta`` is drawn uniformly from the odd integers in [beta_min, beta_max],
    ``sigma`` uniformly from [sigma_min, sigma_max].
    """

    beta_min: int = 3
    beta_max: int = 19
    sigma_min: float = 0.5
    sigma_max: float = 2.0
    p_attack: float = 0.5
    p_blur: float = 0.5
    noise_mode: str = "iid_gaussian"

    def __post_init__(self):
        check_odd_int(self.beta_min, "beta_min")
        check_odd_int(self.beta_max, "beta_max")
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max < beta_min")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if not (0.0 <= self.p_attack <= 1.0 and 0.0 <= self.p_blur <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def betas(self) -> np.ndarray:
        return np.arange(self.beta_min, self.beta_max + 1, 2)


def _channels_first(x):
    x = check_image(x, multichannel=True)
    return np.moveaxis(x, 2, 0), x.ndim


def apply_noise(x, sigma: float, mode: str = "iid_gaussian", rng=None, clip: bool = True) -> np.ndarray:
    """Additive noise scaled by ``sigma``.

    ``iid_gaussian`` adds N(0, sigma^2) per pixel. ``brownian_sheet`` adds
    sigma * W where W is a 2-D Brownian sheet on the unit square, one
    independent sheet per channel.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    rng = check_random_state(rng)
    x = check_image(x, multichannel=np.ndim(x) == 3)
    if mode == "iid_gaussian":
        noise = rng.normal(0.0, 1.0, size=x.shape)
    elif mode == "brownian_sheet":
        h, w = x.shape[:2]
        inc = rng.normal(0.0, 1.0 / np.sqrt(h * w), size=x.shape)
        noise = inc.cumsum(axis=0).cumsum(axis=1)
    else:
        raise ValueError(f"noise mode must be one of {NOISE_MODES}, got {mode!r}")
    out = x + sigma * noise
    return np.clip(out, 0.0, 1.0) if clip else out


def _blur_hat(shape, beta):
    return np.fft.fft2(pad_kernel(gaussian_kernel(beta), shape))


def apply_blur(x, beta: int, rng=None) -> np.ndarray:
    """Per-channel circular convolution with ``gaussian_kernel(beta)``.

    ``rng`` is accepted for interface uniformity and ignored.
    """
    beta = check_odd_int(beta, "beta")
    x = check_image(x, multichannel=np.ndim(x) == 3)
    h, w = x.shape[:2]
    if beta > min(h, w):
        raise DataValidationError(f"beta={beta} exceeds image size {(h, w)}")
    k_hat = _blur_hat((h, w), beta)
    if x.ndim == 3:
        k_hat = k_hat[:, :, None]
    return np.fft.ifft2(np.fft.fft2(x, axes=(0, 1)) * k_hat, axes=(0, 1)).real


def apply_block_dropout(x, fraction: float, block_size: int, rng=None) -> np.ndarray:
    """Zero randomly chosen non-overlapping blocks until ``fraction`` of pixels are zero.

    Blocks live on the grid of full ``block_size`` tiles and are drawn without
    replacement; all channels of a block are zeroed together.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    block_size = check_positive_int(block_size, "block_size")
    rng = check_random_state(rng)
    x = check_image(x, multichannel=np.ndim(x) == 3)
    h, w = x.shape[:2]
    if block_size > min(h, w):
        raise DataValidationError(f"block_size={block_size} exceeds image size {(h, w)}")
    gr, gc = h // block_size, w // block_size
    needed = int(np.ceil(fraction * h * w / block_size**2 - 1e-9))
    if needed > gr * gc:
        raise DataValidationError(
            f"cannot zero {fraction:.0%} of a {h}x{w} image with {gr * gc} blocks of size {block_size}")
    chosen = rng.choice(gr * gc, size=needed, replace=False)
    out = x.copy()
    for b in chosen:
        r, c = divmod(int(b), gc)
        out[r * block_size:(r + 1) * block_size, c * block_size:(c + 1) * block_size] = 0.0
    return out


def apply_shift_noise(v, sigma: float, rng=None) -> np.ndarray:
    """Randomly permute the coordinates of a flat vector, then add N(0, sigma^2)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    v = check_finite_array(v, "v").ravel()
    if v.size < 2:
        raise DataValidationError("shift-and-noise needs a vector of length >= 2")
    rng = check_random_state(rng)
    return v[rng.permutation(v.size)] + rng.normal(0.0, sigma, size=v.size)


def apply_attack(x, spec: AttackSpec | None, rng=None) -> np.ndarray:
    """Apply ``spec`` to one image; ``None`` means clean. Defaults to ``spec.seed``."""
    if spec is None:
        return np.array(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed) if rng is None else check_random_state(rng)
    if spec.kind == "noise":
        return apply_noise(x, spec.sigma, spec.noise_mode, rng)
    if spec.kind == "blur":
        return apply_blur(x, spec.beta, rng)
    if spec.kind == "block":
        return apply_block_dropout(x, spec.fraction, spec.block_size, rng)
    x = np.asarray(x, dtype=np.float64)
    return apply_shift_noise(x.ravel(), spec.sigma, rng).reshape(x.shape)


def attack_stack(X, spec: AttackSpec | None, rng=None) -> np.ndarray:
    """Apply one attack to every image of a stack (n, H, W[, C])."""
    X = np.asarray(X, dtype=np.float64)
    if spec is None:
        return X.copy()
    rng = np.random.default_rng(spec.seed) if rng is None else check_random_state(rng)
    if spec.kind == "blur":
        k_hat = _blur_hat(X.shape[1:3], check_odd_int(spec.beta, "beta"))
        if X.ndim == 4:
            k_hat = k_hat[:, :, None]
        if spec.beta > min(X.shape[1:3]):
            raise DataValidationError(f"beta={spec.beta} exceeds image size {X.shape[1:3]}")
        return np.fft.ifft2(np.fft.fft2(X, axes=(1, 2)) * k_hat, axes=(1, 2)).real
    return np.stack([apply_attack(x, spec, rng) for x in X])


def sample_attack(rng, grid: AttackGrid = AttackGrid()) -> AttackSpec | None:
    """Draw clean (``None``) or a random blur/noise attack.

    Attacked with probability ``grid.p_attack``; an attacked draw is a blur
    with probability ``grid.p_blur`` and noise otherwise. The returned spec
    carries a seed drawn from ``rng`` for its own randomness.
    """
    rng = check_random_state(rng)
    if rng.random() >= grid.p_attack:
        return None
    if rng.random() < grid.p_blur:
        beta = int(rng.choice(grid.betas))
        return AttackSpec("blur", beta=beta, seed=int(rng.integers(2**63)))
    sigma = float(rng.uniform(grid.sigma_min, grid.sigma_max))
    return AttackSpec("noise", sigma=sigma, noise_mode=grid.noise_mode, seed=int(rng.integers(2**63)))
