"""Morlet filter banks and the two representation operators.

``wst_order1`` is a first-order wavelet scattering transform with global
average pooling; ``ft_embedding`` is a windowed, DC-centred Fourier magnitude
spectrum pooled onto a coarse grid. Both return fixed-length non-negative
vectors whose length does not depend on the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_positive_int
from .exceptions import DataValidationError
from .signal import hann_window2

__all__ = [
    "FilterBank",
    "build_filter_bank",
    "scattering_maps",
    "wst_order1",
    "wst",
    "ft_embedding",
    "embed",
    "embedding_length",
    "SpectralEmbedder",
]

REP_KINDS = ("wst", "ft")


@dataclass(frozen=True)
class FilterBank:
    """Frequency-domain Morlet wavelets plus a Gaussian low-pass.

    ``psi_hat`` has shape (J*Q*L, H, W); filter ``j*L + l`` is scale index
    ``j`` and orientation ``l``. ``lp_bound`` is the measured supremum of
    ``|phi_hat|^2 + sum |psi_hat|^2`` over every frequency bin.
    """

    J: int
    L: int
    Q: int
    shape: tuple[int, int]
    psi_hat: np.ndarray = field(repr=False)
    phi_hat: np.ndarray = field(repr=False)
    lp_bound: float
    scale: float

    @property
    def n_filters(self) -> int:
        return self.psi_hat.shape[0]

    def scale_index(self) -> np.ndarray:
        """Scale index of every band-pass filter, in filter order."""
        return np.repeat(np.arange(self.J * self.Q), self.L)


def _gabor(shape, sigma, theta, xi, slant):
    # periodized over 5x5 tiles so the envelope wraps cleanly
    M, N = shape
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    D = np.diag([1.0, slant * slant])
    curv = R @ D @ R.T / (2.0 * sigma * sigma)
    out = np.zeros(shape, dtype=np.complex128)
    xs = np.arange(M)[:, None]
    ys = np.arange(N)[None, :]
    for ex in range(-2, 3):
        xx = xs + ex * M
        for ey in range(-2, 3):
            yy = ys + ey * N
            arg = -(curv[0, 0] * xx * xx + (curv[0, 1] + curv[1, 0]) * xx * yy + curv[1, 1] * yy * yy)
            out += np.exp(arg + 1j * xi * (xx * c + yy * s))
    return out / (2.0 * np.pi * sigma * sigma / slant)


def _morlet(shape, sigma, theta, xi, slant):
    wave = _gabor(shape, sigma, theta, xi, slant)
    envelope = _gabor(shape, sigma, theta, 0.0, slant)
    return wave - (wave.sum() / envelope.sum()) * envelope


def build_filter_bank(height: int, width: int, J: int = 3, L: int = 6, Q: int = 1) -> FilterBank:
    """Build a Morlet bank at scales ``2**(j/Q)`` for ``j < J*Q`` and ``L`` angles in [0, pi).

    Envelope width 0.8 * scale and centre frequency (3/4) pi / scale; the
    low-pass is a Gaussian of width 0.8 * 2**(J-1). When the raw
    Littlewood-Paley sum exceeds 1 the whole bank is divided by the square
    root of its maximum, which makes every operator built from it
    non-expansive.
    """
    J = check_positive_int(J, "J")
    L = check_positive_int(L, "L")
    Q = check_positive_int(Q, "Q")
    if 2**J > min(height, width):
        raise DataValidationError(f"2**J = {2**J} exceeds the image support {min(height, width)}")
    shape = (int(height), int(width))
    a = 2.0 ** (1.0 / Q)
    psi = []
    for j in range(J * Q):
        scale = a**j
        for ell in range(L):
            theta = ell * np.pi / L
            psi.append(np.fft.fft2(_morlet(shape, 0.8 * scale, theta, 0.75 * np.pi / scale, 4.0 / L)))
    psi_hat = np.stack(psi)
    phi_hat = np.fft.fft2(_gabor(shape, 0.8 * 2 ** (J - 1), 0.0, 0.0, 1.0))

    lp = np.abs(phi_hat) ** 2 + np.sum(np.abs(psi_hat) ** 2, axis=0)
    raw_max = float(lp.max())
    factor = 1.0 / np.sqrt(raw_max) if raw_max > 1.0 else 1.0
    psi_hat = psi_hat * factor
    phi_hat = phi_hat * factor
    lp_bound = float((np.abs(phi_hat) ** 2 + np.sum(np.abs(psi_hat) ** 2, axis=0)).max())
    psi_hat.setflags(write=False)
    phi_hat.setflags(write=False)
    return FilterBank(J, L, Q, shape, psi_hat, phi_hat, lp_bound, factor)


def _check_bank_shape(x, bank):
    if x.shape != bank.shape:
        raise DataValidationError(f"image shape {x.shape} does not match filter bank shape {bank.shape}")


def scattering_maps(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Unpooled order-0 and order-1 scattering maps, shape (1 + n_filters, H, W)."""
    x = check_image(x)
    _check_bank_shape(x, bank)
    x_hat = np.fft.fft2(x)
    order0 = np.abs(np.fft.ifft2(x_hat * bank.phi_hat))
    u1 = np.abs(np.fft.ifft2(x_hat[None] * bank.psi_hat))
    order1 = np.abs(np.fft.ifft2(np.fft.fft2(u1) * bank.phi_hat[None]))
    return np.concatenate([order0[None], order1])


def wst_order1(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Globally averaged first-order scattering coefficients, length 1 + n_filters."""
    return scattering_maps(x, bank).mean(axis=(1, 2))


def wst(x: np.ndarray, bank: FilterBank, max_order: int = 1) -> np.ndarray:
    """Scattering coefficients up to ``max_order`` (1 or 2).

    Second-order paths only couple a coarser second scale to a finer first
    scale (j2 > j1), over all orientation pairs.
    """
    if max_order == 1:
        return wst_order1(x, bank)
    if max_order != 2:
        raise ValueError(f"max_order must be 1 or 2, got {max_order}")
    x = check_image(x)
    _check_bank_shape(x, bank)
    first = wst_order1(x, bank)
    u1 = np.abs(np.fft.ifft2(np.fft.fft2(x)[None] * bank.psi_hat))
    u1_hat = np.fft.fft2(u1)
    scales = bank.scale_index()
    second = []
    for i1 in range(bank.n_filters):
        mask = scales > scales[i1]
        if not mask.any():
            continue
        u2 = np.abs(np.fft.ifft2(u1_hat[i1][None] * bank.psi_hat[mask]))
        s2 = np.abs(np.fft.ifft2(np.fft.fft2(u2) * bank.phi_hat[None]))
        second.append(s2.mean(axis=(1, 2)))
    return np.concatenate([first, *second])


def _pool_edges(n, cells):
    return np.linspace(0, n, cells + 1).round().astype(int)


def ft_embedding(x: np.ndarray, relative_width: float = 0.5, pool: int = 8) -> np.ndarray:
    """Windowed Fourier magnitude, DC-centred and average-pooled to ``pool`` x ``pool``."""
    x = check_image(x)
    pool = check_positive_int(pool, "pool")
    h, w = x.shape
    if pool > min(h, w):
        raise DataValidationError(f"pool={pool} exceeds image size {x.shape}")
    mag = np.abs(np.fft.fftshift(np.fft.fft2(x * hann_window2(h, w, relative_width))))
    re, ce = _pool_edges(h, pool), _pool_edges(w, pool)
    # cumulative sums give every cell mean in one pass
    csum = np.zeros((h + 1, w + 1))
    csum[1:, 1:] = mag.cumsum(0).cumsum(1)
    tot = csum[re[1:]][:, ce[1:]] - csum[re[:-1]][:, ce[1:]] - csum[re[1:]][:, ce[:-1]] + csum[re[:-1]][:, ce[:-1]]
    area = np.outer(np.diff(re), np.diff(ce))
    return (tot / area).ravel()


def embedding_length(rep_kind: str, channels: int, J: int = 3, L: int = 6, Q: int = 1, pool: int = 8,
                     max_order: int = 1) -> int:
    if rep_kind == "wst":
        n = J * Q * L
        per = 1 + n
        if max_order == 2:
            per += sum(L * L for j1 in range(J * Q) for _ in range(j1 + 1, J * Q))
        return channels * per
    if rep_kind == "ft":
        return channels * pool * pool
    raise ValueError(f"unknown representation {rep_kind!r}")


def embed(x: np.ndarray, rep_kind: str = "wst", bank: FilterBank | None = None,
          relative_width: float = 0.5, pool: int = 8, max_order: int = 1) -> np.ndarray:
    """Channel-wise spectral embedding of an (H, W) or (H, W, C) image, modulus applied."""
    if rep_kind not in REP_KINDS:
        raise ValueError(f"rep_kind must be one of {REP_KINDS}, got {rep_kind!r}")
    x = check_image(x, multichannel=True)
    parts = []
    for c in range(x.shape[2]):
        channel = x[:, :, c]
        if rep_kind == "wst":
            if bank is None:
                raise ValueError("a FilterBank is required for the WST representation")
            parts.append(wst(channel, bank, max_order=max_order))
        else:
            parts.append(ft_embedding(channel, relative_width, pool))
    return np.abs(np.concatenate(parts))


class SpectralEmbedder(TransformerMixin, BaseEstimator):
    """Map a stack of images (n, H, W[, C]) to spectral embeddings (n, D).

    ``fit`` only records the image geometry and builds the filter bank.
    """

    def __init__(self, representation="wst", J=3, L=6, Q=1, relative_width=0.5, pool=8, max_order=1):
        self.representation = representation
        self.J = J
        self.L = L
        self.Q = Q
        self.relative_width = relative_width
        self.pool = pool
        self.max_order = max_order

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (3, 4):
            raise DataValidationError(f"expected (n, H, W) or (n, H, W, C), got {X.shape}")
        self.image_shape_ = X.shape[1:]
        h, w = X.shape[1:3]
        self.bank_ = build_filter_bank(h, w, self.J, self.L, self.Q) if self.representation == "wst" else None
        channels = 1 if X.ndim == 3 else X.shape[3]
        self.n_features_out_ = embedding_length(self.representation, channels, self.J, self.L, self.Q,
                                                self.pool, self.max_order)
        return self

    def transform(self, X):
        check_is_fitted(self, "image_shape_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1:] != self.image_shape_:
            raise DataValidationError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return np.stack([
            embed(x, self.representation, self.bank_, self.relative_width, self.pool, self.max_order) for x in X
        ])
