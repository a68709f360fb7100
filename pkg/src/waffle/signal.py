"""Dense 2-D grid arithmetic: FFT pair, circular convolution and kernels.

Conventions:
- Images are float64 arrays of shape (H, W); multichannel images are (H, W, C)
  and spectral operations act on each channel separately.
- ``fft2`` is the unnormalized forward DFT, ``ifft2`` carries the 1/(HW) factor.
- Convolution is circular (periodic boundary) everywhere.
"""

from __future__ import annotations

import numpy as np

from ._validation import check_finite_array, check_image, check_odd_int
from .exceptions import DataValidationError

__all__ = [
    "fft2",
    "ifft2",
    "pad_kernel",
    "conv2_circular",
    "gaussian_kernel",
    "hann_window2",
]


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT of a single-channel image.

    Any (H, W) is accepted; numpy's pocketfft backend switches between
    mixed-radix and Bluestein internally, so prime sizes cost O(N log N) too.
    """
    x = check_image(x)
    return np.fft.fft2(x)


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`, returning the real part.

    The imaginary residue of a real-signal round trip is rounding noise and is
    dropped.
    """
    spectrum = check_finite_array(spectrum, "spectrum", dtype=np.complex128)
    if spectrum.ndim != 2:
        raise DataValidationError(f"spectrum must be 2-D, got shape {spectrum.shape}")
    return np.fft.ifft2(spectrum).real


def pad_kernel(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-pad ``kernel`` to ``shape`` with its center moved to index (0, 0)."""
    kernel = check_image(kernel, "kernel")
    kh, kw = kernel.shape
    h, w = shape
    if kh > h or kw > w:
        raise DataValidationError(f"kernel {kernel.shape} is larger than image {shape}")
    padded = np.zeros((h, w))
    rows = (np.arange(kh) - kh // 2) % h
    cols = (np.arange(kw) - kw // 2) % w
    padded[np.ix_(rows, cols)] = kernel
    return padded


def conv2_circular(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Circular convolution of a single-channel image with a centered kernel.

    Computed as a pointwise product in the frequency domain.
    """
    x = check_image(x)
    k_hat = np.fft.fft2(pad_kernel(kernel, x.shape))
    return np.fft.ifft2(np.fft.fft2(x) * k_hat).real


def gaussian_kernel(size: int) -> np.ndarray:
    """Normalized ``size`` x ``size`` Gaussian with standard deviation size/6."""
    size = check_odd_int(size, "size")
    half = size // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    sigma = size / 6.0
    g = np.exp(-(u**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _hann1(n: int, relative_width: float) -> np.ndarray:
    center = (n - 1) / 2.0
    half = relative_width * (n - 1) / 2.0
    dist = np.abs(np.arange(n) - center)
    if half == 0.0:
        return (dist == 0).astype(np.float64)
    w = 0.5 * (1.0 + np.cos(np.pi * dist / half))
    w[dist > half] = 0.0
    return w


def hann_window2(height: int, width: int, relative_width: float = 0.5) -> np.ndarray:
    """Separable raised-cosine window supported on the central fraction of the grid.

    Peaks at 1 in the center and falls to 0 at the edge of the central
    ``relative_width * H`` by ``relative_width * W`` box; zero outside it.
    """
    if not 0.0 < relative_width <= 1.0:
        raise ValueError(f"relative_width must lie in (0, 1], got {relative_width}")
    if height < 1 or width < 1:
        raise ValueError("window dimensions must be positive")
    return np.outer(_hann1(height, relative_width), _hann1(width, relative_width))
