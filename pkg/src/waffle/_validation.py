"""Small input-checking helpers shared by the numerical modules."""

import numbers

import numpy as np

from .exceptions import DataValidationError


def check_finite_array(x, name="x", dtype=np.float64):
    arr = np.asarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise DataValidationError(f"{name} contains non-finite values")
    return arr


def check_image(x, name="x", multichannel=False):
    """Return ``x`` as a finite float64 array of shape (H, W) or (H, W, C).

    Single-channel callers get a 2-D array back. With ``multichannel=True``
    a 2-D input is promoted to (H, W, 1).
    """
    arr = check_finite_array(x, name)
    if arr.ndim == 2:
        if multichannel:
            arr = arr[:, :, None]
    elif arr.ndim == 3 and multichannel:
        pass
    else:
        expected = "(H, W) or (H, W, C)" if multichannel else "(H, W)"
        raise DataValidationError(f"{name} must have shape {expected}, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataValidationError(f"{name} has an empty spatial dimension: {arr.shape}")
    return arr


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_odd_int(value, name):
    value = check_positive_int(value, name)
    if value % 2 == 0:
        raise ValueError(f"{name} must be odd, got {value}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
