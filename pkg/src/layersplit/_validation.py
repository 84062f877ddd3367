"""Input validation helpers and the package's exception types."""

from __future__ import annotations

import numpy as np
import torch


class LayersplitError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(LayersplitError, ValueError):
    pass


class CorpusError(LayersplitError):
    pass


class ConfigError(LayersplitError, ValueError):
    """Raised with one or more field-level messages."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class OwnershipError(LayersplitError):
    """A latent code was used with a network that does not own it."""


class CheckpointError(LayersplitError):
    pass


class TrainingDiverged(LayersplitError, FloatingPointError):
    pass


class UndefinedAlphaError(LayersplitError, ZeroDivisionError):
    pass


def check_image(image, name="image", clip_range=True) -> np.ndarray:
    """Validate an ``(H, W, 3)`` float image and return it as float64.

    8-bit arrays are mapped to [0, 1] by ``value / 255``.
    """
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64, copy=False)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if clip_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(*arrays, names=None):
    shapes = [tuple(a.shape) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ShapeError(f"shape mismatch between {label}: {shapes}")


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` tensor."""
    arr = check_image(image, clip_range=False)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(dtype)


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` or ``(3, H, W)`` tensor -> ``(H, W, 3)`` float64 array."""
    t = tensor.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ShapeError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return t.double().numpy().transpose(1, 2, 0).copy()
