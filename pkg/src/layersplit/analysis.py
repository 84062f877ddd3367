"""Toy data, brute-force minimizers of the objective, and feature probes.

Because every loss term is a mean of per-pixel quantities, the objective over
free layer values splits into independent 4-variable problems
``(b1, b2, r1, r2)`` per pixel and channel. :func:`pixel_oracle` solves one
of these by exhaustive grid search over the two backgrounds (the reflections
have an exact closed form given them) followed by coordinate refinement;
:func:`image_oracle` solves all of them at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ._validation import ConfigError, ShapeError, check_image, check_same_shape, image_to_tensor
from .losses import LossWeights


def toy_images(size=64, rect_value=0.6, circle_value=0.8, rect=(0.25, 0.15, 0.75, 0.55),
               circles=((0.3, 0.78, 0.14), (0.72, 0.78, 0.14))):
    """Rectangle background plus one circular reflection per image.

    ``rect`` is ``(top, left, bottom, right)`` and each circle is
    ``(row, col, radius)``, all as fractions of ``size``. Images are composed
    additively and clamped. Returns ``(i1, i2, gt_b)``.
    """
    if size < 32:
        raise ValueError(f"toy size must be >= 32, got {size}")
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    top, left, bottom, right = (int(round(v * size)) for v in rect)
    gt_b = np.zeros((size, size, 3))
    gt_b[top:bottom, left:right] = rect_value
    images = []
    for cy, cx, rad in circles[:2]:
        disk = (yy - cy * size) ** 2 + (xx - cx * size) ** 2 <= (rad * size) ** 2
        r = np.zeros_like(gt_b)
        r[disk] = circle_value
        images.append(np.clip(gt_b + r, 0.0, 1.0))
    return images[0], images[1], gt_b


def pixel_energy(b1, b2, r1, r2, i1, i2, lambda1, lambda2):
    """Two-input objective at single pixels (broadcasts over arrays)."""
    naive = 0.5 * ((r1 + b1 - i1) ** 2 + (r2 + b2 - i2) ** 2)
    cross = 0.5 * ((r1 + b2 - i1) ** 2 + (r2 + b1 - i2) ** 2)
    floor = 0.5 * (np.abs(b1 - i1) + np.abs(b2 - i2))
    ceiling = (np.maximum(b1 - i1, 0) + np.maximum(b1 - i2, 0)
               + np.maximum(b2 - i1, 0) + np.maximum(b2 - i2, 0))
    return lambda1 * (naive + cross) + lambda2 * floor + ceiling


@dataclass
class PixelSolution:
    b1: float
    b2: float
    r1: float
    r2: float
    energy: float


@dataclass
class OracleSolution:
    """Per-position minimizers for a pair of images, plus the mean energy."""

    b1: np.ndarray
    b2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    energy: float
    pixel_energy: np.ndarray


def _continuous_r(b1, b2, i1, i2):
    """Exact minimizing reflections for fixed backgrounds.

    Each ``r_k`` only enters ``(r_k + b1 - i_k)^2 + (r_k + b2 - i_k)^2``, a 1-D
    convex quadratic whose clipped stationary point is ``i_k - (b1 + b2) / 2``.
    """
    s = 0.5 * (b1 + b2)
    return np.clip(i1 - s, 0.0, 1.0), np.clip(i2 - s, 0.0, 1.0)


def _solve(i1, i2, lambda1, lambda2, grid_step):
    """Solve once per distinct ``(i1, i2)`` value pair and scatter back."""
    pairs = np.stack([np.asarray(i1, dtype=np.float64).ravel(),
                      np.asarray(i2, dtype=np.float64).ravel()], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    x, energy = _solve_unique(uniq[:, 0], uniq[:, 1], lambda1, lambda2, grid_step)
    inverse = inverse.ravel()
    return x[inverse], energy[inverse]


def _solve_unique(i1, i2, lambda1, lambda2, grid_step, chunk=48):
    n = int(math.ceil(1.0 / grid_step - 1e-9))
    grid = np.arange(n + 1) / n
    gb1, gb2 = (g.ravel() for g in np.meshgrid(grid, grid, indexing="ij"))
    best = np.empty((i1.size, 4))
    for start in range(0, i1.size, chunk):
        t1 = i1[start:start + chunk, None]
        t2 = i2[start:start + chunk, None]
        r1, r2 = _continuous_r(gb1, gb2, t1, t2)
        e = pixel_energy(gb1, gb2, r1, r2, t1, t2, lambda1, lambda2)
        k = np.argmin(e, axis=1)
        rows = np.arange(k.size)
        best[start:start + chunk] = np.stack([gb1[k], gb2[k], r1[rows, k], r2[rows, k]], axis=1)
    x = best
    x[:, 2:] = np.stack(_continuous_r(x[:, 0], x[:, 1], i1, i2), axis=1)
    energy = pixel_energy(*x.T, i1, i2, lambda1, lambda2)
    # refine the backgrounds below grid resolution; r stays at its exact optimum
    step = 1.0 / n
    for _ in range(8):
        step /= 2
        for _sweep in range(64):
            improved = False
            for c in range(2):
                for delta in (step, -step):
                    cand = x.copy()
                    cand[:, c] = np.clip(cand[:, c] + delta, 0.0, 1.0)
                    cand[:, 2:] = np.stack(_continuous_r(cand[:, 0], cand[:, 1], i1, i2), axis=1)
                    e = pixel_energy(*cand.T, i1, i2, lambda1, lambda2)
                    better = e < energy
                    if better.any():
                        improved = True
                        x[better] = cand[better]
                        energy[better] = e[better]
            if not improved:
                break
    return x, energy


def pixel_oracle(i1: float, i2: float, w: LossWeights | None = None,
                 grid_step: float = 1 / 255) -> PixelSolution:
    """Global minimizer of the one-pixel objective over ``[0, 1]^4``."""
    if not (0.0 <= i1 <= 1.0 and 0.0 <= i2 <= 1.0):
        raise ValueError("pixel intensities must lie in [0, 1]")
    if not 0 < grid_step <= 1 / 255:
        raise ValueError("grid_step must be in (0, 1/255]")
    w = w or LossWeights()
    x, e = _solve([i1], [i2], w.lambda1, w.lambda2, grid_step)
    b1, b2, r1, r2 = (float(v) for v in x[0])
    return PixelSolution(b1, b2, r1, r2, float(e[0]))


def solve_images(i1, i2, w: LossWeights | None = None, grid_step: float = 1 / 255) -> OracleSolution:
    """Apply the pixel oracle at every position of an image pair."""
    a = np.asarray(i1, dtype=np.float64)
    b = np.asarray(i2, dtype=np.float64)
    check_same_shape(a, b, names=("i1", "i2"))
    if not 0 < grid_step <= 1 / 255:
        raise ValueError("grid_step must be in (0, 1/255]")
    w = w or LossWeights()
    x, e = _solve(a, b, w.lambda1, w.lambda2, grid_step)
    maps = [x[:, k].reshape(a.shape) for k in range(4)]
    return OracleSolution(*maps, energy=float(e.mean()), pixel_energy=e.reshape(a.shape))


def image_oracle(i1, i2, w: LossWeights | None = None, grid_step: float = 1 / 255):
    """``(background, energy)``: the oracle background for input 1 and the mean energy."""
    sol = solve_images(i1, i2, w, grid_step)
    return sol.b1, sol.energy


@dataclass
class ChannelReport:
    background_mse: np.ndarray
    reflection_mse: np.ndarray
    effective_threshold: float = 1.0

    @property
    def active_background(self):
        return set(np.flatnonzero(self.background_mse > 0).tolist())

    @property
    def active_reflection(self):
        return set(np.flatnonzero(self.reflection_mse > 0).tolist())

    @property
    def effective_background(self):
        return set(np.flatnonzero(self.background_mse >= self.effective_threshold).tolist())

    @property
    def effective_reflection(self):
        return set(np.flatnonzero(self.reflection_mse >= self.effective_threshold).tolist())

    @property
    def shared_active(self):
        return len(self.active_background & self.active_reflection)

    @property
    def shared_effective(self):
        return len(self.effective_background & self.effective_reflection)

    def to_dict(self):
        return {
            "effective_threshold": self.effective_threshold,
            "background_mse": self.background_mse.tolist(),
            "reflection_mse": self.reflection_mse.tolist(),
            "active_background": sorted(self.active_background),
            "active_reflection": sorted(self.active_reflection),
            "effective_background": sorted(self.effective_background),
            "effective_reflection": sorted(self.effective_reflection),
            "shared_active": self.shared_active,
            "shared_effective": self.shared_effective,
        }


def _require_latent(net):
    if net.variant != "latent_code":
        raise ConfigError(f"channel analysis needs the latent_code variant, got {net.variant!r}")


def active_channels(net, probe_set, effective_threshold: float = 1.0,
                    model_tag=None) -> ChannelReport:
    """Output MSE (8-bit scale) caused by zeroing each first-layer feature channel."""
    _require_latent(net)
    if len(probe_set) == 0:
        raise ValueError("probe_set is empty")
    width = net.config.width
    masks = torch.ones(width, width, 1, 1)
    masks[torch.arange(width), torch.arange(width)] = 0
    net.eval()
    result = {}
    for role in ("background", "reflection"):
        code = net.get_code(role, model_tag)
        total = np.zeros(width)
        with torch.no_grad():
            for image in probe_set:
                x = image_to_tensor(image)
                ref = net.forward(x, code).clamp(0, 1) * 255
                h = net.trunk.features(x, code.scale, code.shift)
                out = net.trunk.from_features(h.expand(width, -1, -1, -1), masks)
                out = out.clamp(0, 1) * 255
                total += ((out - ref) ** 2).double().mean(dim=(1, 2, 3)).numpy()
        result[role] = total / len(probe_set)
    return ChannelReport(result["background"], result["reflection"], effective_threshold)


def feature_grid(net, image, code) -> np.ndarray:
    """First-layer features, min-max normalized per channel, tiled 8 x 8."""
    _require_latent(net)
    net._check_code(code)
    x = image_to_tensor(check_image(image))
    with torch.no_grad():
        h = net.trunk.features(x, code.scale, code.shift)[0].double().numpy()
    c, th, tw = h.shape
    side = int(math.isqrt(c))
    if side * side != c:
        raise ShapeError(f"cannot tile {c} channels into a square grid")
    lo = h.min(axis=(1, 2), keepdims=True)
    span = h.max(axis=(1, 2), keepdims=True) - lo
    norm = np.where(span > 0, (h - lo) / np.where(span > 0, span, 1), 0.0)
    grid = norm.reshape(side, side, th, tw).transpose(0, 2, 1, 3).reshape(side * th, side * tw)
    return np.repeat(grid[:, :, None], 3, axis=2)
