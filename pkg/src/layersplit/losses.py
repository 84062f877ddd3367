"""Label-free separation objective for ``n`` inputs sharing a background.

All reductions are means over pixels and channels (and batch, if present), so
the weights do not depend on the image resolution:

* naive reconstruction: ``mean_i mse(R_i + B_i, I_i)``
* cross reconstruction: ``mean_{i != j} mse(R_i + B_j, I_i)``
* floor rejection: ``mean_i mae(B_i, I_i)``
* ceiling rejection: ``sum_{i, j} mean(max(B_i - I_j, 0))``

``total = lambda1 * (naive + cross) + lambda2 * floor + ceiling``.

Functions accept torch tensors or numpy arrays of any matching shape and
return 0-d tensors, so they can be differentiated directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from ._validation import ShapeError

DEFAULT_WEIGHTS = {
    "subtract_clip": (15.0, 20.0),
    "linear_add": (80.0, 50.0),
}
TERMS = ("recons", "floor", "ceiling")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 15.0
    lambda2: float = 20.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = float(getattr(self, name))
            if not (v >= 0.0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @classmethod
    def for_model(cls, model_tag):
        return cls(*DEFAULT_WEIGHTS[model_tag])


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


@dataclass
class PredictionSet:
    backgrounds: list
    reflections: list
    inputs: list

    def __post_init__(self):
        self.backgrounds = [_t(b) for b in self.backgrounds]
        self.reflections = [_t(r) for r in self.reflections]
        self.inputs = [_t(i) for i in self.inputs]
        n = len(self.inputs)
        if n < 1 or len(self.backgrounds) != n or len(self.reflections) not in (0, n):
            raise ShapeError(f"need matching counts, got {len(self.backgrounds)} backgrounds, "
                             f"{len(self.reflections)} reflections, {n} inputs")
        shapes = {tuple(t.shape) for t in self.backgrounds + self.reflections + self.inputs}
        if len(shapes) != 1:
            raise ShapeError(f"prediction set mixes shapes {sorted(shapes)}")

    @property
    def n(self):
        return len(self.inputs)


@dataclass
class LossBreakdown:
    recons_naive: torch.Tensor
    recons_cross: torch.Tensor
    floor: torch.Tensor
    ceiling: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self):
        return {k: float(getattr(self, k).detach())
                for k in ("recons_naive", "recons_cross", "floor", "ceiling", "total")}


def compose(r_hat, b_hat):
    """Recomposed image ``R + B``; deliberately not clamped."""
    r_hat, b_hat = _t(r_hat), _t(b_hat)
    if r_hat.shape != b_hat.shape:
        raise ShapeError(f"cannot compose shapes {tuple(r_hat.shape)} and {tuple(b_hat.shape)}")
    return r_hat + b_hat


def recon_loss(p: PredictionSet):
    """``(naive, cross)`` reconstruction terms."""
    if p.n < 2:
        raise ValueError("reconstruction loss needs at least two inputs")
    if not p.reflections:
        raise ValueError("reconstruction loss needs reflection predictions")
    B, R, I = p.backgrounds, p.reflections, p.inputs
    naive = torch.stack([F.mse_loss(compose(R[i], B[i]), I[i]) for i in range(p.n)]).mean()
    cross = torch.stack([F.mse_loss(compose(R[i], B[j]), I[i])
                         for i in range(p.n) for j in range(p.n) if i != j]).mean()
    return naive, cross


def floor_loss(p: PredictionSet):
    return torch.stack([F.l1_loss(b, i) for b, i in zip(p.backgrounds, p.inputs)]).mean()


def ceiling_loss(p: PredictionSet):
    """One-sided L1 of every background against every input."""
    return torch.stack([F.relu(b - i).mean() for b in p.backgrounds for i in p.inputs]).sum()


def total_loss(p: PredictionSet, w: LossWeights | None = None, drop=()) -> LossBreakdown:
    """Weighted objective. Terms named in ``drop`` are skipped and logged as 0."""
    w = w or LossWeights()
    unknown = set(drop) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms to drop: {sorted(unknown)}")
    zero = torch.zeros((), dtype=p.inputs[0].dtype, device=p.inputs[0].device)
    if "recons" in drop:
        naive = cross = zero
    else:
        naive, cross = recon_loss(p)
    floor = zero if "floor" in drop else floor_loss(p)
    ceiling = zero if "ceiling" in drop else ceiling_loss(p)
    total = zero
    if "recons" not in drop:
        total = total + w.lambda1 * (naive + cross)
    if "floor" not in drop:
        total = total + w.lambda2 * floor
    if "ceiling" not in drop:
        total = total + ceiling
    return LossBreakdown(naive, cross, floor, ceiling, total, w)


def supervised_loss(b_hat, r_hat, b, r):
    """Pixel-wise supervised baseline: ``mse(B_hat, B) + mse(R_hat, R)``."""
    b_hat, r_hat, b, r = map(_t, (b_hat, r_hat, b, r))
    if not (b_hat.shape == b.shape == r_hat.shape == r.shape):
        raise ShapeError("supervised loss needs matching shapes")
    return F.mse_loss(b_hat, b) + F.mse_loss(r_hat, r)
