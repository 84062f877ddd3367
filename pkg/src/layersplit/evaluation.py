"""Image-quality metrics and evaluation reports.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and a
dynamic range of 1, computed per channel. ``ssim`` averages the full map,
``ssim_r`` averages it over a region mask, and ``ssim_rs`` first rescales the
prediction channel-wise by the least-squares factor against the reference.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate1d

from ._validation import ShapeError, UndefinedAlphaError, check_same_shape, image_to_tensor, tensor_to_image
from .imageio import read_image, read_mask

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_float(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be (H, W) or (H, W, C), got {arr.shape}")
    return arr


def _gaussian_taps(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _blur(x, taps):
    return correlate1d(correlate1d(x, taps, axis=0, mode="reflect"), taps, axis=1, mode="reflect")


def ssim_map(a, b, data_range=1.0) -> np.ndarray:
    """Per-pixel, per-channel SSIM map of shape ``(H, W, C)``."""
    a = _as_float(a, "a")
    b = _as_float(b, "b")
    check_same_shape(a, b, names=("a", "b"))
    if min(a.shape[:2]) < WINDOW:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {WINDOW}x{WINDOW} window")
    taps = _gaussian_taps()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    out = np.empty_like(a)
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        ux, uy = _blur(x, taps), _blur(y, taps)
        vx = _blur(x * x, taps) - ux * ux
        vy = _blur(y * y, taps) - uy * uy
        vxy = _blur(x * y, taps) - ux * uy
        out[:, :, c] = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
            (ux * ux + uy * uy + c1) * (vx + vy + c2))
    return out


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def _check_mask(mask, shape):
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[:, :, 0]
    m = m.astype(bool)
    if m.shape != tuple(shape[:2]):
        raise ShapeError(f"mask shape {m.shape} does not match image {shape[:2]}")
    if not m.any():
        raise ValueError("region mask is empty")
    return m


def ssim_r(a, b, mask) -> float:
    """SSIM map averaged over the mask-positive pixels (all channels)."""
    smap = ssim_map(a, b)
    m = _check_mask(mask, smap.shape)
    return float(smap[m].mean())


def fit_alpha(b, b_hat) -> np.ndarray:
    """Per-channel least-squares scale ``argmin_a ||b - a * b_hat||^2``."""
    b = _as_float(b, "b")
    b_hat = _as_float(b_hat, "b_hat")
    check_same_shape(b, b_hat, names=("b", "b_hat"))
    num = np.einsum("hwc,hwc->c", b, b_hat)
    den = np.einsum("hwc,hwc->c", b_hat, b_hat)
    if np.any(den == 0):
        raise UndefinedAlphaError("prediction has an all-zero channel; alpha is undefined")
    return num / den


def ssim_rs(b, b_hat, mask) -> float:
    """``ssim_r`` after rescaling the prediction by :func:`fit_alpha` (unclamped)."""
    alpha = fit_alpha(b, b_hat)
    return ssim_r(b, _as_float(b_hat, "b_hat") * alpha, mask)


def psnr(a, b) -> float:
    """PSNR in dB for unit dynamic range; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, names=("a", "b"))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def exceed_fraction(b, i) -> float:
    """Fraction of (pixel, channel) positions where ``b > i`` strictly."""
    b = np.asarray(b, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    check_same_shape(b, i, names=("b", "i"))
    return float(np.mean(b > i))


METRIC_FIELDS = ("psnr", "ssim", "ssim_r", "ssim_rs")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self):
        agg = {}
        for key in METRIC_FIELDS:
            vals = [r[key] for r in self.rows if r.get(key) is not None]
            agg[key] = float(np.mean(vals)) if vals else None
        return agg

    def to_dict(self):
        return {"rows": [_jsonable(r) for r in self.rows],
                "aggregates": _jsonable(self.aggregates), "config": self.config}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path):
        cols = ["id", *METRIC_FIELDS, "alpha_r", "alpha_g", "alpha_b"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for r in self.rows:
                alpha = r.get("alpha") or [None] * 3
                row = {k: _fmt(r.get(k)) for k in ["id", *METRIC_FIELDS]}
                row.update(alpha_r=alpha[0], alpha_g=alpha[1], alpha_b=alpha[2])
                writer.writerow(row)


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def score_image(row_id, b, b_hat, mask=None) -> dict:
    row = {"id": row_id, "psnr": psnr(b, b_hat), "ssim": ssim(b, b_hat),
           "ssim_r": None, "ssim_rs": None, "alpha": None}
    try:
        row["alpha"] = [float(a) for a in fit_alpha(b, b_hat)]
    except UndefinedAlphaError:
        pass
    if mask is not None:
        row["ssim_r"] = ssim_r(b, b_hat, mask)
        if row["alpha"] is not None:
            row["ssim_rs"] = ssim_rs(b, b_hat, mask)
    return row


def predict_background(net, image, model_tag=None) -> np.ndarray:
    """Background estimate for one ``(H, W, 3)`` image, clamped to [0, 1]."""
    net.eval()
    with torch.no_grad():
        x = image_to_tensor(image)
        out = net.predict(x, "background", model_tag)
    return np.clip(tensor_to_image(out), 0.0, 1.0)


def evaluate(checkpoint, dataset, model_tag=None) -> EvalReport:
    """Score background predictions on ``(input, gt_background, mask_or_None)`` rows.

    ``checkpoint`` is a path or an already loaded network. Rows may also be
    4-tuples with a leading id.
    """
    from .model import ReflectionNet, load_checkpoint

    net = checkpoint if isinstance(checkpoint, ReflectionNet) else load_checkpoint(checkpoint)
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    report = EvalReport(config={"model_tag": model_tag, "variant": net.variant})
    for k, row in enumerate(dataset):
        if len(row) == 4:
            row_id, image, gt, mask = row
        else:
            (image, gt, mask), row_id = row, str(k)
        check_same_shape(np.asarray(image), np.asarray(gt), names=("input", "ground truth"))
        b_hat = predict_background(net, image, model_tag)
        report.rows.append(score_image(row_id, gt, b_hat, mask))
    return report


def load_eval_dir(data_dir) -> list:
    """Rows from ``{id}_i1.png`` (or ``{id}_input.png``), ``{id}_b.png``, ``{id}_mask.png``."""
    data_dir = Path(data_dir)
    rows = []
    for gt_path in sorted(data_dir.glob("*_b.png")):
        row_id = gt_path.name[: -len("_b.png")]
        for name in (f"{row_id}_i1.png", f"{row_id}_input.png"):
            if (data_dir / name).exists():
                inp = data_dir / name
                break
        else:
            continue
        mask_path = data_dir / f"{row_id}_mask.png"
        mask = read_mask(mask_path) if mask_path.exists() else None
        rows.append((row_id, read_image(inp), read_image(gt_path), mask))
    if not rows:
        raise FileNotFoundError(f"no evaluation rows found in {data_dir}")
    return rows
