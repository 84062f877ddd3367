"""Corpus ingestion and reflection-image synthesis.

Two mixing models are supported:

* ``linear_add``: ``I = clamp(B + w * R)`` with ``w ~ U[0.6, 0.8]``, giving
  weak, sharp reflections.
* ``subtract_clip``: the reflection is Gaussian blurred, the mean overflow
  above 1 is subtracted from it (scaled by ``gamma``), and the sum is clamped.
  This gives strong, blurry reflections.

Training pairs share one background and differ only in the reflection.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from ._validation import CorpusError, check_image, check_same_shape
from .imageio import IMAGE_SUFFIXES, write_image

logger = logging.getLogger(__name__)

ModelTag = Literal["linear_add", "subtract_clip"]
MODEL_TAGS = ("linear_add", "subtract_clip")
CLI_MODEL_NAMES = {"linear": "linear_add", "subclip": "subtract_clip"}

LINEAR_WEIGHT_RANGE = (0.6, 0.8)
BLUR_SIGMA_RANGE = (2.0, 5.0)
OVERFLOW_GAMMA = 1.3


@dataclass(frozen=True)
class MixParams:
    model_tag: str
    w: float | None = None
    sigma: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.model_tag == "linear_add":
            if self.w is None or not LINEAR_WEIGHT_RANGE[0] <= self.w <= LINEAR_WEIGHT_RANGE[1]:
                raise ValueError(f"linear_add needs w in [0.6, 0.8], got {self.w}")
        elif self.model_tag == "subtract_clip":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError(f"subtract_clip needs sigma > 0, got {self.sigma}")
            if self.gamma is None or self.gamma < 0:
                raise ValueError(f"subtract_clip needs gamma >= 0, got {self.gamma}")
        else:
            raise ValueError(f"unknown model_tag {self.model_tag!r}")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class MixPair:
    """``n`` synthesized inputs sharing one background.

    ``inputs[k]`` was composed from ``gt_b`` and ``gt_r[k]`` with ``params[k]``.
    For ``subtract_clip`` the stored reflection is the adjusted (blurred and
    shifted) layer actually added to the background.
    """

    inputs: list
    params: list
    gt_b: np.ndarray | None = None
    gt_r: list = field(default_factory=list)

    @property
    def i1(self):
        return self.inputs[0]

    @property
    def i2(self):
        return self.inputs[1]

    @property
    def params1(self):
        return self.params[0]

    @property
    def params2(self):
        return self.params[1]

    @property
    def gt_r1(self):
        return self.gt_r[0] if self.gt_r else None

    @property
    def gt_r2(self):
        return self.gt_r[1] if self.gt_r else None

    @property
    def n_inputs(self):
        return len(self.inputs)


@dataclass
class Corpus:
    root: Path
    train: list
    test: list
    seed: int

    def load(self, path) -> np.ndarray:
        return _load_cached(str(path))

    def __len__(self):
        return len(self.train) + len(self.test)


def _decode_uint8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


@lru_cache(maxsize=512)
def _load_cached(path: str) -> np.ndarray:
    cache_dir = os.environ.get("LAYERSPLIT_CACHE")
    if cache_dir:
        st = os.stat(path)
        key = f"{abs(hash((path, st.st_mtime_ns, st.st_size))):x}.npy"
        cached = Path(cache_dir) / key
        if cached.exists():
            return np.load(cached)
        arr = _decode_uint8(path)
        cached.parent.mkdir(parents=True, exist_ok=True)
        np.save(cached, arr)
        return arr
    return _decode_uint8(path)


def load_corpus(root, test_fraction: float = 0.05, seed: int = 0) -> Corpus:
    """Index a directory of color images and split it into train/test.

    Undecodable files are skipped with a warning. The split depends only on
    the sorted file names and ``seed``.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    candidates = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not candidates:
        raise CorpusError(f"corpus root {root} contains no images")
    paths = []
    for p in candidates:
        try:
            with Image.open(p) as im:
                im.verify()
            paths.append(p)
        except Exception as exc:  # PIL raises a zoo of exception types
            logger.warning("skipping undecodable image %s (%s)", p, exc)
    if len(paths) < 3:
        raise CorpusError(f"need at least 3 decodable images, found {len(paths)}")
    order = np.random.default_rng(seed).permutation(len(paths))
    n_test = int(round(len(paths) * test_fraction))
    test = sorted(paths[k] for k in order[:n_test])
    train = sorted(paths[k] for k in order[n_test:])
    return Corpus(root=root, train=train, test=test, seed=seed)


def mix_linear(b, r, w: float) -> np.ndarray:
    """``clamp(b + w * r, 0, 1)``."""
    b = check_image(b, "b")
    r = check_image(r, "r")
    check_same_shape(b, r, names=("b", "r"))
    if not 0.0 < w <= 1.0:
        raise ValueError(f"w must be in (0, 1], got {w}")
    return np.clip(b + w * r, 0.0, 1.0)


def mix_subtract_clip(b, r, sigma: float, gamma: float = OVERFLOW_GAMMA):
    """Blur ``r``, pull it down by the mean overflow, and clamp the sum.

    The overflow mean is taken per channel over the positions where
    ``b + blur(r)`` exceeds 1. Returns ``(mixed, adjusted_reflection)``.
    """
    b = check_image(b, "b")
    r = check_image(r, "r")
    check_same_shape(b, r, names=("b", "r"))
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r_blur = gaussian_filter(r, sigma=(sigma, sigma, 0), mode="reflect")
    raw = b + r_blur
    r_adj = r_blur.copy()
    for c in range(3):
        over = raw[:, :, c] > 1.0
        if over.any():
            excess = (raw[:, :, c][over] - 1.0).mean()
            r_adj[:, :, c] = r_blur[:, :, c] - gamma * excess
    r_adj = np.clip(r_adj, 0.0, 1.0)
    return np.clip(b + r_adj, 0.0, 1.0), r_adj


def _random_patch(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    crop = int(rng.integers(min(size, side), side + 1))
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    patch = Image.fromarray(img[y:y + crop, x:x + crop])
    if crop != size:
        patch = patch.resize((size, size), Image.BILINEAR)
    return np.asarray(patch, dtype=np.float64) / 255.0


def sample_params(model_tag: str, rng: np.random.Generator) -> MixParams:
    if model_tag == "linear_add":
        return MixParams("linear_add", w=float(rng.uniform(*LINEAR_WEIGHT_RANGE)))
    if model_tag == "subtract_clip":
        return MixParams("subtract_clip", sigma=float(rng.uniform(*BLUR_SIGMA_RANGE)),
                         gamma=OVERFLOW_GAMMA)
    raise ValueError(f"unknown model_tag {model_tag!r}")


def compose_layers(b, r, params: MixParams):
    """Apply one mixing model; returns ``(image, reflection_as_added)``."""
    if params.model_tag == "linear_add":
        return mix_linear(b, r, params.w), params.w * np.asarray(r, dtype=np.float64)
    return mix_subtract_clip(b, r, params.sigma, params.gamma)


def sample_pair(corpus: Corpus, model_tag: str, rng: np.random.Generator,
                patch_size: int = 256, n_inputs: int = 2, split: str = "train") -> MixPair:
    """Synthesize ``n_inputs`` images that share one background.

    Draws ``1 + n_inputs`` distinct images (one background, one reflection
    per input) and samples mixing parameters independently per input.
    """
    pool = corpus.train if split == "train" else corpus.test
    if len(pool) < 1 + n_inputs:
        raise CorpusError(f"{split} split has {len(pool)} images, need {1 + n_inputs}")
    if n_inputs < 2:
        raise ValueError("n_inputs must be >= 2")
    picks = rng.choice(len(pool), size=1 + n_inputs, replace=False)
    layers = [_random_patch(corpus.load(pool[k]), patch_size, rng) for k in picks]
    gt_b = layers[0]
    inputs, params, gt_r = [], [], []
    for r in layers[1:]:
        p = sample_params(model_tag, rng)
        img, r_added = compose_layers(gt_b, r, p)
        inputs.append(img)
        params.append(p)
        gt_r.append(r_added)
    return MixPair(inputs=inputs, params=params, gt_b=gt_b, gt_r=gt_r)


def dump_pair(pair: MixPair, out_dir, pair_id: str) -> list:
    """Write ``{id}_i1.png``, ``{id}_i2.png``, ..., ``{id}_b.png`` and ``{id}.json``."""
    out_dir = Path(out_dir)
    written = [write_image(out_dir / f"{pair_id}_i{k + 1}.png", img)
               for k, img in enumerate(pair.inputs)]
    if pair.gt_b is not None:
        written.append(write_image(out_dir / f"{pair_id}_b.png", pair.gt_b))
    sidecar = out_dir / f"{pair_id}.json"
    sidecar.write_text(json.dumps({"id": pair_id,
                                   "params": [p.to_dict() for p in pair.params]}, indent=2))
    written.append(sidecar)
    return written
