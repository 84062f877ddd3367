"""scikit-learn style wrapper around label-free training and inference."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ShapeError, check_image, image_to_tensor, tensor_to_image
from .losses import DEFAULT_WEIGHTS, LossWeights
from .model import load_checkpoint, save_checkpoint
from .synth import Corpus
from .train import TrainConfig, fit_groups, train


def check_pair_array(X) -> np.ndarray:
    """Validate training groups as ``(n_groups, n_inputs, H, W, 3)`` in [0, 1]."""
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64, copy=False)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 3 or arr.shape[1] < 2:
        raise ShapeError("expected image groups of shape (n_groups, n_inputs >= 2, H, W, 3), "
                         f"got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("images must be finite and lie in [0, 1]")
    return arr


def check_image_batch(X) -> np.ndarray:
    """Validate ``(H, W, 3)`` or ``(n, H, W, 3)`` images; returns the batched form."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (n, H, W, 3) images, got {arr.shape}")
    return np.stack([check_image(im) for im in arr])


class ReflectionRemover(TransformerMixin, BaseEstimator):
    """Single-image reflection removal trained without ground truth.

    ``fit`` accepts either a :class:`~layersplit.synth.Corpus` (pairs are then
    synthesized online with ``model_tag``) or an array of image groups that
    share a background, shaped ``(n_groups, n_inputs, H, W, 3)``.
    ``transform`` maps single images to background estimates.

    Parameters
    ----------
    model_tag : {"subtract_clip", "linear_add"}
        Selects the default loss weights and, for corpus training, the mixer.
    lambda1, lambda2 : float or None
        Reconstruction and floor weights; ``None`` uses the model's defaults.
    n_steps : int
        Optimizer steps.
    """

    def __init__(self, model_tag="subtract_clip", variant="latent_code", lambda1=None,
                 lambda2=None, learning_rate=0.01, n_steps=1000, batch_size=8,
                 drop=(), patch_size=256, random_state=0):
        self.model_tag = model_tag
        self.variant = variant
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.drop = drop
        self.patch_size = patch_size
        self.random_state = random_state

    def _train_config(self, mode="unsupervised", n_inputs=2):
        default = DEFAULT_WEIGHTS.get(self.model_tag, (15.0, 20.0))
        weights = LossWeights(default[0] if self.lambda1 is None else self.lambda1,
                              default[1] if self.lambda2 is None else self.lambda2)
        return TrainConfig(
            model_tag=self.model_tag, batch_size=int(self.batch_size),
            learning_rate=float(self.learning_rate), epochs=1,
            steps_per_epoch=int(self.n_steps), weights=weights, n_inputs=n_inputs,
            ablation=frozenset(f"drop_{t}" for t in self.drop), mode=mode,
            variant=self.variant, seed=int(self.random_state), patch_size=int(self.patch_size),
        ).validate()

    def fit(self, X, y=None):
        if isinstance(X, Corpus):
            cfg = self._train_config()
            self.network_, self.log_ = train(cfg, X)
            self.n_inputs_ = cfg.n_inputs
        else:
            groups = check_pair_array(X)
            cfg = self._train_config(n_inputs=groups.shape[1])
            self.network_, self.log_ = fit_groups(list(groups), cfg)
            self.n_inputs_ = groups.shape[1]
        self.config_ = cfg
        return self

    def _predict_role(self, X, role):
        check_is_fitted(self, "network_")
        images = check_image_batch(X)
        net = self.network_
        net.eval()
        out = []
        with torch.no_grad():
            for im in images:
                y = net.predict(image_to_tensor(im), role)
                out.append(np.clip(tensor_to_image(y), 0.0, 1.0))
        return np.stack(out)

    def transform(self, X):
        """Background estimates, one per input image."""
        return self._predict_role(X, "background")

    def predict_reflection(self, X):
        return self._predict_role(X, "reflection")

    def fit_transform(self, X, y=None, **fit_params):
        """Fit on image groups and return the background of every member."""
        self.fit(X, y, **fit_params)
        if isinstance(X, Corpus):
            raise TypeError("fit_transform needs image groups, not a corpus")
        groups = check_pair_array(X)
        flat = groups.reshape(-1, *groups.shape[2:])
        return self.transform(flat).reshape(groups.shape)

    def save(self, path):
        check_is_fitted(self, "network_")
        return save_checkpoint(self.network_, path, extra={"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        net, extra = load_checkpoint(path, with_extra=True)
        est = cls(**extra.get("estimator", {}))
        est.network_ = net
        return est
