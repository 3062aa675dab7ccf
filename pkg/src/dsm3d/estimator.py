"""scikit-learn style front end to the elevation network.

``ElevationRegressor`` wraps weight initialization, momentum-SGD fitting of
the trainable tail, and tiled prediction behind the usual fit/predict/score
surface, so the model drops into sklearn pipelines, ``clone``, and parameter
search utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .gradients import (
    loss_and_gradients,
    sgd_momentum_step,
    trainable_tensors,
)
from .metrics import evaluate
from .network import (
    BerHuConfig,
    ModelConfig,
    ModelParams,
    init_params,
    load_weights,
    predict_elevation,
    save_weights,
)
from .raster import fuse_patches, plan_tiles
from .validation import check_elevation_batch, check_image_batch


class ElevationRegressor(BaseEstimator):
    """Monocular elevation estimator with a fit/predict interface.

    Parameters
    ----------
    heads : int
        Attention heads in the globalization stage.
    embed_dim : int
        Channel width of the attention embedding; must be divisible by heads.
    encoder_widths : tuple of int
        Widths of the two encoder stages.
    c_fraction : float
        Reverse-Huber threshold as a fraction of the max absolute residual.
    learning_rate, momentum : float
        Momentum-SGD settings used by fit.
    n_iter : int
        Training iterations; each iteration consumes one sample, cycling.
    tile, overlap : int
        Sliding-window geometry used by predict on large inputs.
    random_state : int
        Seed for weight initialization.
    """

    def __init__(self, heads: int = 4, embed_dim: int = 32,
                 encoder_widths: tuple = (32, 64), c_fraction: float = 0.2,
                 learning_rate: float = 0.01, momentum: float = 0.9,
                 n_iter: int = 100, tile: int = 512, overlap: int = 64,
                 random_state: int = 0):
        self.heads = heads
        self.embed_dim = embed_dim
        self.encoder_widths = encoder_widths
        self.c_fraction = c_fraction
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.n_iter = n_iter
        self.tile = tile
        self.overlap = overlap
        self.random_state = random_state

    # -- parameter container ---------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(heads=self.heads, embed_dim=self.embed_dim,
                           encoder_widths=tuple(self.encoder_widths),
                           c_fraction=self.c_fraction)

    def _check_fitted(self) -> ModelParams:
        params = getattr(self, "params_", None)
        if params is None:
            raise NotFittedError("this ElevationRegressor is not fitted; "
                                 "call fit or load_weights first")
        return params

    # -- sklearn surface -----------------------------------------------------

    def fit(self, X, y):
        """Fit the trainable tail on (image, elevation) pairs.

        X is one (H, W, 3) image or a sequence of them; y the matching
        (H, W) elevation maps. Returns self.
        """
        images = check_image_batch(X)
        targets = check_elevation_batch(y, images)
        params = init_params(self._model_config(), seed=self.random_state)
        tensors = trainable_tensors(params)
        velocity = {name: np.zeros_like(t) for name, t in tensors.items()}
        cfg = BerHuConfig(c_fraction=self.c_fraction)
        history = []
        for it in range(self.n_iter):
            image = images[it % len(images)]
            target = targets[it % len(images)]
            loss, _, grads = loss_and_gradients(image, target, params, cfg)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at iteration {it}")
            history.append(loss)
            sgd_momentum_step(tensors, grads, velocity,
                              self.learning_rate, self.momentum)
        self.params_ = params
        self.loss_history_ = history
        return self

    def predict(self, X):
        """Predict elevation maps; returns one (H, W) array per input image."""
        params = self._check_fitted()
        images = check_image_batch(X)
        preds = [self._predict_single(img, params) for img in images]
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return preds[0]
        return np.stack(preds) if len({p.shape for p in preds}) == 1 else preds

    def _predict_single(self, image: np.ndarray, params: ModelParams):
        h, w, _ = image.shape
        if h <= self.tile and w <= self.tile:
            return predict_elevation(image, params)
        plan = plan_tiles(h, w, tile=self.tile, overlap=self.overlap)
        if plan.tile_h % 8 or plan.tile_w % 8:
            raise ValueError("tile extents must be divisible by 8")
        patches = []
        for (r, c) in plan.anchors:
            sub = image[r:r + plan.tile_h, c:c + plan.tile_w]
            patches.append(((r, c), predict_elevation(sub, params)))
        return fuse_patches(patches, h, w).data

    def score(self, X, y):
        """delta_1 accuracy (fraction of pixels within ratio 1.25) over X."""
        params = self._check_fitted()
        images = check_image_batch(X)
        targets = check_elevation_batch(y, images)
        deltas = []
        for image, target in zip(images, targets):
            pred = self._predict_single(image, params)
            deltas.append(evaluate(pred, target).delta1)
        return float(np.mean(deltas))

    # -- persistence ----------------------------------------------------------

    def save_weights(self, path) -> None:
        save_weights(self._check_fitted(), path)

    def load_weights(self, path):
        """Load a weights file, adopting its hyperparameter config."""
        params = load_weights(path)
        self.params_ = params
        cfg = params.config
        self.heads = cfg.heads
        self.embed_dim = cfg.embed_dim
        self.encoder_widths = tuple(cfg.encoder_widths)
        self.c_fraction = cfg.c_fraction
        return self

    def init_unfitted(self):
        """Adopt seeded random weights without training (for smoke tests)."""
        self.params_ = init_params(self._model_config(), seed=self.random_state)
        return self
