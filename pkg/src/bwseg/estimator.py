"""scikit-learn style wrapper around the two-stage pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics as M
from . import pipeline as P
from .weak_labels import UNLABELED

STRATEGIES = ("bayesian", "pce", "full")


def check_images(X) -> list[np.ndarray]:
    """List of finite 2-D float64 images with values in [0, 1]."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for i, im in enumerate(X):
        a = np.asarray(im, dtype=np.float64)
        if a.ndim == 3 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 2:
            raise ValueError(f"image {i}: expected a 2-D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
            raise ValueError(f"image {i}: values must be finite and lie in [0, 1]")
        out.append(a)
    if not out:
        raise ValueError("no images given")
    return out


def check_label_maps(y, images, n_classes: int, allow_unlabeled: bool) -> list[np.ndarray]:
    """uint8 label maps matching ``images`` in count and shape."""
    if isinstance(y, np.ndarray) and y.ndim == 2:
        y = [y]
    y = [np.asarray(a) for a in y]
    if len(y) != len(images):
        raise ValueError(f"got {len(images)} images but {len(y)} label maps")
    for i, (lab, im) in enumerate(zip(y, images)):
        if lab.shape != im.shape:
            raise ValueError(f"label map {i}: shape {lab.shape} differs from image {im.shape}")
        bad = (lab >= n_classes) & ((lab != UNLABELED) | (not allow_unlabeled))
        if np.any(bad) or np.any(lab < 0):
            what = f"[0, {n_classes}) or {UNLABELED}" if allow_unlabeled else f"[0, {n_classes})"
            raise ValueError(f"label map {i}: values must lie in {what}")
    return [lab.astype(np.uint8) for lab in y]


class WeakSegmenter(BaseEstimator):
    """Segmentation from scribbles.

    ``strategy='bayesian'`` runs generator training, pseudo-labelling and
    stage-2 training; ``'pce'`` trains the U-Net on the scribbles alone;
    ``'full'`` expects dense labels and trains with cross-entropy.
    """

    def __init__(self, strategy="bayesian", n_classes=4, epochs=100, epochs_seg=None, lr=1e-4,
                 weight_decay=1e-4, batch=8, alpha=1e-3, beta=1e-1, gamma=1e-8, n_samples=3,
                 t_infer=15, latent_dim=16, dropout=0.1, sigma_xy=5.0, sigma_int=0.1, crf_crop=32,
                 optimizer="adam", prior_z=False, normalize_pce=False, base_width=8, depth=2,
                 dtype="float64", random_state=0):
        self.strategy = strategy
        self.n_classes = n_classes
        self.epochs = epochs
        self.epochs_seg = epochs_seg
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch = batch
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.n_samples = n_samples
        self.t_infer = t_infer
        self.latent_dim = latent_dim
        self.dropout = dropout
        self.sigma_xy = sigma_xy
        self.sigma_int = sigma_int
        self.crf_crop = crf_crop
        self.optimizer = optimizer
        self.prior_z = prior_z
        self.normalize_pce = normalize_pce
        self.base_width = base_width
        self.depth = depth
        self.dtype = dtype
        self.random_state = random_state

    def _config(self) -> P.TrainConfig:
        params = self.get_params()
        params.pop("strategy")
        seed = params.pop("random_state")
        return P.TrainConfig(seed=0 if seed is None else int(seed), **params)

    def fit(self, X, y):
        """``y`` holds scribble maps (UNLABELED elsewhere), or dense labels for ``'full'``."""
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        cfg = self._config()
        images = check_images(X)
        labels = check_label_maps(y, images, cfg.n_classes, allow_unlabeled=self.strategy != "full")
        self.config_ = cfg
        self.generator_ = None
        self.pseudo_labels_ = None
        if self.strategy == "bayesian":
            self.generator_, self.stage1_log_ = P.train_stage1(images, labels, cfg)
            self.pseudo_labels_ = P.generate_pseudo_labels(self.generator_, images, labels, cfg.n_samples,
                                                           P.stream(cfg.seed, "pseudo"), cfg.prior_z)
            self.segmenter_, self.stage2_log_ = P.train_stage2(images, self.pseudo_labels_, cfg)
        elif self.strategy == "pce":
            self.segmenter_, self.stage2_log_ = P.train_segmenter(images, labels, cfg, loss="pce", tag="pce")
        else:
            self.segmenter_, self.stage2_log_ = P.train_segmenter(images, labels, cfg, loss="ce", tag="full")
        return self

    def _infer(self, X):
        check_is_fitted(self, "segmenter_")
        images = check_images(X)
        probs, unc = P.mc_dropout_infer(self.segmenter_, images, self.config_.t_infer,
                                        P.stream(self.config_.seed, "infer"))
        shapes = [im.shape for im in images]
        return P.crop_to(probs, shapes), P.crop_to(unc, shapes)

    def predict_proba(self, X) -> list[np.ndarray]:
        """Mean MC-dropout probability map (C, H, W) per image."""
        return self._infer(X)[0]

    def predict(self, X) -> list[np.ndarray]:
        return [p.argmax(axis=0).astype(np.uint8) for p in self.predict_proba(X)]

    def predict_uncertainty(self, X) -> list[np.ndarray]:
        """Per-pixel entropy (nats) of the mean probability map."""
        return self._infer(X)[1]

    def score(self, X, y) -> float:
        """Mean Dice (percent) against dense labels."""
        images = check_images(X)
        gts = check_label_maps(y, images, self.n_classes, allow_unlabeled=False)
        preds = self.predict(images)
        return float(np.mean([M.all_rates(p, g, self.n_classes)["DC"].mean for p, g in zip(preds, gts)]))
