"""Training losses: the four weighted stage-1 terms, stage-2 cross-entropy and
the dense bilateral kernel used by the CRF term.

All losses take batched probability maps of shape (B, C, H, W) and return a
scalar Tensor averaged over the batch (per-image quantities are summed or
averaged exactly as each docstring states).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .networks import LatentGaussian
from .tensor import ContractError, DomainError, ShapeError, Tensor
from .weak_labels import UNLABELED

KERNEL_PIXEL_CAP = 4096


class ResourceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-3
    beta: float = 1e-1
    gamma: float = 1e-8

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _labels_batch(labels, probs: Tensor) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError("labels", probs.shape, lab.shape)
    return lab


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, H, W) ids -> (B, C, H, W); UNLABELED pixels become all-zero."""
    lab = np.asarray(labels)
    out = np.zeros((lab.shape[0], n_classes) + lab.shape[1:], dtype=dtype)
    for c in range(n_classes):
        out[:, c] = lab == c
    return out


def pce_loss(probs: Tensor, scribbles, normalize: bool = False) -> Tensor:
    """Partial cross-entropy summed over scribbled pixels (mean over the batch).

    With ``normalize`` each image's sum is divided by its scribble count.
    """
    lab = _labels_batch(scribbles, probs)
    C = probs.shape[1]
    labeled = lab != UNLABELED
    if np.any(lab[labeled] >= C):
        raise DomainError(f"pce_loss: scribble class id >= {C}")
    target = one_hot(lab, C, probs.dtype)
    if normalize:
        counts = labeled.reshape(lab.shape[0], -1).sum(axis=1)
        target /= np.maximum(counts, 1).reshape(-1, 1, 1, 1)
    B = probs.shape[0]
    return T.scale(T.sum(T.mul(T.log(probs), target)), -1.0 / B)


def kl_loss(q: LatentGaussian) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) in closed form, summed over dims, mean over batch."""
    mu, logvar = q.mean, q.logvar
    B = mu.shape[0] if mu.data.ndim > 1 else 1
    inner = T.sub(T.add(T.mul(mu, mu), T.exp(logvar)), T.add(logvar, 1.0))
    return T.scale(T.sum(inner), 0.5 / B)


def recon_loss(recon: Tensor, image) -> Tensor:
    """Mean squared reconstruction error."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=recon.dtype)
    if recon.shape != x.shape:
        raise ShapeError("recon_loss", recon.shape, x.shape)
    return T.mse(recon, x)


@lru_cache(maxsize=8)
def _spatial_exponent(h: int, w: int, sigma_xy: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    e = -d2 / (2.0 * sigma_xy ** 2)
    e.flags.writeable = False
    return e


def gaussian_kernel(image, sigma_xy: float = 5.0, sigma_int: float = 0.1,
                    cap: int = KERNEL_PIXEL_CAP, dtype=np.float64) -> np.ndarray:
    """Dense bilateral kernel over all pixel pairs with a zeroed diagonal.

    ``k[a, b] = exp(-|p_a - p_b|^2 / (2 sigma_xy^2) - |I_a - I_b|^2 / (2 sigma_int^2))``.
    ``image`` is (H, W) or (channels, H, W); intensity distance uses every
    channel. ``sigma_int = inf`` keeps only the spatial factor.
    """
    if sigma_xy <= 0 or sigma_int <= 0:
        raise DomainError("gaussian_kernel: bandwidths must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ShapeError("gaussian_kernel", img.shape, detail="expected (H, W) or (channels, H, W)")
    ch, h, w = img.shape
    n = h * w
    if n > cap:
        raise ResourceError(f"gaussian_kernel: {n} pixels exceeds the cap of {cap}; "
                            f"compute the CRF term on a crop or subsample the image")
    spatial = _spatial_exponent(h, w, float(sigma_xy))
    if np.isfinite(sigma_int):
        feats = img.reshape(ch, n).astype(dtype)
        k = np.zeros((n, n), dtype=dtype)
        for c in range(ch):
            diff = np.subtract.outer(feats[c], feats[c])
            diff *= diff
            k += diff
        k *= np.dtype(dtype).type(-1.0 / (2.0 * sigma_int ** 2))
        k += spatial
    else:
        k = spatial.astype(dtype)
    np.exp(k, out=k)
    np.fill_diagonal(k, 0.0)
    return k


def dense_crf_loss(probs: Tensor, kernels) -> Tensor:
    """Sum over classes of ``y_c^T K (1 - y_c)``, mean over the batch.

    ``kernels`` holds one (n, n) matrix per image, n = H * W.
    """
    B, C, H, W = probs.shape
    if isinstance(kernels, np.ndarray) and kernels.ndim == 2:
        kernels = [kernels]
    if len(kernels) != B:
        raise ShapeError("dense_crf_loss", probs.shape, (len(kernels),), detail="one kernel per image")
    n = H * W
    total = None
    for b, K in enumerate(kernels):
        K = np.asarray(K, dtype=probs.dtype)
        if K.shape != (n, n):
            raise ShapeError("dense_crf_loss", probs.shape, K.shape)
        y = T.reshape(T.getitem(probs, b), (C, n))
        term = T.sum(T.mul(y, T.matmul(T.sub(1.0, y), K.T)))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / B)


def crf_crop_windows(shape, crop: int, rng: np.random.Generator | None):
    """Top-left corners of one ``crop x crop`` window per image (0 = full frame)."""
    B, _, H, W = shape
    if crop <= 0 or (crop >= H and crop >= W):
        return [(0, 0, H, W)] * B
    ch, cw = min(crop, H), min(crop, W)
    if rng is None:
        return [((H - ch) // 2, (W - cw) // 2, ch, cw)] * B
    return [(int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1)), ch, cw) for _ in range(B)]


def crf_term(probs: Tensor, images: np.ndarray, sigma_xy: float, sigma_int: float,
             crop: int = 32, rng: np.random.Generator | None = None) -> Tensor:
    """CRF loss on one window per image (the whole frame when ``crop`` is 0)."""
    windows = crf_crop_windows(probs.shape, crop, rng)
    if all(win == (0, 0) + probs.shape[2:] for win in windows):
        kernels = [gaussian_kernel(img, sigma_xy, sigma_int, dtype=probs.dtype) for img in images]
        return dense_crf_loss(probs, kernels)
    total = None
    for b, (top, left, h, w) in enumerate(windows):
        patch = T.getitem(probs, (slice(b, b + 1), slice(None), slice(top, top + h), slice(left, left + w)))
        K = gaussian_kernel(np.asarray(images[b])[..., top:top + h, left:left + w], sigma_xy, sigma_int,
                            dtype=probs.dtype)
        term = dense_crf_loss(patch, [K])
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(windows))


def elbo_objective(probs: Tensor, scribbles, q: LatentGaussian, recon: Tensor, image,
                   kernels_or_crf, weights: LossWeights = LossWeights(), normalize_pce: bool = False):
    """Weighted stage-1 objective ``pce + a*kl + b*recon + g*crf``.

    ``kernels_or_crf`` is a precomputed CRF loss Tensor, the kernel list
    handed to :func:`dense_crf_loss`, or None to leave the CRF term out. Returns ``(total, components)``
    where components maps term name to float.
    """
    l_pce = pce_loss(probs, scribbles, normalize=normalize_pce)
    l_kl = kl_loss(q)
    l_rec = recon_loss(recon, image)
    if kernels_or_crf is None:
        l_crf = Tensor(0.0, dtype=probs.dtype)
    elif isinstance(kernels_or_crf, Tensor):
        l_crf = kernels_or_crf
    else:
        l_crf = dense_crf_loss(probs, kernels_or_crf)
    total = l_pce
    for w, term in ((weights.alpha, l_kl), (weights.beta, l_rec), (weights.gamma, l_crf)):
        if w != 0.0:
            total = T.add(total, T.scale(term, w))
    parts = {"pce": l_pce.item(), "kl": l_kl.item(), "recon": l_rec.item(), "crf": l_crf.item(),
             "total": total.item()}
    return total, parts


def ce_loss(probs: Tensor, labels) -> Tensor:
    """Mean over all pixels of ``-log p[true class]``; labels must be dense."""
    lab = _labels_batch(labels, probs)
    if np.any(lab == UNLABELED):
        raise ContractError("ce_loss: unlabeled pixels present; stage-2 labels must be dense")
    C = probs.shape[1]
    if np.any(lab >= C):
        raise DomainError(f"ce_loss: class id >= {C}")
    n = lab.size
    return T.scale(T.sum(T.mul(T.log(probs), one_hot(lab, C, probs.dtype))), -1.0 / n)
