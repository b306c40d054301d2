"""Scribble simulation from dense labels, and the scribble/pseudo-label merge."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .tensor import ContractError, DomainError

UNLABELED = 255

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _neighbours(img: np.ndarray):
    """P2..P9 planes (clockwise from north) of a zero-padded binary image."""
    p = np.pad(img, 1).astype(np.uint8)
    return (p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
            p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2])


def _deletable(img: np.ndarray, first: bool) -> np.ndarray:
    P2, P3, P4, P5, P6, P7, P8, P9 = nb = _neighbours(img)
    count = sum(n.astype(np.int32) for n in nb)
    seq = nb + (P2,)
    transitions = sum(((seq[k] == 0) & (seq[k + 1] == 1)).astype(np.int32) for k in range(8))
    cond = img & (count >= 2) & (count <= 6) & (transitions == 1)
    if first:
        cond &= (P2 & P4 & P6) == 0
        cond &= (P4 & P6 & P8) == 0
    else:
        cond &= (P2 & P4 & P8) == 0
        cond &= (P2 & P6 & P8) == 0
    return cond


def _spare_last_pixels(img: np.ndarray, kill: np.ndarray) -> np.ndarray:
    """Drop from ``kill`` one pixel of every component it would erase entirely.

    Plain Zhang-Suen deletes a 2x2 block in a single subiteration, which makes
    round blobs vanish. The spared pixel is the one nearest the component's
    centroid (first in raster order on ties).
    """
    comps, n = ndimage.label(img, structure=EIGHT_CONNECTED)
    survivors = np.bincount(comps[img & ~kill], minlength=n + 1)
    doomed = np.nonzero(survivors[1:] == 0)[0] + 1
    if doomed.size == 0:
        return kill
    kill = kill.copy()
    for k in doomed:
        rows, cols = np.nonzero(comps == k)
        d2 = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
        i = int(np.argmin(d2))
        kill[rows[i], cols[i]] = False
    return kill


def skeletonize(mask: np.ndarray, max_iter: int = 10_000) -> np.ndarray:
    """Zhang-Suen thinning iterated until a full pass removes nothing.

    Pixels outside the frame count as background. A component is never thinned
    away completely; see ``_spare_last_pixels``.
    """
    img = np.asarray(mask).astype(bool)
    if img.ndim != 2:
        raise ValueError(f"skeletonize expects a 2-D mask, got shape {img.shape}")
    img = img.copy()
    for _ in range(max_iter):
        changed = False
        for first in (True, False):
            kill = _deletable(img, first)
            if kill.any():
                kill = _spare_last_pixels(img, kill)
            if kill.any():
                img &= ~kill
                changed = True
        if not changed:
            return img
    raise RuntimeError("skeletonize did not converge")


def count_components(mask: np.ndarray) -> int:
    return int(ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)[1])


def simulate_scribbles(y: np.ndarray, n_classes: int, rng: np.random.Generator | None = None,
                       jitter: bool = False) -> np.ndarray:
    """Skeleton of each 8-connected component of every class mask.

    Returns a uint8 map holding the class id on skeleton pixels and
    ``UNLABELED`` elsewhere. ``jitter`` moves each scribble pixel one random
    step, kept only when the target pixel has the same class in ``y``.
    """
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DomainError(f"label values must lie in [0, {n_classes})")
    out = np.full(y.shape, UNLABELED, dtype=np.uint8)
    for c in range(n_classes):
        comps, n = ndimage.label(y == c, structure=EIGHT_CONNECTED)
        for k in range(1, n + 1):
            out[skeletonize(comps == k)] = c
    if jitter:
        if rng is None:
            raise ValueError("jitter requires an rng")
        out = _jitter(out, y, rng)
    return out


def _jitter(scr: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    H, W = scr.shape
    rows, cols = np.nonzero(scr != UNLABELED)
    steps = rng.integers(-1, 2, size=(rows.size, 2))
    r = np.clip(rows + steps[:, 0], 0, H - 1)
    c = np.clip(cols + steps[:, 1], 0, W - 1)
    same = y[r, c] == y[rows, cols]
    r = np.where(same, r, rows)
    c = np.where(same, c, cols)
    out = np.full_like(scr, UNLABELED)
    out[r, c] = y[r, c]
    return out


def unlabeled_mask(scribbles: np.ndarray) -> np.ndarray:
    """Binary mask: 0 where a scribble exists, 1 where the pixel is unlabeled."""
    return (np.asarray(scribbles) == UNLABELED).astype(np.uint8)


def merge_labels(scribbles: np.ndarray, pseudo: np.ndarray, gamma: np.ndarray | None = None) -> np.ndarray:
    """``(1 - gamma) * scribbles + gamma * pseudo``; scribbles always win."""
    scribbles = np.asarray(scribbles)
    pseudo = np.asarray(pseudo)
    if gamma is None:
        gamma = unlabeled_mask(scribbles)
    gamma = np.asarray(gamma)
    if not (scribbles.shape == pseudo.shape == gamma.shape):
        raise ContractError(f"merge_labels: shapes differ {scribbles.shape}, {pseudo.shape}, {gamma.shape}")
    if not np.array_equal(gamma.astype(bool), scribbles == UNLABELED):
        raise ContractError("merge_labels: mask is inconsistent with the scribble map")
    if np.any(pseudo[gamma.astype(bool)] == UNLABELED):
        raise ContractError("merge_labels: pseudo-labels must be dense")
    g = gamma.astype(np.int64)
    merged = (1 - g) * np.where(g == 1, 0, scribbles).astype(np.int64) + g * pseudo.astype(np.int64)
    return merged.astype(np.uint8)
