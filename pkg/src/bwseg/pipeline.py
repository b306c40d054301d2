"""Two-stage training and MC-dropout inference.

Stage 1 fits the generator on (image, scribble) pairs with the weighted
objective ``pce + alpha*kl + beta*recon + gamma*crf``. Pseudo-labels are the
argmax of d2's probabilities averaged over N latent draws, overwritten by the
scribbles. Stage 2 fits the U-Net on (image, pseudo-label) pairs with
cross-entropy; inference averages T dropout-active passes and reports the
per-pixel entropy of the average.
"""

from __future__ import annotations

import logging
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import metrics as M
from . import tensor as T
from .dataio import write_csv
from .networks import Generator, SegUNet, UNetConfig, sample_z
from .tensor import ContractError, Tape
from .weak_labels import UNLABELED, merge_labels, unlabeled_mask

log = logging.getLogger(__name__)

STAGE1_LOG_HEADER = ("step", "L_pce", "L_kl", "L_recon", "L_crf", "total")
STAGE2_LOG_HEADER = ("step", "L_ce")


class NumericError(RuntimeError):
    """Non-finite training loss."""

    def __init__(self, stage: str, step: int, parts: dict):
        shown = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        super().__init__(f"{stage}: non-finite loss at step {step} ({shown})")
        self.step = step
        self.parts = parts


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    epochs_seg: int | None = None
    batch: int = 8
    alpha: float = 1e-3
    beta: float = 1e-1
    gamma: float = 1e-8
    n_samples: int = 3
    t_infer: int = 15
    latent_dim: int = 16
    dropout: float = 0.1
    seed: int = 0
    sigma_xy: float = 5.0
    sigma_int: float = 0.1
    crf_crop: int = 32
    optimizer: str = "adam"
    prior_z: bool = False
    normalize_pce: bool = False
    n_classes: int = 4
    base_width: int = 8
    depth: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_samples < 1 or self.t_infer < 1:
            raise ValueError("n_samples and t_infer must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or (self.epochs_seg is not None and self.epochs_seg < 1):
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        self.weights  # validates alpha/beta/gamma

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def seg_epochs(self) -> int:
        return self.epochs if self.epochs_seg is None else self.epochs_seg

    def unet(self, dropout: float | None = None) -> UNetConfig:
        return UNetConfig(in_channels=1, n_classes=self.n_classes, base_width=self.base_width,
                          depth=self.depth, dropout=self.dropout if dropout is None else dropout)

    def as_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, tag: str) -> np.random.Generator:
    """Independent, reproducible generator per (seed, purpose)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(tag.encode())])))


# ---------------------------------------------------------------- optimizers


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - self.lr * upd).astype(p.dtype)


class SGD:
    """Momentum SGD with L2 weight decay and polynomial (power 0.9) decay."""

    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9, total_steps=1, power=0.9):
        self.params = list(params)
        self.lr, self.weight_decay, self.momentum = lr, weight_decay, momentum
        self.total, self.power, self.t = max(total_steps, 1), power, 0
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        lr = self.lr * (1 - min(self.t, self.total - 1) / self.total) ** self.power
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.buf[i] = self.momentum * self.buf[i] + g
            p.data = (p.data - lr * self.buf[i]).astype(p.dtype)


def make_optimizer(params, cfg: TrainConfig, total_steps: int):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.weight_decay, total_steps=total_steps)
    return Adam(params, cfg.lr, cfg.weight_decay)


# ---------------------------------------------------------------- batching


def stack_images(images, depth: int, dtype=np.float64):
    """(N, 1, H', W') array zero-padded so H', W' are multiples of 2**depth."""
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    H = max(a.shape[-2] for a in arrs)
    W = max(a.shape[-1] for a in arrs)
    step = 2 ** depth
    Hp, Wp = -(-H // step) * step, -(-W // step) * step
    out = np.zeros((len(arrs), 1, Hp, Wp), dtype=dtype)
    for i, a in enumerate(arrs):
        out[i, 0, :a.shape[-2], :a.shape[-1]] = a.reshape(a.shape[-2:])
    return out


def stack_labels(labels, shape, fill=UNLABELED):
    out = np.full((len(labels),) + tuple(shape), fill, dtype=np.uint8)
    for i, a in enumerate(labels):
        a = np.asarray(a)
        out[i, :a.shape[0], :a.shape[1]] = a
    return out


def _batches(n: int, batch: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for b0 in range(0, n, batch):
        yield order[b0:b0 + batch]


# ---------------------------------------------------------------- stage 1


def train_stage1(images, scribbles, cfg: TrainConfig, log_path=None, gen: Generator | None = None,
                 progress=None) -> tuple[Generator, list[tuple]]:
    """Fit the generator; returns it with the per-step loss log."""
    if len(images) == 0:
        raise ValueError("train_stage1: empty dataset")
    dtype = np.dtype(cfg.dtype)
    X = stack_images(images, cfg.depth, dtype)
    S = stack_labels(scribbles, X.shape[2:])
    if gen is None:
        gen = Generator(cfg.unet(dropout=0.0), cfg.latent_dim, image_shape=X.shape[2:],
                        rng=stream(cfg.seed, "gen-init"), dtype=dtype)
    steps_per_epoch = -(-len(X) // cfg.batch)
    opt = make_optimizer(gen.parameters(), cfg, cfg.epochs * steps_per_epoch)
    order_rng, noise_rng, crop_rng = (stream(cfg.seed, t) for t in ("gen-order", "gen-noise", "gen-crop"))
    weights = cfg.weights
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(X), cfg.batch, order_rng):
            xb, sb = X[idx], S[idx]
            gen.zero_grad()
            with Tape() as tape:
                q, _, recon, probs = gen(xb, noise_rng)
                crf = None
                if weights.gamma > 0:
                    crf = L.crf_term(probs, xb, cfg.sigma_xy, cfg.sigma_int, cfg.crf_crop, crop_rng)
                total, parts = L.elbo_objective(probs, sb, q, recon, xb, crf, weights, cfg.normalize_pce)
                if not all(np.isfinite(v) for v in parts.values()):
                    raise NumericError("stage 1", step, parts)
                T.backward(tape, total)
            opt.step()
            rows.append((step, parts["pce"], parts["kl"], parts["recon"], parts["crf"], parts["total"]))
            step += 1
        if progress:
            progress("stage1", epoch, rows[-steps_per_epoch:])
    if log_path is not None:
        write_csv(log_path, STAGE1_LOG_HEADER, rows)
    return gen, rows


def generate_pseudo_labels(gen: Generator, images, scribbles, n_samples: int, rng: np.random.Generator,
                           prior_z: bool = False, batch: int = 16) -> list[np.ndarray]:
    """Argmax of the mean of N d2 probability maps, merged under the scribbles."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    X = stack_images(images, gen.cfg.depth, gen.dtype)
    out = []
    for b0 in range(0, len(X), batch):
        xb = X[b0:b0 + batch]
        q = gen.encode_e1(xb)
        feats = gen.encode_e2(xb)
        acc = np.zeros((xb.shape[0], gen.cfg.n_classes) + xb.shape[2:])
        for _ in range(n_samples):
            acc += gen.decode_d2(feats, sample_z(q, rng, prior=prior_z)).data
        pseudo = (acc / n_samples).argmax(axis=1).astype(np.uint8)
        for k in range(xb.shape[0]):
            scr = np.asarray(scribbles[b0 + k])
            h, w = scr.shape
            p = pseudo[k, :h, :w]
            out.append(merge_labels(scr, p, unlabeled_mask(scr)))
    return out


# ---------------------------------------------------------------- stage 2


def train_segmenter(images, labels, cfg: TrainConfig, loss: str = "ce", log_path=None,
                    tag: str = "seg", progress=None) -> tuple[SegUNet, list[tuple]]:
    """Fit the dropout U-Net with dense CE (``loss='ce'``) or scribble pCE (``'pce'``)."""
    if len(images) == 0:
        raise ValueError("train_segmenter: empty dataset")
    if loss not in ("ce", "pce"):
        raise ValueError(f"unknown loss {loss!r}")
    dtype = np.dtype(cfg.dtype)
    X = stack_images(images, cfg.depth, dtype)
    Y = stack_labels(labels, X.shape[2:])
    if loss == "ce" and np.any(Y == UNLABELED):
        if X.shape[2:] != np.asarray(labels[0]).shape:
            raise ContractError("train_segmenter: images need padding; pass extents divisible by 2**depth")
        raise ContractError("train_segmenter: CE training needs dense labels")
    net = SegUNet(cfg.unet(), rng=stream(cfg.seed, f"{tag}-init"), dtype=dtype)
    epochs = cfg.seg_epochs
    steps_per_epoch = -(-len(X) // cfg.batch)
    opt = make_optimizer(net.parameters(), cfg, epochs * steps_per_epoch)
    order_rng, drop_rng = stream(cfg.seed, f"{tag}-order"), stream(cfg.seed, f"{tag}-dropout")
    rows = []
    step = 0
    for epoch in range(epochs):
        for idx in _batches(len(X), cfg.batch, order_rng):
            net.zero_grad()
            with Tape() as tape:
                probs = net(X[idx], dropout_active=True, rng=drop_rng)
                if loss == "ce":
                    value = L.ce_loss(probs, Y[idx])
                else:
                    value = L.pce_loss(probs, Y[idx], normalize=cfg.normalize_pce)
                v = value.item()
                if not np.isfinite(v):
                    raise NumericError("stage 2", step, {"L_" + loss: v})
                T.backward(tape, value)
            opt.step()
            rows.append((step, v))
            step += 1
        if progress:
            progress(tag, epoch, rows[-steps_per_epoch:])
    if log_path is not None:
        write_csv(log_path, ("step", "L_" + loss), rows)
    return net, rows


def train_stage2(images, labels, cfg: TrainConfig, log_path=None, progress=None):
    return train_segmenter(images, labels, cfg, loss="ce", log_path=log_path, tag="seg", progress=progress)


# ---------------------------------------------------------------- inference


def assert_simplex(probs: np.ndarray, tol: float | None = None) -> None:
    if tol is None:
        tol = 1e-9 if probs.dtype == np.float64 else 1e-5
    if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > tol:
        raise ContractError("probability map left the simplex")


def entropy(probs: np.ndarray) -> np.ndarray:
    """Per-pixel entropy (nats) over the channel axis, clipped to [0, ln C]."""
    p = np.asarray(probs, dtype=np.float64)
    h = -(p * np.log(np.maximum(p, T.LOG_FLOOR))).sum(axis=1)
    return np.clip(h, 0.0, np.log(p.shape[1]))


def seg_forward(net: SegUNet, images, dropout_active: bool = False, rng=None, batch: int = 16) -> np.ndarray:
    X = images if isinstance(images, np.ndarray) and images.ndim == 4 else stack_images(images, net.cfg.depth,
                                                                                           net.dtype)
    outs = [net(X[b0:b0 + batch], dropout_active, rng).data for b0 in range(0, len(X), batch)]
    return np.concatenate(outs, axis=0)


def mc_dropout_infer(net: SegUNet, images, t: int, rng: np.random.Generator, batch: int = 16):
    """Mean of T dropout-active passes and its per-pixel entropy."""
    if t < 1:
        raise ValueError("t must be >= 1")
    X = stack_images(images, net.cfg.depth, net.dtype)
    acc = np.zeros((X.shape[0], net.cfg.n_classes) + X.shape[2:])
    for _ in range(t):
        p = seg_forward(net, X, dropout_active=True, rng=rng, batch=batch)
        assert_simplex(p)
        acc += p
    mean = acc / t
    assert_simplex(mean, 1e-9 if net.dtype == np.float64 else 1e-5)
    return mean, entropy(mean)


def crop_to(maps: np.ndarray, shapes) -> list[np.ndarray]:
    return [m[..., :h, :w] for m, (h, w) in zip(maps, shapes)]


# ---------------------------------------------------------------- evaluation


def evaluate_predictions(preds, gts, n_classes: int, exclude_background: bool = False) -> dict[str, float]:
    per_image = [M.all_rates(p, g, n_classes, exclude_background) for p, g in zip(preds, gts)]
    return M.summarize(per_image)


@dataclass
class PipelineResult:
    generator: Generator
    segmenter: SegUNet
    pseudo_labels: list
    probs: np.ndarray
    uncertainty: np.ndarray
    predictions: list
    single_pass: list
    metrics: dict
    single_pass_metrics: dict
    logs: dict = field(default_factory=dict)


def run_pipeline(train, test, cfg: TrainConfig, progress=None) -> PipelineResult:
    """Stage 1, pseudo-labels, stage 2 and MC-dropout inference end to end.

    ``train`` is a sequence of (image, scribbles); ``test`` of (image, labels).
    """
    t0 = time.perf_counter()
    tr_x = [np.asarray(a) for a, _ in train]
    tr_s = [np.asarray(s) for _, s in train]
    gen, log1 = train_stage1(tr_x, tr_s, cfg, progress=progress)
    pseudo = generate_pseudo_labels(gen, tr_x, tr_s, cfg.n_samples, stream(cfg.seed, "pseudo"), cfg.prior_z)
    seg, log2 = train_stage2(tr_x, pseudo, cfg, progress=progress)
    te_x = [np.asarray(a) for a, _ in test]
    te_y = [np.asarray(y) for _, y in test]
    shapes = [y.shape for y in te_y]
    probs, unc = mc_dropout_infer(seg, te_x, cfg.t_infer, stream(cfg.seed, "infer"))
    preds = crop_to(probs.argmax(axis=1).astype(np.uint8), shapes)
    single = crop_to(seg_forward(seg, te_x).argmax(axis=1).astype(np.uint8), shapes)
    log.info("pipeline finished in %.1fs", time.perf_counter() - t0)
    return PipelineResult(gen, seg, pseudo, probs, unc, preds, single,
                          evaluate_predictions(preds, te_y, cfg.n_classes),
                          evaluate_predictions(single, te_y, cfg.n_classes),
                          {"stage1": log1, "stage2": log2})


# ---------------------------------------------------------------- ablation

LOSS_COMPONENT_ROWS = (("pce",), ("pce", "kl"), ("pce", "kl", "recon"), ("pce", "kl", "recon", "crf"))
N_GRID = (1, 3, 5, 7)
T_GRID = (1, 5, 10, 15, 20)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("BWS_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation(train, test, axis: str, cfg: TrainConfig, grid=None) -> list[dict]:
    """Metrics table along one ablation axis with seeds fixed across cells.

    * ``loss-components``: terms added one at a time, N = 1, T = 1;
    * ``N``: every term on, T = 1;
    * ``T``: every term on, N = ``cfg.n_samples``.
    """
    tr_x = [np.asarray(a) for a, _ in train]
    tr_s = [np.asarray(s) for _, s in train]
    te_x = [np.asarray(a) for a, _ in test]
    te_y = [np.asarray(y) for _, y in test]
    shapes = [y.shape for y in te_y]

    def evaluate(seg, t):
        probs, _ = mc_dropout_infer(seg, te_x, t, stream(cfg.seed, "infer"))
        preds = crop_to(probs.argmax(axis=1).astype(np.uint8), shapes)
        return evaluate_predictions(preds, te_y, cfg.n_classes)

    def cell_from_generator(gen, n, t):
        pseudo = generate_pseudo_labels(gen, tr_x, tr_s, n, stream(cfg.seed, "pseudo"), cfg.prior_z)
        seg, _ = train_stage2(tr_x, pseudo, cfg)
        return seg, evaluate(seg, t)

    if axis == "loss-components":
        grid = grid or LOSS_COMPONENT_ROWS

        def cell(terms):
            c = replace(cfg, alpha=cfg.alpha if "kl" in terms else 0.0,
                        beta=cfg.beta if "recon" in terms else 0.0,
                        gamma=cfg.gamma if "crf" in terms else 0.0)
            gen, _ = train_stage1(tr_x, tr_s, c)
            return {"axis": axis, "setting": "+".join(terms), "N": 1, "T": 1,
                    **cell_from_generator(gen, 1, 1)[1]}

        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            return list(pool.map(cell, grid))

    if axis not in ("N", "T"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    gen, _ = train_stage1(tr_x, tr_s, cfg)
    if axis == "N":
        grid = grid or N_GRID

        def ncell(n):
            return {"axis": axis, "setting": str(n), "N": n, "T": 1, **cell_from_generator(gen, n, 1)[1]}

        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            return list(pool.map(ncell, grid))
    grid = grid or T_GRID
    seg, _ = cell_from_generator(gen, cfg.n_samples, 1)
    return [{"axis": axis, "setting": str(t), "N": cfg.n_samples, "T": t, **evaluate(seg, t)} for t in grid]
