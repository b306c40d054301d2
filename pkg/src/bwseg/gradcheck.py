"""Finite-difference checks for every training loss and a full stage-1 pass.

Each case builds a small seeded instance (batch <= 2, 8x8 frames, latent
dim <= 8) in 64-bit floats, back-propagates once and compares the analytic
gradient with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .networks import Generator, LatentGaussian, SegUNet, UNetConfig
from .tensor import Tape, Tensor
from .weak_labels import UNLABELED

TOLERANCE = 1e-5
EPS = 1e-6


@dataclass
class GradcheckRow:
    case: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _analytic(fn, leaves):
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        out = fn()
        T.backward(tape, out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]


def _numeric(fn, tensor: Tensor, coords=None, eps: float = EPS):
    """Central differences of ``fn()`` w.r.t. chosen flat coordinates of ``tensor``."""
    base = tensor.data.copy()
    coords = range(base.size) if coords is None else coords
    out = []
    for i in coords:
        vals = []
        for step in (eps, -eps):
            arr = base.copy()
            arr.reshape(-1)[i] += step
            tensor.data = arr
            vals.append(fn().item())
        out.append((vals[0] - vals[1]) / (2 * eps))
    tensor.data = base
    return np.array(out)


def _check(fn, leaves, coords=None) -> float:
    grads = _analytic(fn, leaves)
    a, n = [], []
    for k, (t, g) in enumerate(zip(leaves, grads)):
        c = None if coords is None else coords[k]
        a.append(g.reshape(-1) if c is None else g.reshape(-1)[c])
        n.append(_numeric(fn, t, c))
    return T.relative_error(np.concatenate(a), np.concatenate(n))


def _leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _scribbles(rng, B, C, H, W, frac=0.4):
    lab = rng.integers(0, C, size=(B, H, W)).astype(np.uint8)
    lab[rng.random((B, H, W)) > frac] = UNLABELED
    lab[:, 0, 0] = 0  # at least one scribble per image
    return lab


def _dims(rng):
    return int(rng.integers(1, 3)), int(rng.integers(2, 6)), 8, 8


def case_pce(rng):
    B, C, H, W = _dims(rng)
    logits = _leaf(rng, B, C, H, W)
    scr = _scribbles(rng, B, C, H, W)
    normalize = bool(rng.integers(2))
    return _check(lambda: L.pce_loss(T.softmax(logits), scr, normalize=normalize), [logits])


def case_kl(rng):
    B, d = int(rng.integers(1, 3)), int(rng.integers(1, 9))
    mu, lv = _leaf(rng, B, d), _leaf(rng, B, d, scale=0.5)
    return _check(lambda: L.kl_loss(LatentGaussian(mu, lv)), [mu, lv])


def case_mse(rng):
    B, _, H, W = _dims(rng)
    recon = _leaf(rng, B, 1, H, W)
    image = rng.random((B, 1, H, W))
    return _check(lambda: L.recon_loss(recon, image), [recon])


def case_crf(rng):
    B, C, H, W = _dims(rng)
    logits = _leaf(rng, B, C, H, W)
    kernels = [L.gaussian_kernel(rng.random((H, W)), sigma_xy=3.0, sigma_int=0.3) for _ in range(B)]
    return _check(lambda: L.dense_crf_loss(T.softmax(logits), kernels), [logits])


def case_ce(rng):
    B, C, H, W = _dims(rng)
    logits = _leaf(rng, B, C, H, W)
    lab = rng.integers(0, C, size=(B, H, W)).astype(np.uint8)
    return _check(lambda: L.ce_loss(T.softmax(logits), lab), [logits])


def case_elbo(rng):
    B, C, H, W = _dims(rng)
    d = int(rng.integers(1, 9))
    logits, recon = _leaf(rng, B, C, H, W), _leaf(rng, B, 1, H, W)
    mu, lv = _leaf(rng, B, d), _leaf(rng, B, d, scale=0.5)
    image = rng.random((B, 1, H, W))
    scr = _scribbles(rng, B, C, H, W)
    kernels = [L.gaussian_kernel(image[b, 0], 3.0, 0.3) for b in range(B)]
    w = L.LossWeights(alpha=rng.uniform(0.1, 1), beta=rng.uniform(0.1, 1), gamma=rng.uniform(0.01, 0.1))

    def fn():
        return L.elbo_objective(T.softmax(logits), scr, LatentGaussian(mu, lv), recon, image, kernels, w)[0]

    return _check(fn, [logits, recon, mu, lv])


def _jitter_params(net, rng, scale=0.1):
    # move off the zero-initialised heads so every path carries gradient
    for p in net.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def _coords(rng, tensors, per_tensor=4):
    return [rng.choice(t.size, size=min(per_tensor, t.size), replace=False) for t in tensors]


def kink_margin(fn) -> float:
    """Smallest distance of any ReLU input or max-pool runner-up to a switch point.

    Central differences are only meaningful when no perturbation of size EPS
    crosses a kink, so network instances closer than ``10 * EPS`` are redrawn.
    """
    margin = np.inf
    with Tape() as tape:
        fn()
    for rec in tape.records:
        a = rec.operands[0].data
        if rec.kind == "relu":
            margin = min(margin, float(np.min(np.abs(a))))
        elif rec.kind == "max_pool2d":
            B, C, H, W = a.shape
            win = np.sort(a.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                          .reshape(-1, 4), axis=1)
            # all-zero windows sit behind dead ReLUs, already checked above
            live = win[:, 3] > 0
            if live.any():
                margin = min(margin, float(np.min(win[live, 3] - win[live, 2])))
    return margin


def _smooth_instance(build, rng, tries: int = 50):
    for _ in range(tries):
        fn, leaves = build(rng)
        if kink_margin(fn) > 10 * EPS:
            return fn, leaves
    raise RuntimeError("gradcheck: no kink-free instance found")


def case_stage1(rng):
    """Whole generator forward plus the four-term objective, w.r.t. every parameter tensor."""

    def build(rng):
        B, C, H, W = _dims(rng)
        d = int(rng.integers(2, 9))
        gen = Generator(UNetConfig(n_classes=C, base_width=4, depth=2, dropout=0.0), d, (H, W), rng=rng)
        _jitter_params(gen, rng)
        x = rng.random((B, 1, H, W))
        eps = rng.standard_normal((B, d))
        scr = _scribbles(rng, B, C, H, W)
        w = L.LossWeights(alpha=0.5, beta=0.5, gamma=0.05)

        def fn():
            q, _, recon, probs = gen(x, None, eps=eps)
            crf = L.crf_term(probs, x, 3.0, 0.3, crop=0)
            return L.elbo_objective(probs, scr, q, recon, x, crf, w)[0]

        return fn, gen.parameters()

    fn, leaves = _smooth_instance(build, rng)
    return _check(fn, leaves, _coords(rng, leaves))


def case_segnet(rng):
    """U-Net with a fixed dropout mask under cross-entropy."""

    def build(rng):
        B, C, H, W = _dims(rng)
        net = SegUNet(UNetConfig(n_classes=C, base_width=4, depth=2, dropout=0.2), rng=rng)
        _jitter_params(net, rng)
        x = rng.random((B, 1, H, W))
        lab = rng.integers(0, C, size=(B, H, W)).astype(np.uint8)
        seed = int(rng.integers(2 ** 31))

        def fn():
            return L.ce_loss(net(x, dropout_active=True, rng=np.random.default_rng(seed)), lab)

        return fn, net.parameters()

    fn, leaves = _smooth_instance(build, rng)
    return _check(fn, leaves, _coords(rng, leaves))


CASES = {
    "pce": case_pce,
    "kl": case_kl,
    "mse": case_mse,
    "dense_crf": case_crf,
    "ce": case_ce,
    "elbo": case_elbo,
    "stage1_forward": case_stage1,
    "segnet_ce": case_segnet,
}


def run_gradcheck(seed: int = 0, instances: int = 10, cases=None) -> list[GradcheckRow]:
    rows = []
    for name in cases or CASES:
        k = list(CASES).index(name)
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, k, i])
            worst = max(worst, CASES[name](rng))
        rows.append(GradcheckRow(name, instances, worst, time.perf_counter() - t0))
    return rows


def format_table(rows) -> str:
    lines = [f"{'case':<16} {'n':>3} {'max_rel_err':>12}  status"]
    for r in rows:
        lines.append(f"{r.case:<16} {r.instances:>3} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
