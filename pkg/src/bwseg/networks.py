"""Toy-scale networks: the U-Net backbone and the CVAE-style generator.

The generator holds four sub-networks sharing one parameter table:

* ``e1`` maps an image to a diagonal Gaussian over the latent code z,
* ``d1`` reconstructs the image from z,
* ``e2`` encodes the image into U-Net features,
* ``d2`` decodes those features, with z broadcast over the bottleneck, into
  per-pixel class probabilities.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataio import atomic_write_bytes
from .tensor import Tensor, ShapeError

LOGVAR_FLOOR = -20.0
LOGVAR_CEIL = 20.0

# images live in [0, 1]; the first convolution sees them centred and scaled
INPUT_CENTER = 0.5
INPUT_SCALE = 4.0
E1_SQUEEZE = 4  # channels kept before flattening in e1

CKPT_MAGIC = b"BWSCKPT\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    n_classes: int = 4
    base_width: int = 8
    depth: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def width(self, level: int) -> int:
        return self.base_width * 2 ** level

    def check_input(self, x: np.ndarray | Tensor) -> None:
        shape = x.shape
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeError("network input", shape, detail=f"expected (B, {self.in_channels}, H, W)")
        step = 2 ** self.depth
        if shape[2] % step or shape[3] % step:
            raise ShapeError("network input", shape, detail=f"H and W must be divisible by {step}")


@dataclass
class LatentGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError("LatentGaussian", self.mean.shape, self.logvar.shape)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.data)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data, dtype=dtype)
    return Tensor(np.asarray(x), dtype=dtype)


def _normalized(x, dtype) -> Tensor:
    return T.scale(T.sub(_as_input(x, dtype), INPUT_CENTER), INPUT_SCALE)


class _Network:
    """Named parameter table plus init helpers shared by both networks."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, dtype=self.dtype, name=name)

    def _conv(self, rng, name, cin, cout, k=3, zero=False):
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        self._add(name + "_w", w)
        self._add(name + "_b", np.zeros(cout))

    def _linear(self, rng, name, fan_in, fan_out, std=None, zero=False):
        if zero:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) * (std if std is not None else np.sqrt(2.0 / fan_in))
        self._add(name + "_w", w)
        self._add(name + "_b", np.zeros(fan_out))

    def conv(self, name: str, x: Tensor, act: bool = True) -> Tensor:
        y = T.conv2d(x, self.params[name + "_w"], self.params[name + "_b"])
        return T.relu(y) if act else y

    def dense(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self.params[name + "_w"], self.params[name + "_b"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, np.array(v.data)) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        if list(state) != list(self.params):
            raise ValueError("parameter names do not match this network")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError("load_state_dict", self.params[k].shape, v.shape, detail=k)
            self.params[k] = Tensor(v, requires_grad=True, dtype=self.dtype, name=k)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class SegUNet(_Network):
    """U-Net backbone with dropout after every decoder block."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__(dtype)
        self.cfg = cfg
        rng = rng if rng is not None else T.make_rng(0)
        cin = cfg.in_channels
        for lvl in range(cfg.depth):
            self._conv(rng, f"enc{lvl}_conv1", cin, cfg.width(lvl))
            self._conv(rng, f"enc{lvl}_conv2", cfg.width(lvl), cfg.width(lvl))
            cin = cfg.width(lvl)
        cb = cfg.width(cfg.depth)
        self._conv(rng, "mid_conv1", cin, cb)
        self._conv(rng, "mid_conv2", cb, cb)
        cin = cb
        for lvl in reversed(range(cfg.depth)):
            self._conv(rng, f"dec{lvl}_conv1", cin + cfg.width(lvl), cfg.width(lvl))
            self._conv(rng, f"dec{lvl}_conv2", cfg.width(lvl), cfg.width(lvl))
            cin = cfg.width(lvl)
        self._conv(rng, "head", cin, cfg.n_classes, k=1, zero=True)

    def logits(self, x, dropout_active: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        self.cfg.check_input(x)
        if dropout_active and self.cfg.dropout > 0 and rng is None:
            raise ValueError("dropout_active requires an rng")
        h = _normalized(x, self.dtype)
        skips = []
        for lvl in range(self.cfg.depth):
            h = self.conv(f"enc{lvl}_conv2", self.conv(f"enc{lvl}_conv1", h))
            skips.append(h)
            h = T.max_pool2d(h)
        h = self.conv("mid_conv2", self.conv("mid_conv1", h))
        keep = 1.0 - self.cfg.dropout
        for lvl in reversed(range(self.cfg.depth)):
            h = T.concat([T.upsample2d(h), skips[lvl]], axis=1)
            h = self.conv(f"dec{lvl}_conv2", self.conv(f"dec{lvl}_conv1", h))
            if dropout_active and self.cfg.dropout > 0:
                h = T.dropout(h, rng.random(h.shape) < keep, keep)
        return self.conv("head", h, act=False)

    def forward(self, x, dropout_active: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return T.softmax(self.logits(x, dropout_active, rng), axis=1)

    __call__ = forward

    @classmethod
    def from_state(cls, state, dropout: float = 0.1, dtype=np.float64) -> SegUNet:
        depth = sum(1 for k in state if k.startswith("enc") and k.endswith("_conv1_w"))
        first = state["enc0_conv1_w"]
        cfg = UNetConfig(in_channels=first.shape[1], n_classes=state["head_w"].shape[0],
                         base_width=first.shape[0], depth=depth, dropout=dropout)
        net = cls(cfg, dtype=dtype)
        net.load_state_dict(state)
        return net


class Generator(_Network):
    """Joint image/label generator: e1 -> z -> d1 for x, (e2, z) -> d2 for y."""

    def __init__(self, cfg: UNetConfig, latent_dim: int = 16, image_shape: tuple[int, int] = (64, 64),
                 rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__(dtype)
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.cfg = cfg
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        rng = rng if rng is not None else T.make_rng(0)
        d = latent_dim
        cb = cfg.width(cfg.depth)

        # e1: one conv per level, 1x1 squeeze, flatten, Gaussian heads. Flattening
        # (rather than pooling) keeps the layout of the image in the code.
        cin = cfg.in_channels
        for lvl in range(cfg.depth):
            self._conv(rng, f"e1_enc{lvl}", cin, cfg.width(lvl))
            cin = cfg.width(lvl)
        self._conv(rng, "e1_mid", cin, cb)
        self._conv(rng, "e1_squeeze", cb, E1_SQUEEZE, k=1)
        flat = E1_SQUEEZE * self._plane_cells()
        self._linear(rng, "e1_mu", flat, d, std=0.1 / np.sqrt(flat))
        self._linear(rng, "e1_logvar", flat, d, zero=True)

        # d1: z -> bottleneck plane via a dense map, then upsampling convs
        self._plane_channels = cb
        self._linear(rng, "d1_fc", d, cb * self._plane_cells(), std=1.0 / np.sqrt(d))
        self._conv(rng, "d1_mid", cb, cb)
        cin = cb
        for lvl in reversed(range(cfg.depth)):
            self._conv(rng, f"d1_dec{lvl}", cin, cfg.width(lvl))
            cin = cfg.width(lvl)
        self._conv(rng, "d1_out", cin, cfg.in_channels, k=1)

        # e2: U-Net encoder
        cin = cfg.in_channels
        for lvl in range(cfg.depth):
            self._conv(rng, f"e2_enc{lvl}_conv1", cin, cfg.width(lvl))
            self._conv(rng, f"e2_enc{lvl}_conv2", cfg.width(lvl), cfg.width(lvl))
            cin = cfg.width(lvl)
        self._conv(rng, "e2_mid_conv1", cin, cb)
        self._conv(rng, "e2_mid_conv2", cb, cb)

        # d2: fuse [features, z], then U-Net decoder with e2 skips
        self._conv(rng, "d2_fuse", cb + d, cb)
        cin = cb
        for lvl in reversed(range(cfg.depth)):
            self._conv(rng, f"d2_dec{lvl}_conv1", cin + cfg.width(lvl), cfg.width(lvl))
            self._conv(rng, f"d2_dec{lvl}_conv2", cfg.width(lvl), cfg.width(lvl))
            cin = cfg.width(lvl)
        self._conv(rng, "d2_head", cin, cfg.n_classes, k=1, zero=True)

    def _plane_cells(self) -> int:
        step = 2 ** self.cfg.depth
        return (self.image_shape[0] // step) * (self.image_shape[1] // step)

    # -- e1 / sampling / d1

    def encode_e1(self, x) -> LatentGaussian:
        self.cfg.check_input(x)
        h = _normalized(x, self.dtype)
        for lvl in range(self.cfg.depth):
            h = T.max_pool2d(self.conv(f"e1_enc{lvl}", h))
        h = self.conv("e1_squeeze", self.conv("e1_mid", h))
        if h.shape[2] * h.shape[3] != self._plane_cells():
            raise ShapeError("encode_e1", x.shape, detail=f"generator built for {self.image_shape}")
        h = T.reshape(h, (h.shape[0], -1))
        return LatentGaussian(self.dense("e1_mu", h), self.dense("e1_logvar", h))

    def decode_d1(self, z: Tensor, spatial: tuple[int, int]) -> Tensor:
        """Reconstruct an image of extent ``spatial`` from latent codes (B, d)."""
        if z.data.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError("decode_d1", z.shape, detail=f"expected (B, {self.latent_dim})")
        step = 2 ** self.cfg.depth
        h, w = spatial[0] // step, spatial[1] // step
        B, cb = z.shape[0], self._plane_channels
        if h * w != self._plane_cells():
            raise ShapeError("decode_d1", (h, w), detail=f"generator built for {self.image_shape}")
        plane = T.relu(T.reshape(self.dense("d1_fc", z), (B, cb, h, w)))
        hdn = self.conv("d1_mid", plane)
        for lvl in reversed(range(self.cfg.depth)):
            hdn = self.conv(f"d1_dec{lvl}", T.upsample2d(hdn))
        return self.conv("d1_out", hdn, act=False)

    # -- e2 / d2

    def encode_e2(self, x) -> tuple[Tensor, list[Tensor]]:
        self.cfg.check_input(x)
        h = _normalized(x, self.dtype)
        skips = []
        for lvl in range(self.cfg.depth):
            h = self.conv(f"e2_enc{lvl}_conv2", self.conv(f"e2_enc{lvl}_conv1", h))
            skips.append(h)
            h = T.max_pool2d(h)
        return self.conv("e2_mid_conv2", self.conv("e2_mid_conv1", h)), skips

    def decode_d2(self, features: tuple[Tensor, list[Tensor]], z: Tensor) -> Tensor:
        bottleneck, skips = features
        B, _, h, w = bottleneck.shape
        if z.data.ndim != 2 or z.shape != (B, self.latent_dim):
            raise ShapeError("decode_d2", bottleneck.shape, z.shape)
        zplane = T.broadcast_to(T.reshape(z, (B, self.latent_dim, 1, 1)), (B, self.latent_dim, h, w))
        hdn = self.conv("d2_fuse", T.concat([bottleneck, zplane], axis=1))
        for lvl in reversed(range(self.cfg.depth)):
            hdn = T.concat([T.upsample2d(hdn), skips[lvl]], axis=1)
            hdn = self.conv(f"d2_dec{lvl}_conv2", self.conv(f"d2_dec{lvl}_conv1", hdn))
        return T.softmax(self.conv("d2_head", hdn, act=False), axis=1)

    def forward(self, x, rng: np.random.Generator, eps: np.ndarray | None = None):
        """Full stage-1 pass: returns (q, z, reconstruction, probabilities)."""
        x = _as_input(x, self.dtype)
        q = self.encode_e1(x)
        z = sample_z(q, rng, eps=eps)
        recon = self.decode_d1(z, x.shape[2:])
        probs = self.decode_d2(self.encode_e2(x), z)
        return q, z, recon, probs

    __call__ = forward

    @classmethod
    def from_state(cls, state, image_shape: tuple[int, int] | None = None, dtype=np.float64) -> Generator:
        depth = sum(1 for k in state if k.startswith("e2_enc") and k.endswith("_conv1_w"))
        first = state["e2_enc0_conv1_w"]
        cfg = UNetConfig(in_channels=first.shape[1], n_classes=state["d2_head_w"].shape[0],
                         base_width=first.shape[0], depth=depth, dropout=0.0)
        cb, d = cfg.width(depth), state["e1_mu_w"].shape[0]
        if image_shape is None:
            side = int(round(np.sqrt(state["d1_fc_w"].shape[0] // cb))) * 2 ** depth
            image_shape = (side, side)
        net = cls(cfg, latent_dim=d, image_shape=image_shape, dtype=dtype)
        net.load_state_dict(state)
        return net


def sample_z(q: LatentGaussian, rng: np.random.Generator | None = None,
             eps: np.ndarray | None = None, prior: bool = False) -> Tensor:
    """Reparameterized draw ``mean + exp(logvar / 2) * eps``.

    ``eps`` overrides the draw from ``rng``. With ``prior`` the code comes from
    N(0, I) and carries no gradient.
    """
    if eps is None:
        if rng is None:
            raise ValueError("sample_z needs rng or eps")
        eps = rng.standard_normal(q.mean.shape)
    eps = np.asarray(eps, dtype=q.mean.dtype)
    if eps.shape != q.mean.shape:
        raise ShapeError("sample_z", q.mean.shape, eps.shape)
    if prior:
        return Tensor(eps, dtype=q.mean.dtype)
    std = T.exp(T.scale(T.clip(q.logvar, LOGVAR_FLOOR, LOGVAR_CEIL), 0.5))
    return T.add(q.mean, T.mul(std, eps))


# ---------------------------------------------------------------- checkpoints
#
# Layout (all little-endian):
#   magic[8] "BWSCKPT\0" | u32 version | u32 count
#   count x { u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f64 data[prod(dims)] }
#   u32 crc32 of every preceding byte


def encode_checkpoint(state) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> OrderedDict[str, np.ndarray]:
    if len(blob) < 20 or blob[:8] != CKPT_MAGIC:
        raise ValueError("checkpoint: bad magic")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("checkpoint: CRC mismatch")
    version, count = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"checkpoint: unsupported version {version}")
    pos = 16
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(body):
                raise ValueError(f"checkpoint: truncated payload at byte {pos}")
            state[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"checkpoint: truncated table at byte {pos}") from exc
    if pos != len(body):
        raise ValueError(f"checkpoint: {len(body) - pos} trailing bytes at byte {pos}")
    return state


def save_checkpoint(path, net: _Network) -> None:
    atomic_write_bytes(path, encode_checkpoint(net.state_dict()))


def load_checkpoint(path) -> OrderedDict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
