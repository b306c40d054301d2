"""File formats (binary PGM, raw float planes, CSV, key=value text) and the
synthetic dataset generator.

Every writer goes through :func:`atomic_write_bytes` so an interrupted run
never leaves a truncated artifact behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

UNLABELED = 255


class PGMError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at byte {offset}")
        self.offset = offset


class PlacementError(ValueError):
    """The synthetic spec asks for more shapes than fit in the frame."""


# ---------------------------------------------------------------- atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- PGM (P5)


def encode_pgm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"PGM payload must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("PGM values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                return

    def token() -> int:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PGMError("malformed header: expected an integer", start)
        return int(blob[start:pos])

    if blob[:2] != b"P5":
        raise PGMError("malformed header: magic is not P5", 0)
    pos = 2
    width, height, maxval = token(), token(), token()
    if not 0 < maxval < 256:
        raise PGMError(f"unsupported maxval {maxval}", pos)
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise PGMError("malformed header: missing separator", pos)
    pos += 1
    need = width * height
    if len(blob) - pos < need:
        raise PGMError(f"truncated payload: need {need} bytes, have {len(blob) - pos}", len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_pgm(path, pixels: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pgm(pixels))


def read_image(path) -> np.ndarray:
    """Grayscale image as float64 in [0, 1]."""
    return read_pgm(path).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("image intensities must lie in [0, 1]")
    write_pgm(path, np.rint(img * 255.0).astype(np.uint8))


def read_labels(path) -> np.ndarray:
    """Class indices as uint8; 255 marks an unlabeled pixel."""
    return read_pgm(path)


def write_labels(path, labels: np.ndarray) -> None:
    write_pgm(path, np.asarray(labels).astype(np.uint8))


def write_raw_f64(path, values: np.ndarray) -> None:
    atomic_write_bytes(path, np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_raw_f64(path, shape) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    need = 8 * int(np.prod(shape))
    if len(blob) != need:
        raise ValueError(f"raw float file {path}: expected {need} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)


# ---------------------------------------------------------------- CSV / key=value


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(items) -> str:
    return "".join(f"{k}={v}\n" for k, v in (items.items() if isinstance(items, dict) else items))


def write_manifest(path, config: dict, seed: int, inputs=(), artifacts=(), version: str = "") -> None:
    """Run manifest: config echo, seed, input checksums, artifact paths."""
    lines = [("tool", "bwseg"), ("version", version), ("seed", seed)]
    lines += [(f"config.{k}", v) for k, v in config.items()]
    for p in inputs:
        lines.append((f"input.{p}", sha256_file(p)))
    for p in artifacts:
        lines.append((f"artifact.{p}", sha256_file(p) if os.path.exists(p) else "pending"))
    atomic_write_text(path, format_kv(lines))


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    size: int = 64
    n_classes: int = 4
    shapes_min: int = 3
    shapes_max: int = 5
    class_means: tuple = (0.2, 0.45, 0.65, 0.85)
    class_stds: tuple = (0.04, 0.05, 0.05, 0.05)
    noise: float = 0.06
    radius_min: float = 5.0
    radius_max: float = 12.0
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    seed: int = 0
    depth: int = 2
    max_retries: int = 200
    kinds: tuple = field(default=("ellipse", "rectangle", "annulus"))

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.size % 2 ** self.depth:
            raise ValueError(f"size must be divisible by {2 ** self.depth}")
        if len(self.class_means) < self.n_classes or len(self.class_stds) < self.n_classes:
            raise ValueError("class_means/class_stds need one entry per class")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ValueError("need 0 <= shapes_min <= shapes_max")


def _shape_mask(kind, cy, cx, r1, r2, theta, yy, xx):
    u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    if kind == "rectangle":
        return (np.abs(u) <= r1) & (np.abs(v) <= r2)
    outer = (u / r1) ** 2 + (v / r2) ** 2 <= 1.0
    if kind == "annulus":
        return outer & ((u / (0.5 * r1)) ** 2 + (v / (0.5 * r2)) ** 2 > 1.0)
    return outer


def _place_shapes(spec: SyntheticSpec, classes, rng, yy, xx):
    n = spec.size
    occupied = np.zeros((n, n), dtype=bool)
    placed = []
    for c in classes:
        for _ in range(spec.max_retries):
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            r1, r2 = rng.uniform(spec.radius_min, spec.radius_max, size=2)
            if kind == "rectangle":
                r1, r2 = 0.8 * r1, 0.8 * r2
            cy, cx = rng.uniform(r1 + 1, n - r1 - 2), rng.uniform(r2 + 1, n - r2 - 2)
            theta = rng.uniform(0, np.pi)
            mask = _shape_mask(kind, cy, cx, r1, r2, theta, yy, xx)
            halo = _shape_mask(kind if kind != "annulus" else "ellipse", cy, cx, r1 + 2, r2 + 2, theta, yy, xx)
            if mask.sum() >= 9 and not (halo & occupied).any():
                break
        else:
            return None
        occupied |= halo
        placed.append((c, mask))
    return placed


def synth_sample(spec: SyntheticSpec, rng: np.random.Generator):
    """One (image, label map) pair. Shapes never overlap or touch."""
    n = spec.size
    yy, xx = np.mgrid[:n, :n].astype(np.float64)
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    fg = list(range(1, spec.n_classes))
    classes = [fg[i % len(fg)] for i in range(min(count, len(fg)))]
    classes += [int(rng.integers(1, spec.n_classes)) for _ in range(count - len(classes))]
    # a crowded frame can dead-end; start the layout over a few times
    for _ in range(10):
        placed = _place_shapes(spec, classes, rng, yy, xx)
        if placed is not None:
            break
    else:
        raise PlacementError(
            f"could not place {count} non-overlapping shapes in a {n}x{n} frame after "
            f"{spec.max_retries} retries per shape; lower shapes_max or radius_max")
    labels = np.zeros((n, n), dtype=np.uint8)
    image = np.full((n, n), rng.normal(spec.class_means[0], spec.class_stds[0]))
    for c, mask in placed:
        labels[mask] = c
        image[mask] = rng.normal(spec.class_means[c], spec.class_stds[c])
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # quantize to the 8-bit grid so files and memory agree exactly
    return np.rint(image * 255.0) / 255.0, labels


def generate_synthetic(spec: SyntheticSpec, out_dir=None):
    """Generate train/val/test splits; optionally write them as PGM triples.

    Returns ``{split: [(image, labels, scribbles), ...]}``.
    """
    from .weak_labels import simulate_scribbles

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    data = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        items = []
        for _ in range(count):
            img, lbl = synth_sample(spec, rng)
            items.append((img, lbl, simulate_scribbles(lbl, spec.n_classes)))
        data[split] = items
    if out_dir is not None:
        out_dir = Path(out_dir)
        for split, items in data.items():
            for i, (img, lbl, scr) in enumerate(items):
                write_image(out_dir / split / f"{i:04d}_img.pgm", img)
                write_labels(out_dir / split / f"{i:04d}_lbl.pgm", lbl)
                write_labels(out_dir / split / f"{i:04d}_scr.pgm", scr)
        atomic_write_text(out_dir / "synthetic.cfg", format_kv(
            {k: (",".join(map(str, v)) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}))
    return data


def load_split(directory, with_labels: bool = True):
    """Read ``*_img.pgm`` plus sibling ``_lbl``/``_scr`` files, sorted by id."""
    directory = Path(directory)
    ids = sorted(p.name[:-len("_img.pgm")] for p in directory.glob("*_img.pgm"))
    if not ids:
        raise FileNotFoundError(f"no *_img.pgm files in {directory}")
    items = []
    for i in ids:
        img = read_image(directory / f"{i}_img.pgm")
        lbl = read_labels(directory / f"{i}_lbl.pgm") if (directory / f"{i}_lbl.pgm").exists() else None
        scr = read_labels(directory / f"{i}_scr.pgm") if (directory / f"{i}_scr.pgm").exists() else None
        items.append((i, img, lbl, scr))
    return items
