"""Command-line entry point: ``bwseg <command> [flags]``.

Settings resolve as built-in defaults < ``--config`` file < explicit flags.
Config files are flat ``key=value`` text whose keys are the flag names
without the leading dashes (``weight-decay=1e-4``).

Exit codes: 0 ok, 2 usage, 3 I/O, 4 non-finite loss. Failures print a single
``bwseg: error kind=<kind> command=<cmd> msg="..."`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import dataio as D
from . import pipeline as P
from .dataio import PGMError
from .gradcheck import format_table, run_gradcheck
from .networks import Generator, SegUNet, load_checkpoint, save_checkpoint
from .pipeline import NumericError, TrainConfig

log = logging.getLogger("bwseg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# flag name -> (TrainConfig field, type)
TRAIN_FLAGS = {
    "seed": ("seed", int),
    "epochs": ("epochs", int),
    "epochs-seg": ("epochs_seg", int),
    "lr": ("lr", float),
    "weight-decay": ("weight_decay", float),
    "batch": ("batch", int),
    "alpha": ("alpha", float),
    "beta": ("beta", float),
    "gamma": ("gamma", float),
    "n-samples": ("n_samples", int),
    "t-infer": ("t_infer", int),
    "latent-dim": ("latent_dim", int),
    "dropout": ("dropout", float),
    "sigma-xy": ("sigma_xy", float),
    "sigma-int": ("sigma_int", float),
    "crf-crop": ("crf_crop", int),
    "optimizer": ("optimizer", str),
    "prior-z": ("prior_z", _bool),
    "normalize-pce": ("normalize_pce", _bool),
    "n-classes": ("n_classes", int),
    "base-width": ("base_width", int),
    "depth": ("depth", int),
    "dtype": ("dtype", str),
}
BOOL_FLAGS = ("prior-z", "normalize-pce")


SIM_INT_FLAGS = ("n-train", "n-val", "n-test", "size", "shapes-min", "shapes-max")
SIM_FLOAT_FLAGS = ("noise", "radius-min", "radius-max")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for flag, (_, typ) in TRAIN_FLAGS.items():
        if flag in BOOL_FLAGS:
            p.add_argument(f"--{flag}", dest=flag, action="store_true", default=argparse.SUPPRESS)
        elif flag == "t-infer":
            p.add_argument("--t-infer", "--t", dest="t-infer", type=typ, default=argparse.SUPPRESS)
        else:
            p.add_argument(f"--{flag}", dest=flag, type=typ, default=argparse.SUPPRESS)
    p.add_argument("--config", default=argparse.SUPPRESS, help="key=value file; flags override it")
    p.add_argument("--out-dir", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bwseg", description="Scribble-supervised segmentation with a latent generator.")
    parser.add_argument("--version", action="version", version=f"bwseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate the synthetic dataset with scribbles")
    _add_train_flags(p)
    for flag in SIM_INT_FLAGS:
        p.add_argument(f"--{flag}", type=int, default=argparse.SUPPRESS)
    for flag in SIM_FLOAT_FLAGS:
        p.add_argument(f"--{flag}", type=float, default=argparse.SUPPRESS)

    p = sub.add_parser("train-gen", help="stage 1: fit the generator on images and scribbles")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="directory of *_img.pgm / *_scr.pgm")

    p = sub.add_parser("pseudo-label", help="write merged pseudo-label maps")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")

    p = sub.add_parser("train-seg", help="stage 2: fit the dropout U-Net")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="directory of <id>_lbl.pgm dense labels (pseudo-labels or ground truth)")
    p.add_argument("--loss", choices=("ce", "pce"), default="ce",
                   help="ce on --labels, or pce on the scribbles in --data")

    p = sub.add_parser("infer", help="MC-dropout prediction and entropy maps")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="segmenter checkpoint")

    p = sub.add_parser("eval", help="per-image, per-class metrics CSV")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="directory with ground-truth *_lbl.pgm")
    p.add_argument("--pred", required=True, help="directory with <id>_pred.pgm")
    p.add_argument("--exclude-background", action="store_true")

    p = sub.add_parser("ablate", help="grid over loss components, N or T")
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="dataset root with train/ and test/")
    p.add_argument("--axis", required=True, choices=("loss-components", "N", "T"))

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    _add_train_flags(p)
    p.add_argument("--instances", type=int, default=10)
    return parser


def resolve_config(ns: argparse.Namespace) -> TrainConfig:
    """defaults < config file < flags."""
    given = vars(ns)
    values: dict = {}
    if "config" in given:
        path = Path(given["config"])
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from exc
        for key, raw in D.parse_kv(text, str(path)).items():
            if key not in TRAIN_FLAGS:
                raise UsageError(f"{path}: unknown config key {key!r}")
            name, typ = TRAIN_FLAGS[key]
            try:
                values[name] = typ(raw)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key}: {raw!r}") from exc
    for flag, (name, _) in TRAIN_FLAGS.items():
        if flag in given:
            values[name] = given[flag]
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BWS_THREADS", "1")))
    except ValueError:
        raise UsageError(f"BWS_THREADS must be an integer, got {os.environ['BWS_THREADS']!r}") from None


def _out_dir(ns) -> Path:
    if "out_dir" not in vars(ns) and "out-dir" not in vars(ns):
        raise UsageError("--out-dir is required")
    out = Path(vars(ns).get("out_dir") or vars(ns)["out-dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(path, need_scribbles=False, need_labels=False):
    try:
        items = D.load_split(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    for i, _, lbl, scr in items:
        if need_scribbles and scr is None:
            raise InputError(f"{path}: missing {i}_scr.pgm")
        if need_labels and lbl is None:
            raise InputError(f"{path}: missing {i}_lbl.pgm")
    return items


def _input_files(path) -> list[str]:
    return sorted(str(p) for p in Path(path).glob("*.pgm"))


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


class _Run:
    """Writes the manifest at start (artifacts pending) and again at the end."""

    def __init__(self, out: Path, cfg: TrainConfig, command: str, inputs=()):
        self.path = out / "manifest.txt"
        self.cfg, self.command, self.inputs = cfg, command, list(inputs)
        self.artifacts: list[str] = []
        self._write()

    def _write(self):
        config = {"command": self.command, **asdict(self.cfg)}
        D.write_manifest(self.path, config, self.cfg.seed, self.inputs, self.artifacts, __version__)

    def add(self, *paths):
        self.artifacts.extend(str(p) for p in paths)

    def finish(self):
        self._write()


# ---------------------------------------------------------------- commands


def cmd_simulate(ns, cfg):
    out = _out_dir(ns)
    wanted = {f.replace("-", "_") for f in SIM_INT_FLAGS + SIM_FLOAT_FLAGS}
    extra = {k: v for k, v in vars(ns).items() if k in wanted}
    try:
        spec = D.SyntheticSpec(n_classes=cfg.n_classes, seed=cfg.seed, depth=cfg.depth, **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    run = _Run(out, cfg, "simulate")
    try:
        D.generate_synthetic(spec, out)
    except D.PlacementError as exc:
        raise UsageError(str(exc)) from exc
    run.add(*sorted(str(p) for p in out.rglob("*.pgm")), out / "synthetic.cfg")
    run.finish()
    print(f"wrote {spec.n_train}/{spec.n_val}/{spec.n_test} samples to {out}")


def cmd_train_gen(ns, cfg):
    out = _out_dir(ns)
    items = _load_split(ns.data, need_scribbles=True)
    run = _Run(out, cfg, "train-gen", _input_files(ns.data))
    gen, rows = P.train_stage1([x for _, x, _, _ in items], [s for _, _, _, s in items], cfg,
                               log_path=out / "stage1_log.csv")
    save_checkpoint(out / "generator.ckpt", gen)
    run.add(out / "generator.ckpt", out / "stage1_log.csv")
    run.finish()
    print(f"stage 1: {len(rows)} steps, total {rows[0][-1]:.4g} -> {rows[-1][-1]:.4g}")


def cmd_pseudo_label(ns, cfg):
    out = _out_dir(ns)
    items = _load_split(ns.data, need_scribbles=True)
    run = _Run(out, cfg, "pseudo-label", _input_files(ns.data) + [ns.checkpoint])
    shape = items[0][1].shape
    gen = Generator.from_state(_load_ckpt(ns.checkpoint), image_shape=P.stack_images(
        [items[0][1]], cfg.depth).shape[2:], dtype=np.dtype(cfg.dtype))
    labels = P.generate_pseudo_labels(gen, [x for _, x, _, _ in items], [s for _, _, _, s in items],
                                      cfg.n_samples, P.stream(cfg.seed, "pseudo"), cfg.prior_z)
    for (i, *_), lab in zip(items, labels):
        D.write_labels(out / f"{i}_lbl.pgm", lab)
        run.add(out / f"{i}_lbl.pgm")
    run.finish()
    print(f"wrote {len(labels)} pseudo-label maps ({shape[0]}x{shape[1]}) to {out}")


def cmd_train_seg(ns, cfg):
    out = _out_dir(ns)
    items = _load_split(ns.data, need_scribbles=ns.loss == "pce")
    inputs = _input_files(ns.data)
    if ns.loss == "pce":
        labels = [s for _, _, _, s in items]
    else:
        if not ns.labels:
            raise UsageError("--labels is required with --loss ce")
        labels = []
        for i, *_ in items:
            path = Path(ns.labels) / f"{i}_lbl.pgm"
            if not path.exists():
                raise InputError(f"missing label map {path}")
            labels.append(D.read_labels(path))
        inputs += _input_files(ns.labels)
    run = _Run(out, cfg, "train-seg", inputs)
    tag = "seg" if ns.loss == "ce" else "pce"
    net, rows = P.train_segmenter([x for _, x, _, _ in items], labels, cfg, loss=ns.loss,
                                  log_path=out / "stage2_log.csv", tag=tag)
    save_checkpoint(out / "segmenter.ckpt", net)
    run.add(out / "segmenter.ckpt", out / "stage2_log.csv")
    run.finish()
    print(f"stage 2 ({ns.loss}): {len(rows)} steps, loss {rows[0][1]:.4g} -> {rows[-1][1]:.4g}")


def cmd_infer(ns, cfg):
    out = _out_dir(ns)
    items = _load_split(ns.data)
    run = _Run(out, cfg, "infer", _input_files(ns.data) + [ns.checkpoint])
    net = SegUNet.from_state(_load_ckpt(ns.checkpoint), dropout=cfg.dropout, dtype=np.dtype(cfg.dtype))
    images = [x for _, x, _, _ in items]
    probs, unc = P.mc_dropout_infer(net, images, cfg.t_infer, P.stream(cfg.seed, "infer"))
    ln_c = np.log(net.cfg.n_classes)
    for (i, x, *_), p, u in zip(items, probs, unc):
        h, w = x.shape
        pred, u = p[:, :h, :w].argmax(axis=0).astype(np.uint8), u[:h, :w]
        D.write_labels(out / f"{i}_pred.pgm", pred)
        D.write_raw_f64(out / f"{i}_unc.f64", u)
        D.write_pgm(out / f"{i}_unc.pgm", np.rint(255.0 * u / ln_c).astype(np.uint8))
        run.add(out / f"{i}_pred.pgm", out / f"{i}_unc.f64", out / f"{i}_unc.pgm")
    run.finish()
    print(f"wrote predictions and uncertainty for {len(items)} images (T={cfg.t_infer})")


EVAL_HEADER = ("image", "class", "DC", "JA", "SE", "SP", "HD95")


def evaluate_dirs(pred_dir, data_dir, n_classes, exclude_background=False):
    """Per-image, per-class rows followed by one ``mean`` row per class and overall."""
    from . import metrics as M

    items = _load_split(data_dir, need_labels=True)
    rows, per_image = [], []
    for i, _, gt, _ in items:
        path = Path(pred_dir) / f"{i}_pred.pgm"
        if not path.exists():
            raise InputError(f"missing prediction {path}")
        pred = D.read_labels(path)
        for r in M.evaluate(pred, gt, n_classes, exclude_background):
            rows.append((i, r["class"], r["DC"], r["JA"], r["SE"], r["SP"], r["HD95"]))
        per_image.append(M.all_rates(pred, gt, n_classes, exclude_background))
    summary = M.summarize(per_image)
    for c in range(n_classes):
        sel = [r for r in rows if r[1] == c]
        if sel:
            rows.append(("mean", c) + tuple(float(np.nanmean([r[k] for r in sel])) if not all(
                np.isnan(r[k]) for r in sel) else float("nan") for k in range(2, 7)))
    hd = [r[6] for r in rows if r[0] != "mean" and not np.isnan(r[6])]
    rows.append(("mean", "all", summary["DC"], summary["JA"], summary["SE"], summary["SP"],
                 float(np.mean(hd)) if hd else float("nan")))
    return rows, summary


def cmd_eval(ns, cfg):
    out = _out_dir(ns)
    run = _Run(out, cfg, "eval", _input_files(ns.data) + _input_files(ns.pred))
    rows, summary = evaluate_dirs(ns.pred, ns.data, cfg.n_classes, ns.exclude_background)
    D.write_csv(out / "eval.csv", EVAL_HEADER, rows)
    run.add(out / "eval.csv")
    run.finish()
    print(" ".join(f"{k}={v:.2f}" for k, v in summary.items()))


def cmd_ablate(ns, cfg):
    out = _out_dir(ns)
    root = Path(ns.data)
    train = _load_split(root / "train", need_scribbles=True)
    test = _load_split(root / "test", need_labels=True)
    run = _Run(out, cfg, "ablate", _input_files(root / "train") + _input_files(root / "test"))
    os.environ["BWS_THREADS"] = str(_threads())
    rows = P.run_ablation([(x, s) for _, x, _, s in train], [(x, y) for _, x, y, _ in test], ns.axis, cfg)
    header = ("axis", "setting", "N", "T", "DC", "JA", "SE", "SP")
    path = out / f"ablation_{ns.axis}.csv"
    D.write_csv(path, header, [tuple(r[k] for k in header) for r in rows])
    run.add(path)
    run.finish()
    for r in rows:
        print(f"{r['setting']:<24} DC={r['DC']:.2f} JA={r['JA']:.2f} SE={r['SE']:.2f} SP={r['SP']:.2f}")


def cmd_gradcheck(ns, cfg):
    if ns.instances < 1:
        raise UsageError("--instances must be >= 1")
    rows = run_gradcheck(cfg.seed, ns.instances)
    print(format_table(rows))
    if "out_dir" in vars(ns) or "out-dir" in vars(ns):
        out = _out_dir(ns)
        run = _Run(out, cfg, "gradcheck")
        D.write_csv(out / "gradcheck.csv", ("case", "instances", "max_rel_error"),
                    [(r.case, r.instances, r.max_rel_error) for r in rows])
        run.add(out / "gradcheck.csv")
        run.finish()
    if not all(r.passed for r in rows):
        raise NumericError("gradcheck", 0, {r.case: r.max_rel_error for r in rows if not r.passed})


COMMANDS = {
    "simulate": cmd_simulate,
    "train-gen": cmd_train_gen,
    "pseudo-label": cmd_pseudo_label,
    "train-seg": cmd_train_seg,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, command: str | None, msg: str, code: int) -> int:
    msg = " ".join(str(msg).split())
    print(f"bwseg: error kind={kind} command={command or '-'} msg={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BWS_LOGLEVEL", "WARNING"), format="%(name)s: %(message)s")
    command = None
    try:
        ns = build_parser().parse_args(argv)
        command = ns.command
        if command is None:
            raise UsageError("missing command; one of " + ", ".join(COMMANDS))
        cfg = resolve_config(ns)
        _threads()
        COMMANDS[command](ns, cfg)
    except UsageError as exc:
        return _fail("usage", command, exc, EXIT_USAGE)
    except (InputError, PGMError, OSError) as exc:
        return _fail("io", command, exc, EXIT_IO)
    except NumericError as exc:
        return _fail("numeric", command, exc, EXIT_NUMERIC)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
