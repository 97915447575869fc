"""Command-line entry point: ``rsrect <command> [options]``.

Settings come from built-in defaults, then a JSON config file (``--config``
or ``$RSRECT_CONFIG``), then command-line flags; later sources win.  Angles
are given in degrees on the command line and in config files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("rsrect")

CONFIG_ENV = "RSRECT_CONFIG"

EXIT_OK = 0
EXIT_FAILED = 1        # a check failed or training diverged
EXIT_USAGE = 2         # bad arguments or unusable input image
EXIT_MISMATCH = 3      # checkpoint size does not match the input
EXIT_MISSING = 4       # a named input path does not exist
EXIT_MALFORMED = 5     # an input file could not be parsed


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    r: int = 64
    seed: int = 0
    max_tx: float = 10.0
    max_rz_deg: float = 4.0
    degree: int = 3
    weights: dict = field(default_factory=lambda: {"rec_mse": 1.0, "reg_mse": 1.0, "rec_edge": 0.5, "reg_edge": 0.5})
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 200
    pretrain_epochs: int = 5
    pretrain_samples: int = 50
    stop_at_reduction: float | None = None
    smoothing: bool = True
    threads: int = 1

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}: invalid JSON config ({exc.msg})", EXIT_MALFORMED) from None
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CliError(f"{path}: unknown config keys {sorted(unknown)}", EXIT_MALFORMED)
        cfg = cls(**data)
        extra = set(cfg.weights) - set(cls().weights)
        if extra:
            raise CliError(f"{path}: unknown loss weights {sorted(extra)}", EXIT_MALFORMED)
        cfg.weights = {**cls().weights, **cfg.weights}
        return cfg

    def optimizer(self):
        from .training.optim import Adam
        return Adam(self.lr, self.beta1, self.beta2, self.eps)

    def loss_weights(self):
        from .training.losses import LossWeights
        return LossWeights(**self.weights)


# flags that map one-to-one onto config fields
_OVERRIDES = ("r", "seed", "max_tx", "max_rz_deg", "degree", "lr", "batch_size", "epochs",
              "pretrain_epochs", "pretrain_samples", "stop_at_reduction", "threads")


def resolve_config(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}", EXIT_MISSING)
        cfg = RunConfig.load(path)
    else:
        cfg = RunConfig()
    for name in _OVERRIDES:
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "no_smoothing", False):
        cfg.smoothing = False
    if cfg.r < 8 or cfg.threads < 1 or cfg.batch_size < 1:
        raise CliError("r must be >= 8; threads and batch size must be >= 1")
    return cfg


# -- small helpers ----------------------------------------------------------------

def _need(path):
    if not os.path.exists(path):
        raise CliError(f"no such file: {path}", EXIT_MISSING)
    return path


def _load_image(path):
    from .imaging import load_png
    _need(path)
    try:
        return load_png(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: cannot read image ({exc})", EXIT_MALFORMED) from None


def _square(img, path, crop):
    from .imaging import center_crop
    h, w = img.shape[:2]
    if h == w:
        return img
    if not crop:
        raise CliError(f"{path}: image is {h}x{w}; rows and columns must match (use --crop)")
    return center_crop(img, min(h, w))


def _read_motion(path, r):
    from .motion import read_motion_csv
    try:
        motion = read_motion_csv(_need(path))
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc), EXIT_MALFORMED) from None
    if motion.r != r:
        raise CliError(f"{path}: motion has {motion.r} rows but the image has {r}")
    return motion


def _load_model(path, r=None):
    from .nn.model import load_checkpoint
    try:
        model, header = load_checkpoint(_need(path))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_MALFORMED) from None
    if r is not None and model.r != r:
        raise CliError(f"{path}: checkpoint is for {model.r}x{model.r} images, input is {r}x{r}", EXIT_MISMATCH)
    return model, header


def _load_dataset(path, limit=None):
    from .training.data import ManifestError, load_samples
    _need(path)
    try:
        samples = load_samples(path, limit)
    except ManifestError as exc:
        raise CliError(str(exc), EXIT_MALFORMED) from None
    except FileNotFoundError as exc:
        raise CliError(f"{path}: manifest names a missing file ({exc.filename})", EXIT_MISSING) from None
    if not samples:
        raise CliError(f"{path}: manifest holds no samples", EXIT_MALFORMED)
    return samples


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def predict(model, rs, degree=3, smoothing=True):
    """Inference: motion block -> cubic fit -> row block -> rectification."""
    from .motion import MotionCurve, projection_matrix
    from .rectifier import rectify_ts
    x = rs[None].astype(model.dtype)
    tx, rz, _ = model.motion_forward(x, train=False, update_stats=False)
    if smoothing:
        p = projection_matrix(model.r, degree, model.dtype)
        tx, rz = tx @ p, rz @ p
    rows, _ = model.row_forward(x, train=False, update_stats=False)
    curve = MotionCurve(tx[0].astype(np.float64), rz[0].astype(np.float64))
    rect, mask = rectify_ts(rs, curve, rows[0])
    return rect, mask, curve, rows[0]


# -- commands ---------------------------------------------------------------------

def cmd_gendata(args, cfg):
    from .synthetic import facade_images
    from .training.data import file_digest, generate_dataset, margin_for, write_dataset
    size = cfg.r + 2 * margin_for(cfg.r)
    if args.source:
        names = sorted(f for f in os.listdir(_need(args.source)) if f.lower().endswith(".png"))[:args.images]
        if not names:
            raise CliError(f"{args.source}: no PNG files found", EXIT_MISSING)
        # lift true black off zero so it is not mistaken for a hole later
        clean = [np.maximum(_square(_load_image(os.path.join(args.source, n)), n, True), 1 / 255) for n in names]
    else:
        clean = facade_images(args.images, size, cfg.seed)
    samples = generate_dataset(clean, args.motions, cfg.seed, cfg.r, cfg.max_tx, math.radians(cfg.max_rz_deg))
    try:
        manifest = write_dataset(samples, args.out)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    n = sum(1 for _ in open(manifest))
    print(f"wrote {n} samples to {manifest} sha256={file_digest(manifest)}")
    return EXIT_OK


def cmd_distort(args, cfg):
    from .imaging import save_mask, save_png, warp_rs_from_gs
    from .motion import eval_trajectory, random_trajectory, write_motion_csv
    gs = _square(_load_image(args.image), args.image, args.crop)
    r = gs.shape[0]
    if args.motion:
        motion = _read_motion(args.motion, r)
    else:
        traj = random_trajectory(args.random, cfg.max_tx, math.radians(cfg.max_rz_deg))
        motion = eval_trajectory(traj, r)
    rs, mask = warp_rs_from_gs(gs, motion)
    os.makedirs(args.out, exist_ok=True)
    save_png(os.path.join(args.out, "rs.png"), rs)
    save_mask(os.path.join(args.out, "mask.png"), mask)
    write_motion_csv(os.path.join(args.out, "motion.csv"), motion)
    print(f"distorted {args.image} ({r}x{r}); visible fraction {mask.mean():.4f}")
    return EXIT_OK


def cmd_rectify(args, cfg):
    from .imaging import masked_psnr, save_mask, save_png
    from .motion import write_motion_csv
    from .rectifier import rectify_known_motion, row_map_fixed_point, write_row_map
    rs = _square(_load_image(args.image), args.image, args.crop)
    r = rs.shape[0]
    os.makedirs(args.out, exist_ok=True)
    if args.model:
        model, _ = _load_model(args.model, r)
        rect, mask, motion, rows = predict(model, rs, cfg.degree, cfg.smoothing)
        write_motion_csv(os.path.join(args.out, "motion.csv"), motion)
    else:
        motion = _read_motion(args.motion, r)
        rect, mask = rectify_known_motion(rs, motion)
        rows = row_map_fixed_point(motion)[0]
    save_png(os.path.join(args.out, "rect.png"), rect)
    save_mask(os.path.join(args.out, "mask.png"), mask)
    if args.row_map:
        write_row_map(os.path.join(args.out, "rows.rmap"), rows)
    msg = f"rectified {args.image}; visible fraction {mask.mean():.4f}"
    if args.reference:
        ref = _square(_load_image(args.reference), args.reference, args.crop)
        if ref.shape != rect.shape:
            raise CliError(f"reference is {ref.shape}, rectified image is {rect.shape}")
        msg += f"; masked PSNR {masked_psnr(rect, ref, mask):.2f} dB"
    print(msg)
    return EXIT_OK


def _check_r(samples, cfg, source):
    r = samples[0].gs.shape[0]
    if r != cfg.r:
        log.info("using r=%d from %s", r, source)
        cfg.r = r
    return r


def _run_pretrain(model, samples, cfg, outdir):
    from .plotting import plot_pretrain
    from .training.loop import pretrain_motion
    hist = pretrain_motion(model, samples, cfg.pretrain_epochs, cfg.batch_size, cfg.optimizer(), cfg.seed,
                           cfg.pretrain_samples)
    _write_csv(os.path.join(outdir, "pretrain.csv"), ["epoch", "loss"],
               [{"epoch": e, "loss": v} for e, v in hist])
    plot_pretrain(hist, os.path.join(outdir, "pretrain.png"))
    drop = 1 - hist[-1][1] / hist[0][1] if hist[0][1] > 0 else 0.0
    print(f"pretrain: loss {hist[0][1]:.5g} -> {hist[-1][1]:.5g} ({100 * drop:.1f}% lower)")
    return hist


def cmd_pretrain(args, cfg):
    from .nn.model import RSNet, save_checkpoint
    samples = _load_dataset(args.data, cfg.pretrain_samples)
    _check_r(samples, cfg, args.data)
    model = _load_model(args.init, cfg.r)[0] if args.init else RSNet(cfg.r, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    hist = _run_pretrain(model, samples, cfg, args.out)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), model,
                    {"stage": "pretrain", "epochs": cfg.pretrain_epochs, "final_loss": hist[-1][1]})
    return EXIT_OK


def cmd_train(args, cfg):
    from .nn.model import RSNet, save_checkpoint
    from .plotting import plot_losses, plot_motion, plot_panels
    from .training.loop import METRIC_FIELDS, TrainingDiverged, train_end_to_end
    samples = _load_dataset(args.data, args.limit)
    _check_r(samples, cfg, args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.init:
        model = _load_model(args.init, cfg.r)[0]
    else:
        model = RSNet(cfg.r, cfg.seed)
        if cfg.pretrain_epochs > 0:
            _run_pretrain(model, samples, cfg, args.out)
    ckpt = os.path.join(args.out, "model.ckpt")
    try:
        res = train_end_to_end(model, samples, cfg.epochs, cfg.loss_weights(), cfg.batch_size, cfg.optimizer(),
                               cfg.seed, cfg.smoothing, cfg.degree, cfg.stop_at_reduction)
    except TrainingDiverged as exc:
        save_checkpoint(ckpt, model, {"stage": "diverged"})
        print(f"training diverged: {exc}; last good parameters saved to {ckpt}", file=sys.stderr)
        return EXIT_FAILED
    _write_csv(os.path.join(args.out, "metrics.csv"), METRIC_FIELDS, res.metrics)
    save_checkpoint(ckpt, model, {"stage": "train", "epochs": res.epochs_run, "config": dataclasses.asdict(cfg)})
    plot_losses(res.metrics, os.path.join(args.out, "loss.png"))
    s = samples[0]
    rect, _, curve, _ = predict(model, s.rs, cfg.degree, cfg.smoothing)
    plot_motion([s.motion, curve], os.path.join(args.out, "motion.png"), ["true", "predicted"])
    plot_panels([s.rs, rect, s.gs], ["RS input", "rectified", "GS"], os.path.join(args.out, "sample.png"))
    print(f"train: {res.epochs_run} epochs, L_total {res.initial_loss:.5g} -> {res.final_loss:.5g} "
          f"({100 * res.reduction:.1f}% lower); masked PSNR {res.metrics[-1]['psnr_masked']:.2f} dB")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suite
    dtypes = {"float32": (np.float32,), "float64": (np.float64,), "both": (np.float32, np.float64)}[args.dtype]
    results = run_suite(dtypes, cfg.seed)
    for res in results:
        print(res.line())
    if args.csv:
        _write_csv(args.csv, ["name", "dtype", "rel_err", "tol", "passed"],
                   [{"name": x.name, "dtype": x.dtype, "rel_err": x.rel_err, "tol": x.tol,
                     "passed": int(x.passed)} for x in results])
    failed = [x for x in results if not x.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_eval(args, cfg):
    from .imaging import masked_psnr
    from .plotting import plot_panels, plot_psnr_hist
    from .rectifier import rectify_known_motion
    samples = _load_dataset(args.data, args.limit)
    r = _check_r(samples, cfg, args.data)
    model = _load_model(args.model, r)[0] if args.model else None
    os.makedirs(args.out, exist_ok=True)
    rows, first = [], None
    for s in samples:
        if model is None:
            rect, mask = rectify_known_motion(s.rs, s.motion)
        else:
            rect, mask, _, _ = predict(model, s.rs, cfg.degree, cfg.smoothing)
        rows.append({"name": s.name, "psnr_masked": masked_psnr(rect, s.gs, mask), "visible": float(mask.mean())})
        if first is None:
            first = (s, rect)
    _write_csv(os.path.join(args.out, "eval.csv"), ["name", "psnr_masked", "visible"], rows)
    psnr = [x["psnr_masked"] for x in rows]
    plot_psnr_hist(psnr, os.path.join(args.out, "psnr_hist.png"))
    s, rect = first
    plot_panels([s.rs, rect, s.gs], ["RS input", "rectified", "GS"], os.path.join(args.out, "sample.png"))
    finite = [p for p in psnr if math.isfinite(p)]
    print(f"eval ({'model' if model else 'known motion'}): {len(rows)} samples, "
          f"masked PSNR mean {np.mean(finite):.2f} dB, min {np.min(finite):.2f} dB")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads (default 1)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    motion = argparse.ArgumentParser(add_help=False)
    motion.add_argument("--max-tx", dest="max_tx", type=float, help="largest |t_x| in pixels")
    motion.add_argument("--max-rz", dest="max_rz_deg", type=float, help="largest |r_z| in degrees")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--data", required=True, help="dataset manifest (manifest.jsonl)")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--init", help="start from this checkpoint")
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    train.add_argument("--pretrain-samples", dest="pretrain_samples", type=int)

    p = argparse.ArgumentParser(prog="rsrect", description="Rolling shutter rectification toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", parents=[common, motion], help="synthesize a GS/RS training set")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=5)
    g.add_argument("--motions", type=int, default=10)
    g.add_argument("--r", type=int)
    g.add_argument("--source", help="directory of clean PNGs (default: synthetic facades)")
    g.set_defaults(func=cmd_gendata)

    d = sub.add_parser("distort", parents=[common, motion], help="apply rolling shutter motion to an image")
    d.add_argument("image")
    d.add_argument("--out", required=True)
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--motion", help="motion CSV (row,tx_px,rz_rad)")
    src.add_argument("--random", type=int, metavar="SEED", help="random quadratic motion from this seed")
    d.add_argument("--crop", action="store_true", help="center-crop non-square input")
    d.set_defaults(func=cmd_distort)

    r = sub.add_parser("rectify", parents=[common], help="undo rolling shutter distortion")
    r.add_argument("image")
    r.add_argument("--out", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--motion", help="known motion CSV")
    src.add_argument("--model", help="trained checkpoint")
    r.add_argument("--reference", help="GS image for a masked PSNR report")
    r.add_argument("--row-map", action="store_true", help="also write rows.rmap")
    r.add_argument("--crop", action="store_true")
    r.add_argument("--degree", type=int, choices=(2, 3))
    r.add_argument("--no-smoothing", action="store_true")
    r.set_defaults(func=cmd_rectify)

    pt = sub.add_parser("pretrain", parents=[common, train], help="regress the motion block on true curves")
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", parents=[common, train], help="end-to-end training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--limit", type=int, help="use only the first N samples")
    t.add_argument("--stop-at-reduction", dest="stop_at_reduction", type=float,
                   help="stop once L_total has fallen by this fraction")
    t.add_argument("--no-smoothing", action="store_true")
    t.set_defaults(func=cmd_train)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--dtype", choices=("float32", "float64", "both"), default="both")
    gc.add_argument("--csv", help="also write results here")
    gc.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", parents=[common], help="masked PSNR over a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--model", help="checkpoint (default: rectify with the true motion)")
    e.add_argument("--limit", type=int)
    e.add_argument("--no-smoothing", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            return args.func(args, cfg)
    except CliError as exc:
        print(f"rsrect {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
