"""GS/RS training pairs: synthesis, manifests and loading."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from ..imaging import center_crop, load_png, save_png, warp_rs_from_gs
from ..motion import (DEFAULT_MAX_RZ, DEFAULT_MAX_TX, MotionCurve, PolynomialTrajectory, eval_trajectory,
                      fit_trajectory, random_trajectory, read_motion_csv, write_motion_csv)


@dataclass
class TrainSample:
    gs: np.ndarray
    rs: np.ndarray
    motion: MotionCurve
    trajectory: PolynomialTrajectory
    seed: int = 0
    name: str = ""


def margin_for(r):
    """Padding applied on each side before distorting (100 px at r = 256)."""
    return math.ceil(r * 50 / 256)


def motion_seed(seed, image_index, motion_index):
    return int(np.random.SeedSequence([seed, image_index, motion_index]).generate_state(1)[0])


def make_sample(clean, traj, r, seed=0, name=""):
    """Distort a padded copy of ``clean`` with ``traj`` and crop both to ``r``.

    The trajectory is defined over the padded rows; the returned motion and
    trajectory are re-expressed over the cropped rows.  Cropping is centered
    so the rotation origin is unchanged.
    """
    pad = margin_for(r)
    size = r + 2 * pad
    if clean.shape[0] < size or clean.shape[1] < size:
        raise ValueError(f"clean image {clean.shape[:2]} is smaller than the required {size}x{size}")
    gs_pad = center_crop(clean, size)
    curve = eval_trajectory(traj, size)
    rs_pad, _ = warp_rs_from_gs(gs_pad, curve)
    motion = curve.crop(pad, r)
    return TrainSample(center_crop(gs_pad, r).copy(), center_crop(rs_pad, r).copy(), motion,
                       fit_trajectory(motion, traj.degree), seed, name)


def generate_dataset(clean_images, n_motions, seed, r, max_tx=DEFAULT_MAX_TX, max_rz=DEFAULT_MAX_RZ):
    """Yield ``len(clean_images) * n_motions`` samples in (image, motion) order."""
    for i, clean in enumerate(clean_images):
        for k in range(n_motions):
            s = motion_seed(seed, i, k)
            traj = random_trajectory(s, max_tx, max_rz)
            yield make_sample(clean, traj, r, s, f"img{i:03d}_mot{k:03d}")


# -- on disk ------------------------------------------------------------------

def write_dataset(samples, outdir):
    """Write PNGs, motion CSVs and a JSON-lines manifest; returns the manifest path."""
    os.makedirs(os.path.join(outdir, "gs"), exist_ok=True)
    os.makedirs(os.path.join(outdir, "rs"), exist_ok=True)
    os.makedirs(os.path.join(outdir, "motion"), exist_ok=True)
    manifest = os.path.join(outdir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for s in samples:
            rec = {
                "name": s.name,
                "gs": f"gs/{s.name}.png",
                "rs": f"rs/{s.name}.png",
                "motion": f"motion/{s.name}.csv",
                "trajectory": s.trajectory.to_json(),
                "seed": s.seed,
            }
            save_png(os.path.join(outdir, rec["gs"]), s.gs)
            save_png(os.path.join(outdir, rec["rs"]), s.rs)
            write_motion_csv(os.path.join(outdir, rec["motion"]), s.motion)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


class ManifestError(ValueError):
    pass


def read_manifest(path):
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
            missing = {"gs", "rs", "motion", "trajectory", "seed"} - set(rec)
            if missing:
                raise ManifestError(f"{path}:{n}: missing fields {sorted(missing)}")
            records.append(rec)
    return records


def load_samples(path, limit=None):
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for rec in read_manifest(path)[:limit]:
        out.append(TrainSample(
            load_png(os.path.join(base, rec["gs"])),
            load_png(os.path.join(base, rec["rs"])),
            read_motion_csv(os.path.join(base, rec["motion"])),
            PolynomialTrajectory.from_json(rec["trajectory"]),
            int(rec["seed"]),
            rec.get("name", ""),
        ))
    return out


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
