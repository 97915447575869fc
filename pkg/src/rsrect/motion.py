"""Per-row motion curves and the polynomial trajectories that smooth them."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_TX = 10.0                  # pixels
DEFAULT_MAX_RZ = math.radians(4.0)     # radians


@dataclass
class MotionCurve:
    """Translation ``tx`` (pixels) and rotation ``rz`` (radians) for each row."""
    tx: np.ndarray
    rz: np.ndarray

    def __post_init__(self):
        self.tx = np.atleast_1d(np.asarray(self.tx))
        self.rz = np.atleast_1d(np.asarray(self.rz))
        if not np.issubdtype(self.tx.dtype, np.floating):
            self.tx = self.tx.astype(np.float64)
        if not np.issubdtype(self.rz.dtype, np.floating):
            self.rz = self.rz.astype(np.float64)
        if self.tx.ndim != 1 or self.tx.shape != self.rz.shape:
            raise ValueError(f"tx and rz must be 1-D of equal length, got {self.tx.shape} and {self.rz.shape}")
        if not (np.all(np.isfinite(self.tx)) and np.all(np.isfinite(self.rz))):
            raise ValueError("motion curve contains NaN or Inf")

    @property
    def r(self):
        return self.tx.shape[0]

    @classmethod
    def zeros(cls, r, dtype=np.float64):
        return cls(np.zeros(r, dtype), np.zeros(r, dtype))

    @classmethod
    def constant(cls, r, tx=0.0, rz=0.0):
        return cls(np.full(r, float(tx)), np.full(r, float(rz)))

    def astype(self, dtype):
        return MotionCurve(self.tx.astype(dtype), self.rz.astype(dtype))

    def stack(self):
        """``(r, 2)`` array with columns (tx, rz)."""
        return np.stack([self.tx, self.rz], axis=1)

    def crop(self, start, size):
        return MotionCurve(self.tx[start:start + size].copy(), self.rz[start:start + size].copy())


def sample_motion_at(curve, x):
    """Motion at fractional row index ``x`` (linear between rows, clamped at the ends).

    ``x`` may be a scalar or an array; returns ``(tx, rz)`` of the same shape.
    """
    x = np.asarray(x)
    r = curve.r
    if r == 1:
        return np.full(x.shape, curve.tx[0]), np.full(x.shape, curve.rz[0])
    k, f = _row_weights(x, r)
    tx = (1 - f) * curve.tx[k] + f * curve.tx[k + 1]
    rz = (1 - f) * curve.rz[k] + f * curve.rz[k + 1]
    return tx, rz


def _row_weights(x, r):
    """Lower row index and blend weight for linear lookup over ``r`` rows."""
    xc = np.clip(x, 0, r - 1)
    k = np.minimum(np.floor(xc), r - 2).astype(np.intp)
    f = (xc - k).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    return k, f


# -- trajectories -------------------------------------------------------------

@dataclass
class PolynomialTrajectory:
    """Polynomials in the normalized row ``s = i / (r - 1)``, lowest power first."""
    degree: int
    coeffs_tx: np.ndarray
    coeffs_rz: np.ndarray
    normalization: str = field(default="s=i/(r-1)", repr=False)

    def __post_init__(self):
        if self.degree not in (2, 3):
            raise ValueError(f"degree must be 2 or 3, got {self.degree}")
        self.coeffs_tx = np.asarray(self.coeffs_tx, dtype=np.float64)
        self.coeffs_rz = np.asarray(self.coeffs_rz, dtype=np.float64)
        n = self.degree + 1
        if self.coeffs_tx.shape != (n,) or self.coeffs_rz.shape != (n,):
            raise ValueError(f"degree {self.degree} needs {n} coefficients per component")

    def to_json(self):
        return {
            "degree": self.degree,
            "coeffs_tx": [float(c) for c in self.coeffs_tx],
            "coeffs_rz": [float(c) for c in self.coeffs_rz],
            "normalization": self.normalization,
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("normalization", "s=i/(r-1)") != "s=i/(r-1)":
            raise ValueError(f"unsupported normalization {obj['normalization']!r}")
        return cls(int(obj["degree"]), obj["coeffs_tx"], obj["coeffs_rz"])


def vandermonde(r, degree):
    s = np.linspace(0.0, 1.0, r) if r > 1 else np.zeros(1)
    return s[:, None] ** np.arange(degree + 1)[None, :]


def fit_trajectory(curve, degree=3):
    """Least-squares polynomial fit of both motion components over the rows."""
    if degree not in (2, 3):
        raise ValueError(f"degree must be 2 or 3, got {degree}")
    if curve.r < degree + 1:
        raise ValueError(f"{curve.r} rows cannot determine a degree-{degree} polynomial")
    v = vandermonde(curve.r, degree)
    coeffs, *_ = np.linalg.lstsq(v, np.stack([curve.tx, curve.rz], axis=1).astype(np.float64), rcond=None)
    return PolynomialTrajectory(degree, coeffs[:, 0], coeffs[:, 1])


def eval_trajectory(traj, r):
    if r < 2:
        raise ValueError("need at least two rows")
    v = vandermonde(r, traj.degree)
    return MotionCurve(v @ traj.coeffs_tx, v @ traj.coeffs_rz)


def projection_matrix(r, degree=3, dtype=np.float64):
    """``r x r`` orthogonal projector onto degree-``degree`` polynomial curves.

    Fitting followed by evaluation is linear in the curve, and this is its
    matrix.  It is symmetric, so it is also its own Jacobian transpose.
    """
    v = vandermonde(r, degree)
    q, _ = np.linalg.qr(v)
    return (q @ q.T).astype(dtype)


def random_trajectory(seed, max_tx=DEFAULT_MAX_TX, max_rz=DEFAULT_MAX_RZ, degree=2):
    """Random quadratic trajectory whose curve stays within ``|tx| <= max_tx``
    and ``|rz| <= max_rz`` over the whole of ``s in [0, 1]``.

    Coefficients are drawn uniformly and rejected until the bound holds; the
    bound is checked exactly at the endpoints and the vertex.
    """
    rng = np.random.default_rng(seed)
    return PolynomialTrajectory(degree, _bounded_quadratic(rng, max_tx), _bounded_quadratic(rng, max_rz))


def _bounded_quadratic(rng, bound):
    if bound <= 0:
        return np.zeros(3)
    while True:
        c = rng.uniform(-1.0, 1.0, size=3) * np.array([bound, 2 * bound, 2 * bound])
        if _quadratic_abs_max(c) <= bound:
            return c


def _quadratic_abs_max(c):
    pts = [0.0, 1.0]
    if c[2] != 0:
        s = -c[1] / (2 * c[2])
        if 0 < s < 1:
            pts.append(s)
    s = np.array(pts)
    return float(np.max(np.abs(c[0] + c[1] * s + c[2] * s * s)))


# -- files --------------------------------------------------------------------

def write_motion_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "tx_px", "rz_rad"])
        for i, (t, a) in enumerate(zip(curve.tx, curve.rz)):
            w.writerow([i, repr(float(t)), repr(float(a))])


def read_motion_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"row", "tx_px", "rz_rad"}:
        raise ValueError(f"{path}: expected header row,tx_px,rz_rad")
    rows.sort(key=lambda d: int(d["row"]))
    if [int(d["row"]) for d in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: rows must be 0..r-1 without gaps")
    return MotionCurve([float(d["tx_px"]) for d in rows], [float(d["rz_rad"]) for d in rows])


def write_trajectory_json(path, traj):
    with open(path, "w") as fh:
        json.dump(traj.to_json(), fh, indent=2)
        fh.write("\n")


def read_trajectory_json(path):
    with open(path) as fh:
        return PolynomialTrajectory.from_json(json.load(fh))
