"""Registration evaluation metrics: isotropic and anisotropic pose errors,
clipped chamfer distance, and registration recall."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluationError
from .geometry import PointCloud, RigidTransform

# stated in every report so the numbers are interpretable
CONVENTIONS = (
    "isotropic rotation error: angle of gt_R^-1 @ pred_R from arccos((trace-1)/2), degrees",
    "isotropic translation error: Euclidean norm of the translation difference (no conjugation)",
    "anisotropic errors: intrinsic Z-Y-X Euler angle differences / per-component translation "
    "differences, plain absolute values averaged over the three axes",
    "error means cover valid registrations only; recall is over all examples",
)


def mie(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """Isotropic errors: relative-rotation angle (degrees) and translation norm."""
    delta = gt.rotation.T @ pred.rotation
    cos = np.clip((np.trace(delta) - 1.0) / 2.0, -1.0, 1.0)
    rot_deg = float(np.degrees(np.arccos(cos)))
    trans = float(np.linalg.norm(pred.translation - gt.translation))
    return rot_deg, trans


def _euler_zyx_deg(rotation: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X Euler angles [z, y, x] in degrees.

    Near gimbal lock (|pitch| within 1e-6 of 90 degrees) the x rotation is
    absorbed into z, deterministically.
    """
    r = np.asarray(rotation, dtype=np.float64)
    sy = float(np.clip(-r[2, 0], -1.0, 1.0))
    y = math.asin(sy)
    if abs(abs(y) - math.pi / 2.0) < 1e-6:
        x = 0.0
        z = math.atan2(-r[0, 1], r[1, 1])
    else:
        z = math.atan2(r[1, 0], r[0, 0])
        x = math.atan2(r[2, 1], r[2, 2])
    return np.degrees([z, y, x])


def mae(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """Anisotropic errors: mean absolute Euler-angle and translation-component
    differences."""
    rot_deg = float(np.mean(np.abs(
        _euler_zyx_deg(pred.rotation) - _euler_zyx_deg(gt.rotation))))
    trans = float(np.mean(np.abs(pred.translation - gt.translation)))
    return rot_deg, trans


def ccd(x_hat: PointCloud, y: PointCloud, r: float = 0.1) -> float:
    """Clipped chamfer distance with the clip applied to squared distances."""
    if r <= 0:
        raise ValueError("clip distance must be positive")
    a = x_hat.positions
    b = y.positions
    d2 = np.empty((len(a), len(b)))
    for start in range(0, len(a), 512):
        stop = min(start + 512, len(a))
        diff = a[start:stop, None, :] - b[None, :, :]
        d2[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    forward = np.minimum(d2.min(axis=1), r).sum()
    backward = np.minimum(d2.min(axis=0), r).sum()
    return float(forward + backward)


@dataclass
class PairRecord:
    """Per-example evaluation record."""

    index: int
    valid: bool
    match_count: int
    mie_r: float
    mie_t: float
    mae_r: float
    mae_t: float
    ccd: float


def registration_recall(records, rot_thresh_deg: float, trans_thresh: float) -> float:
    """Fraction of ALL examples that are valid and within both MAE thresholds.

    Invalid registrations count as failures, keeping the number directly
    comparable across methods with different rejection rates.
    """
    if rot_thresh_deg <= 0 or trans_thresh <= 0:
        raise ValueError("thresholds must be positive")
    records = list(records)
    if not records:
        raise EmptyEvaluationError("registration recall over zero examples is undefined")
    hits = sum(1 for rec in records
               if rec.valid and rec.mae_r < rot_thresh_deg and rec.mae_t < trans_thresh)
    return hits / len(records)


def _mean_over_valid(records, attr: str) -> float:
    values = [getattr(rec, attr) for rec in records if rec.valid]
    return float(np.mean(values)) if values else float("nan")


@dataclass
class EvalReport:
    """Aggregated evaluation: error means over valid registrations, recall
    over all examples."""

    records: list
    rot_thresh_deg: float
    trans_thresh: float
    rr: float
    valid_fraction: float
    mean_mie_r: float
    mean_mie_t: float
    mean_mae_r: float
    mean_mae_t: float
    mean_ccd: float

    def to_dict(self) -> dict:
        return {
            "conventions": list(CONVENTIONS),
            "thresholds": {"rotation_deg": self.rot_thresh_deg,
                           "translation": self.trans_thresh},
            "aggregates": {
                "registration_recall": self.rr,
                "valid_fraction": self.valid_fraction,
                "mean_mie_r": self.mean_mie_r,
                "mean_mie_t": self.mean_mie_t,
                "mean_mae_r": self.mean_mae_r,
                "mean_mae_t": self.mean_mae_t,
                "mean_ccd": self.mean_ccd,
                "examples": len(self.records),
            },
            "records": [
                {
                    "index": rec.index,
                    "valid": rec.valid,
                    "match_count": rec.match_count,
                    "mie_r": rec.mie_r,
                    "mie_t": rec.mie_t,
                    "mae_r": rec.mae_r,
                    "mae_t": rec.mae_t,
                    "ccd": rec.ccd,
                }
                for rec in self.records
            ],
        }

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "valid", "match_count",
                             "mie_r", "mie_t", "mae_r", "mae_t", "ccd"])
            for rec in self.records:
                writer.writerow([rec.index, int(rec.valid), rec.match_count,
                                 repr(rec.mie_r), repr(rec.mie_t),
                                 repr(rec.mae_r), repr(rec.mae_t), repr(rec.ccd)])


def build_report(records, rot_thresh_deg: float = 1.0,
                 trans_thresh: float = 0.1) -> EvalReport:
    records = list(records)
    rr = registration_recall(records, rot_thresh_deg, trans_thresh)
    valid_fraction = sum(1 for rec in records if rec.valid) / len(records)
    return EvalReport(
        records=records,
        rot_thresh_deg=rot_thresh_deg,
        trans_thresh=trans_thresh,
        rr=rr,
        valid_fraction=valid_fraction,
        mean_mie_r=_mean_over_valid(records, "mie_r"),
        mean_mie_t=_mean_over_valid(records, "mie_t"),
        mean_mae_r=_mean_over_valid(records, "mae_r"),
        mean_mae_t=_mean_over_valid(records, "mae_t"),
        mean_ccd=_mean_over_valid(records, "ccd"),
    )
