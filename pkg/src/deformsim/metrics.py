"""Evaluation metrics and their report/mask file formats.

metric_cd is single-direction (ground truth toward prediction), so it is
deliberately asymmetric: a prediction that covers the truth scores zero even
if it also covers extra space. The calibration objective uses its own
bidirectional variant (see calibrate).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError


def metric_cd(pred, gt):
    """Mean distance from each ground-truth point to its nearest prediction."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise ValidationError("metric_cd: empty point set")
    d, _ = cKDTree(pred).query(gt)
    return float(np.mean(d))


def metric_track(pred_tracks, gt_tracks):
    """Mean Euclidean error over track points and frames."""
    pred_tracks = np.asarray(pred_tracks, dtype=np.float64)
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    if pred_tracks.shape != gt_tracks.shape:
        raise ValidationError(
            f"metric_track: shape mismatch {pred_tracks.shape} vs {gt_tracks.shape}"
        )
    return float(np.mean(np.linalg.norm(pred_tracks - gt_tracks, axis=-1)))


def metric_iou(pred_mask, gt_mask):
    """|intersection| / |union| of binary masks; 1.0 when both are empty."""
    pred_mask = np.asarray(pred_mask) > 0
    gt_mask = np.asarray(gt_mask) > 0
    if pred_mask.shape != gt_mask.shape:
        raise ValidationError(
            f"metric_iou: size mismatch {pred_mask.shape} vs {gt_mask.shape}"
        )
    union = np.count_nonzero(pred_mask | gt_mask)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(pred_mask & gt_mask) / union)


@dataclass
class MetricsRecord:
    """Per-frame metric rows plus aggregate means and step timing."""

    cd: list = field(default_factory=list)
    track: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    seconds_per_frame: float = 0.0
    failure_stage: str | None = None

    def validate(self):
        for name, vals in (("cd", self.cd), ("track", self.track), ("iou", self.iou)):
            arr = np.asarray(vals, dtype=np.float64)
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValidationError(f"metrics column {name} contains non-finite values")
        if any(not (0.0 <= v <= 1.0) for v in self.iou):
            raise ValidationError("iou values must lie in [0, 1]")

    def means(self):
        return {
            "cd": float(np.mean(self.cd)) if self.cd else float("nan"),
            "track": float(np.mean(self.track)) if self.track else float("nan"),
            "iou": float(np.mean(self.iou)) if self.iou else float("nan"),
        }

    def to_csv(self):
        lines = ["frame,cd,track,iou"]
        for t in range(len(self.cd)):
            track = self.track[t] if t < len(self.track) else float("nan")
            iou = self.iou[t] if t < len(self.iou) else float("nan")
            lines.append(f"{t},{self.cd[t]:.9g},{track:.9g},{iou:.9g}")
        return "\n".join(lines) + "\n"

    def to_summary(self):
        body = {
            "means": self.means(),
            "frames": len(self.cd),
            "seconds_per_frame": self.seconds_per_frame,
        }
        if self.failure_stage is not None:
            body["failure_stage"] = self.failure_stage
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_pgm(path, mask):
    """8-bit binary PGM; nonzero mask pixels map to 255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError("write_pgm expects a 2-d mask")
    data = np.where(mask > 0, 255, 0).astype("u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM file")
    width, height = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3][: width * height], dtype="u1")
    if data.size != width * height:
        raise ValidationError(f"{path}: truncated pixel data")
    return data.reshape(height, width)
