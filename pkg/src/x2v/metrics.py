"""Quantitative checks: PSNR against ground truth and a temporal-consistency
ratio built on the simulator's exact reprojection correspondences.

TC = warping loss of the candidate video divided by the warping loss of the
ground-truth video under the same correspondences; 1.0 means parity with
ground truth, larger means more flicker.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for frames in [0, 1]; identical frames cap at 99 dB."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes disagree {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def bilinear_sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample img [C, h, w] at float (px, py) coords [h, w, 2]."""
    c, h, w = img.shape
    px = np.clip(coords[:, :, 0], 0.0, w - 1.0)
    py = np.clip(coords[:, :, 1], 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[None]
    fy = (py - y0)[None]
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def warping_loss(frames: np.ndarray, correspondences: Sequence) -> float:
    """Mean |frame_{i+1}(warp(p)) - frame_i(p)| over valid pixels."""
    if len(correspondences) != len(frames) - 1:
        raise ShapeError(f"{len(correspondences)} correspondences for {len(frames)} frames")
    total, count = 0.0, 0
    for i, (coords, valid) in enumerate(correspondences):
        warped = bilinear_sample(frames[i + 1], coords)
        diff = np.abs(warped - frames[i])
        total += float(diff[:, valid].sum())
        count += int(valid.sum()) * frames.shape[1]
    if count == 0:
        return 0.0
    return total / count


def temporal_consistency(frames: np.ndarray, gt_frames: np.ndarray,
                         correspondences: Sequence) -> float:
    """Warping loss of `frames` normalized by the ground truth's own."""
    if frames.shape != gt_frames.shape:
        raise ShapeError(f"frames {frames.shape} vs ground truth {gt_frames.shape}")
    num = warping_loss(frames, correspondences)
    den = warping_loss(gt_frames, correspondences)
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


@dataclass
class EvalReport:
    psnr_mean: float
    tc_score: float
    per_frame_psnr: list[float]

    def __post_init__(self):
        if self.psnr_mean > PSNR_CAP or any(p > PSNR_CAP for p in self.per_frame_psnr):
            raise ShapeError("psnr exceeds the 99 dB cap")
        if self.tc_score < 0.0:
            raise ShapeError("tc_score must be >= 0")

    def to_json(self) -> str:
        return json.dumps({
            "psnr_mean": self.psnr_mean,
            "tc_score": self.tc_score,
            "per_frame_psnr": self.per_frame_psnr,
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        return EvalReport(d["psnr_mean"], d["tc_score"], list(d["per_frame_psnr"]))


def evaluate_frames(frames: np.ndarray, gt_frames: np.ndarray,
                    correspondences: Sequence) -> EvalReport:
    per_frame = [psnr(f, g) for f, g in zip(frames, gt_frames)]
    tc = temporal_consistency(frames, gt_frames, correspondences)
    return EvalReport(float(np.mean(per_frame)), float(tc), per_frame)
