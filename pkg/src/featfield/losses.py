"""Training losses: color reconstruction, feature distillation, coordinate cycle.

All three are means of squared L2 distances so their weights do not depend
on the batch size.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

import featfield.diffengine as de
from featfield.diffengine import Tensor
from featfield.errors import ChannelMismatch, LengthMismatch

DEFAULT_LAMBDA = 0.25


def _rows(x, dtype=None) -> Tensor:
    t = de.as_tensor(x, dtype=dtype)
    if t.ndim == 1:
        t = de.reshape(t, (1, -1))
    return t


def _mean_sq_dist(pred, target, name: str, check_channels: bool = False,
                  weights=None) -> Tensor:
    pred = _rows(pred)
    target = _rows(target, dtype=pred.dtype)
    if pred.shape[0] != target.shape[0]:
        raise LengthMismatch(f"{name}: {pred.shape[0]} predictions vs {target.shape[0]} targets")
    if pred.shape[1] != target.shape[1]:
        exc = ChannelMismatch if check_channels else LengthMismatch
        raise exc(f"{name}: {pred.shape[1]} channels vs {target.shape[1]}")
    if pred.shape[0] == 0:
        raise LengthMismatch(f"{name}: need at least one element")
    per = de.sum(de.square(pred - target), axis=1)
    if weights is None:
        return de.mean(per)
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=pred.dtype)
    w = w.reshape(-1)
    if w.shape[0] != pred.shape[0]:
        raise LengthMismatch(f"{name}: {w.shape[0]} weights for {pred.shape[0]} samples")
    # weights act as constants; gradients do not flow into the renderer through them
    return de.mean(per * w)


def loss_rec(pred_colors, gt_colors) -> Tensor:
    return _mean_sq_dist(pred_colors, gt_colors, "loss_rec")


def loss_distill(pred_features, teacher_features) -> Tensor:
    return _mean_sq_dist(pred_features, teacher_features, "loss_distill", check_channels=True)


def loss_coord(sample_points, coord_preds, weights=None) -> Tensor:
    """Mean squared distance between quadrature points and regressed coordinates.

    ``weights`` (per-sample compositing weights) switches to the weighted form.
    """
    pred = _rows(coord_preds)
    return _mean_sq_dist(pred, np.asarray(sample_points).reshape(-1, 3), "loss_coord",
                         weights=weights)


@dataclass
class LossBreakdown:
    rec: Tensor
    distill: Tensor
    coord: Tensor
    total: Tensor
    lambda_distill: float = DEFAULT_LAMBDA
    lambda_coord: float = DEFAULT_LAMBDA

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("rec", "distill", "coord", "total")}


def total_loss(rec, distill=None, coord=None, lambda_distill: float = DEFAULT_LAMBDA,
               lambda_coord: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """Weighted sum. A missing term counts as a constant zero and adds nothing to the graph."""
    if lambda_distill < 0 or lambda_coord < 0:
        raise ValueError("loss weights must be non-negative")
    rec = de.as_tensor(rec)
    zero = Tensor(np.zeros((), dtype=rec.dtype))
    distill = zero if distill is None else de.as_tensor(distill)
    coord = zero if coord is None else de.as_tensor(coord)
    total = rec
    if distill is not zero:
        total = total + distill * lambda_distill
    if coord is not zero:
        total = total + coord * lambda_coord
    return LossBreakdown(rec, distill, coord, total, lambda_distill, lambda_coord)


LOG_FIELDS = ("step", "rec", "distill", "coord", "total", "wall_ms")


class LossLog:
    """Append-only CSV training log."""

    def __init__(self, path, append: bool = False):
        self.path = os.fspath(path)
        exists = append and os.path.exists(self.path)
        self._fh = open(self.path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(LOG_FIELDS)

    def write(self, step: int, breakdown: LossBreakdown, wall_ms: float) -> None:
        v = breakdown.values()
        self._writer.writerow([step, repr(v["rec"]), repr(v["distill"]), repr(v["coord"]),
                               repr(v["total"]), f"{wall_ms:.1f}"])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in LOG_FIELDS}
