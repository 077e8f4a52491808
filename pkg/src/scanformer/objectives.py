"""Box regression losses, the selection-sparsity regularizer and REC metrics.

Boxes are normalized ``(x, y, w, h)`` with ``(x, y)`` the center.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .errors import InputError
from .numerics import Tensor

LAMBDA_SPARSE = 0.05
AREA_FLOOR = 1e-8


class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)


def scale_weights(scales: int) -> list[float]:
    """Per-scale loss weights ``4^(l - (S - 1))``: the finest scale weighs 1."""
    return [4.0 ** (l - (scales - 1)) for l in range(scales)]


def sparsity_targets(scales: int) -> list[float]:
    """Target kept ratio ``2^-l`` for scales ``1 .. S-1``."""
    return [2.0 ** -l for l in range(1, scales)]


# -- plain-float metrics -------------------------------------------------

def _areas(a, b):
    ax0, ay0, ax1, ay1 = BBox(*a).corners()
    bx0, by0, bx1, by1 = BBox(*b).corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a, b) -> float:
    inter, union, _ = _areas(a, b)
    return 0.0 if union <= 0 else inter / union


def giou(a, b) -> float:
    inter, union, hull = _areas(a, b)
    if hull <= 0:
        return 1.0 if union <= 0 else inter / union
    i = 0.0 if union <= 0 else inter / union
    return i - (hull - union) / hull


def iou_batch(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorized IoU over ``(N, 4)`` arrays of boxes."""
    p0, p1 = pred[:, :2] - pred[:, 2:] / 2, pred[:, :2] + pred[:, 2:] / 2
    g0, g1 = gt[:, :2] - gt[:, 2:] / 2, gt[:, :2] + gt[:, 2:] / 2
    wh = np.clip(np.minimum(p1, g1) - np.maximum(p0, g0), 0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def acc_at_05(preds: Sequence, gts: Sequence) -> float:
    """Percentage of predictions whose IoU with the ground truth is strictly above 0.5."""
    if len(preds) != len(gts):
        raise InputError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if len(preds) == 0:
        raise InputError("Acc@0.5 of an empty set is undefined")
    hits = sum(iou(p, g) > 0.5 for p, g in zip(preds, gts))
    return 100.0 * hits / len(preds)


# -- differentiable losses -----------------------------------------------

def _cols(t: Tensor):
    return t[:, 0], t[:, 1], t[:, 2], t[:, 3]


def giou_tensor(pred: Tensor, gt) -> Tensor:
    """Row-wise GIoU between ``(B, 4)`` predictions and constant or tensor targets."""
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    px, py, pw, ph = _cols(pred)
    gx, gy, gw, gh = _cols(gt)
    px0, px1, py0, py1 = px - pw * 0.5, px + pw * 0.5, py - ph * 0.5, py + ph * 0.5
    gx0, gx1, gy0, gy1 = gx - gw * 0.5, gx + gw * 0.5, gy - gh * 0.5, gy + gh * 0.5
    iw = nx.clip(nx.minimum(px1, gx1) - nx.maximum(px0, gx0), 0.0, None)
    ih = nx.clip(nx.minimum(py1, gy1) - nx.maximum(py0, gy0), 0.0, None)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    hull = (nx.maximum(px1, gx1) - nx.minimum(px0, gx0)) * (nx.maximum(py1, gy1) - nx.minimum(py0, gy0))
    union_c = nx.maximum(union, AREA_FLOOR)
    hull_c = nx.maximum(hull, AREA_FLOOR)
    return inter / union_c - (hull - union) / hull_c


def l1_tensor(pred: Tensor, gt) -> Tensor:
    """Mean absolute coordinate error per row, ``(B,)``."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    return nx.abs_(pred - gt).mean(axis=-1)


def detection_loss(boxes: Sequence[Tensor], gt, weights: Sequence[float] | None = None) -> Tensor:
    """``sum_l w_l * (L1 + 1 - GIoU)`` averaged over the batch.

    ``boxes`` holds one ``(B, 4)`` prediction per scale, coarse first.
    """
    weights = scale_weights(len(boxes)) if weights is None else weights
    gt = np.asarray(gt, dtype=boxes[0].dtype).reshape(-1, 4)
    total = None
    for w, b in zip(weights, boxes):
        b = b if b.ndim == 2 else nx.reshape(b, (1, 4))
        term = (l1_tensor(b, gt) + (1.0 - giou_tensor(b, gt))) * w
        total = term if total is None else total + term
    return total.mean()


def sparsity_loss(factors: Sequence, betas: Sequence[float] | None = None,
                  lam: float = LAMBDA_SPARSE) -> Tensor:
    """``lam * sum_{l>=1} (mean_i s_i^l - beta^l)^2``, averaged over the batch.

    ``factors`` holds the per-scale ``(B, N_l)`` selection factors, coarse
    first; the coarsest entry is ignored.
    """
    betas = sparsity_targets(len(factors)) if betas is None else betas
    total = None
    for s, beta in zip(factors[1:], betas):
        s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
        if s.ndim == 1:
            s = nx.reshape(s, (1, s.shape[0]))
        dev = s.mean(axis=-1) - beta
        term = (dev * dev).mean()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=np.float32))
    return total * lam


def metric_rows(ious, boxes, ratios, ids=None) -> str:
    """Per-sample CSV: id, IoU per scale, box per scale, selection ratio per scale.

    ``ious`` and ``ratios`` are ``(n, S)``, ``boxes`` is ``(n, S, 4)``.
    """
    ious, boxes, ratios = np.asarray(ious), np.asarray(boxes), np.asarray(ratios)
    n, scales = ious.shape
    ids = range(n) if ids is None else ids
    head = (["sample"] + [f"iou{l}" for l in range(scales)]
            + [f"box{l}_{c}" for l in range(scales) for c in "xywh"]
            + [f"ratio{l}" for l in range(scales)])
    lines = [",".join(head)]
    for i, sid in enumerate(ids):
        vals = [str(sid)] + [f"{v:.6f}" for v in ious[i]] + [f"{v:.6f}" for v in boxes[i].ravel()] \
            + [f"{v:.6f}" for v in ratios[i]]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
