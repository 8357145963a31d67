"""Selective cross-entropy over labeled pixels, and per-class IoU.

The loss averages binary cross-entropy over labeled pixels only; UNKNOWN
pixels contribute nothing, not even zero terms. An all-UNKNOWN target is an
error so callers are forced to resample rather than train on silence.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NoLabelsError, ParameterError, ShapeError
from .morphology import as_binary
from .weak_labels import UNKNOWN

# probability clamp; keeps log() finite without distorting the gradient check
EPS = 1e-7


def _as_target(target) -> torch.Tensor:
    if isinstance(target, torch.Tensor):
        t = target.detach()
    else:
        t = torch.as_tensor(np.asarray(target))
    bad = (t != 0) & (t != 1) & (t != UNKNOWN)
    if bool(bad.any()):
        raise ParameterError("target values must be 0, 1, or UNKNOWN")
    return t


def labeled_mask(target) -> torch.Tensor:
    """Boolean tensor marking pixels that carry a 0/1 label."""
    return _as_target(target) != UNKNOWN


def sce_loss(target, probs: torch.Tensor) -> torch.Tensor:
    """Mean BCE over labeled pixels; differentiable w.r.t. probs.

    target: array or tensor with values in {0, 1, UNKNOWN}, any shape.
    probs: positive-class probabilities, same shape.
    Raises NoLabelsError when no pixel is labeled.
    """
    t = _as_target(target)
    if not isinstance(probs, torch.Tensor):
        probs = torch.as_tensor(np.asarray(probs))
    if tuple(t.shape) != tuple(probs.shape):
        raise ShapeError(f"target {tuple(t.shape)} vs probs {tuple(probs.shape)}")
    mask = t != UNKNOWN
    if not bool(mask.any()):
        raise NoLabelsError("no labeled pixels in target")
    p = probs[mask].clamp(EPS, 1 - EPS)
    y = t[mask].to(p.dtype)
    # plain log(1 - p), not log1p: keeps the value bit-comparable with a
    # straightforward per-pixel oracle in the same dtype
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


@dataclass(frozen=True)
class IoUResult:
    iou_pos: float
    iou_neg: float
    mean_iou: float


def iou(pred, gt) -> IoUResult:
    """Per-class intersection over union; a class absent from both scores 1."""
    p = as_binary(pred)
    g = as_binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")

    def one_class(c):
        pi, gi = p == c, g == c
        union = int(np.logical_or(pi, gi).sum())
        if union == 0:
            return 1.0
        return float(np.logical_and(pi, gi).sum() / union)

    pos, neg = one_class(1), one_class(0)
    return IoUResult(pos, neg, (pos + neg) / 2.0)
