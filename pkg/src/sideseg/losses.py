"""Training objectives on raw logits.

BCE + IoU for camouflage/saliency segmentation, class-balanced BCE for shadow
detection. Everything is computed from logits in numerically stable form; no
explicit sigmoid-then-log anywhere.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

IOU_EPS = 1.0


@dataclass
class LossValue:
    total: "ad.Tensor"
    components: dict

    def numbers(self):
        out = {name: float(t.data) for name, t in self.components.items()}
        out["total"] = float(self.total.data)
        return out


def _as_logits(logits):
    return logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)


def _check_target(target):
    target = np.asarray(target)
    if not np.all((target == 0) | (target == 1)):
        bad = target[(target != 0) & (target != 1)].flat[0]
        raise ValueError(f"target must be binary, found value {bad!r}")
    return target


def _sigmoid_array(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_elements(z, y):
    """Per-element BCE from logits, as a primitive graph node.

    Forward uses the max/log1p form for stability. The backward is the exact
    closed form sigmoid(z) - y: composing the stable form out of relu/abs
    nodes would plant fake kinks at z = 0 (dead decoder pixels emit exactly
    zero logits, so that point is actually reached).
    """
    zd = z.data
    elem = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))

    def back(g):
        ad._accum(z, g * (_sigmoid_array(zd) - y))

    return ad._make(elem, (z,), back)


def _weighted_bce_elements(z, y, alpha):
    """alpha * y * softplus(-z) + (1 - alpha) * (1 - y) * softplus(z), exact backward."""
    zd = z.data
    log_term = np.log1p(np.exp(-np.abs(zd)))
    loss_pos = np.maximum(-zd, 0.0) + log_term
    loss_neg = np.maximum(zd, 0.0) + log_term
    elem = alpha * y * loss_pos + (1.0 - alpha) * (1.0 - y) * loss_neg

    def back(g):
        sig = _sigmoid_array(zd)
        ad._accum(z, g * (alpha * y * (sig - 1.0) + (1.0 - alpha) * (1.0 - y) * sig))

    return ad._make(elem, (z,), back)


def bce_loss(logits, target):
    """Mean binary cross entropy: mean(max(z, 0) - z*y + log(1 + exp(-|z|)))."""
    z = _as_logits(logits)
    y = _check_target(target).astype(z.data.dtype)
    return ad.tmean(_bce_elements(z, y))


def iou_loss(logits, target):
    """Soft IoU loss per image, then mean: 1 - (sum(p*y)+1)/(sum(p)+sum(y)-sum(p*y)+1)."""
    z = _as_logits(logits)
    y = _check_target(target).astype(z.data.dtype)
    p = ad.sigmoid(z)
    axes = tuple(range(1, z.data.ndim))
    inter = ad.tsum(ad.mul(p, ad.Tensor(y)), axis=axes)
    p_sum = ad.tsum(p, axis=axes)
    y_sum = ad.Tensor(y.sum(axis=axes))
    union = ad.sub(ad.add(p_sum, y_sum), inter)
    frac = ad.div(ad.add(inter, IOU_EPS), ad.add(union, IOU_EPS))
    return ad.tmean(1.0 - frac)


def bce_iou_loss(logits, target):
    """Equally weighted BCE + IoU compound loss."""
    bce = bce_loss(logits, target)
    iou = iou_loss(logits, target)
    return LossValue(total=ad.add(bce, iou), components={"bce": bce, "iou": iou})


def bbce_loss(logits, target):
    """Class-balanced BCE with alpha = n_neg / (n_pos + n_neg), per batch.

    Degenerate all-positive / all-negative targets fall back to plain BCE.
    """
    z = _as_logits(logits)
    y = _check_target(target).astype(z.data.dtype)
    n_pos = float(y.sum())
    n_neg = float(y.size - y.sum())
    if n_pos == 0 or n_neg == 0:
        return bce_loss(z, y)
    alpha = n_neg / (n_pos + n_neg)
    return ad.tmean(_weighted_bce_elements(z, y, alpha))


def loss_for_task(task):
    if task in ("cod", "sod"):
        return bce_iou_loss
    if task == "shadow":
        def wrapped(logits, target):
            val = bbce_loss(logits, target)
            return LossValue(total=val, components={"bbce": val})
        return wrapped
    raise ValueError(f"unknown task {task!r}")
