"""Binary segmentation evaluation: MAE, BER, weighted F-beta, S-measure, E-measure.

Per-image metrics follow the originating definitions of the structure measure,
the enhanced-alignment measure, and the dependency-weighted F-measure, with
two conventions fixed by this package's contracts:

  * the Gaussian error-spreading step of the weighted F-measure uses symmetric
    (reflect) boundary handling, so a fully inverted prediction scores exactly 0
    regardless of where the ground truth touches the border;
  * the enhanced-alignment score is the plain mean of the enhanced matrix, so a
    perfectly aligned binarized prediction scores 1 at any image size.

Predictions are dense maps in [0, 1]; ground truth is strictly binary.
"""

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError, UndefinedMetricError

_EPS = float(np.finfo(np.float64).eps)


def _as_map(arr, name):
    a = np.asarray(arr, dtype=np.float64)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a single-channel map, got shape {np.asarray(arr).shape}")
    return a


def _pair(pred, gt):
    p = _as_map(pred, "pred")
    g = _as_map(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} does not match gt shape {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("gt must be binary")
    return p, g


def mae(pred, gt):
    """Mean absolute difference."""
    p, g = _pair(pred, gt)
    return float(np.abs(p - g).mean())


def confusion_counts(pred, gt, threshold=0.5):
    p, g = _pair(pred, gt)
    pb = p >= threshold
    gb = g == 1
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    return tp, fp, tn, fn


def ber_from_counts(tp, fp, tn, fn):
    """Balanced error rate in [0, 100]; an absent class contributes recall 1."""
    tp, fp, tn, fn = int(tp), int(fp), int(tn), int(fn)
    pos_recall = tp / (tp + fn) if tp + fn else 1.0
    neg_recall = tn / (tn + fp) if tn + fp else 1.0
    return float(100.0 * (1.0 - 0.5 * (pos_recall + neg_recall)))


def ber(pred, gt, threshold=0.5):
    return ber_from_counts(*confusion_counts(pred, gt, threshold))


# ---------------------------------------------------------------------------
# weighted F-beta

def _gauss_kernel(shape=(7, 7), sigma=5.0):
    m, n = [(s - 1) / 2.0 for s in shape]
    yy, xx = np.ogrid[-m:m + 1, -n:n + 1]
    h = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    h[h < np.finfo(np.float64).eps * h.max()] = 0.0
    return h / h.sum()


def _nearest_foreground(gb, chunk=4096):
    """Euclidean distance to the foreground and the nearest foreground pixel.

    Ties go to the first foreground pixel in row-major order, which makes the
    assignment fully specified (independent of any library's internal order).
    """
    h, w = gb.shape
    fy, fx = np.nonzero(gb)                      # row-major
    yy, xx = np.mgrid[0:h, 0:w]
    flat_y, flat_x = yy.ravel(), xx.ravel()
    dist = np.empty(h * w)
    near = np.empty(h * w, dtype=int)
    for lo in range(0, h * w, chunk):
        sl = slice(lo, min(lo + chunk, h * w))
        d2 = ((flat_y[sl, None] - fy[None, :]) ** 2
              + (flat_x[sl, None] - fx[None, :]) ** 2)
        best = d2.argmin(axis=1)                 # argmin takes the first minimum
        near[sl] = best
        dist[sl] = np.sqrt(d2[np.arange(d2.shape[0]), best])
    return dist.reshape(h, w), (fy[near].reshape(h, w), fx[near].reshape(h, w))


def weighted_fbeta(pred, gt, beta2=1.0):
    """Dependency-weighted F-measure (beta^2 = 1, sigma = 5 window 7, decay base 0.5).

    The Gaussian spreading step uses symmetric (reflect) boundary handling.
    """
    p, g = _pair(pred, gt)
    gb = g == 1
    if not gb.any():
        raise UndefinedMetricError("weighted F-beta is undefined for empty ground truth")

    dist, (ny, nx) = _nearest_foreground(gb)
    err = np.abs(p - g)
    err_t = err.copy()
    err_t[~gb] = err[ny[~gb], nx[~gb]]           # error at nearest foreground pixel
    spread = ndimage.correlate(err_t, _gauss_kernel(), mode="reflect")
    min_err = np.where(gb & (spread < err), spread, err)
    decay = np.where(gb, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_err * decay

    tpw = gb.sum() - ew[gb].sum()
    fpw = ew[~gb].sum()
    recall = 1.0 - ew[gb].mean()
    precision = tpw / (_EPS + tpw + fpw)
    num = (1.0 + beta2) * recall * precision
    if num == 0:
        return 0.0
    return float(num / (_EPS + recall + beta2 * precision))


# ---------------------------------------------------------------------------
# S-measure

def _object_score(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(pred, gb):
    u = gb.mean()
    o_fg = _object_score(pred[gb])
    o_bg = _object_score((1.0 - pred)[~gb])
    return u * o_fg + (1.0 - u) * o_bg


def _cut_points(gb):
    # centroid-based split; cuts kept strictly interior so no quadrant is empty
    h, w = gb.shape
    if gb.sum() == 0:
        cx, cy = w / 2.0, h / 2.0
    else:
        ys, xs = np.nonzero(gb)
        cy, cx = ys.mean(), xs.mean()
    x = int(np.clip(round(cx) + 1, 1, w - 1))
    y = int(np.clip(round(cy) + 1, 1, h - 1))
    return x, y


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def _s_region(pred, gb):
    x, y = _cut_points(gb)
    h, w = gb.shape
    g = gb.astype(np.float64)
    quads = [
        (pred[:y, :x], g[:y, :x], x * y),
        (pred[:y, x:], g[:y, x:], (w - x) * y),
        (pred[y:, :x], g[y:, :x], x * (h - y)),
        (pred[y:, x:], g[y:, x:], (w - x) * (h - y)),
    ]
    total = float(h * w)
    return sum(_ssim(pq, gq) * (area / total) for pq, gq, area in quads)


def s_measure(pred, gt, alpha=0.5):
    """Structure measure: alpha-blend of object- and region-aware similarity."""
    p, g = _pair(pred, gt)
    gb = g == 1
    y = gb.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    score = alpha * _s_object(p, gb) + (1.0 - alpha) * _s_region(p, gb)
    return float(max(score, 0.0))


# ---------------------------------------------------------------------------
# E-measure

def e_measure(pred, gt):
    """Enhanced-alignment measure with the adaptive (2x mean) threshold."""
    p, g = _pair(pred, gt)
    th = min(2.0 * p.mean(), 1.0)
    fm = (p >= th).astype(np.float64)
    n_fg = g.sum()
    if n_fg == 0:
        enhanced = 1.0 - fm
    elif n_fg == g.size:
        enhanced = fm
    else:
        afm = fm - fm.mean()
        agt = g - g.mean()
        align = 2.0 * agt * afm / (agt * agt + afm * afm + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# ---------------------------------------------------------------------------
# dataset aggregation

@dataclass
class MetricReport:
    s_alpha: float
    e_phi: float
    f_beta_w: float
    mae: float
    ber: float
    n_images: int
    fbeta_skipped: int = 0   # empty-gt images excluded from f_beta_w (not serialized)

    def to_dict(self):
        return {
            "s_alpha": self.s_alpha,
            "e_phi": self.e_phi,
            "f_beta_w": self.f_beta_w,
            "mae": self.mae,
            "ber": self.ber,
            "n_images": self.n_images,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def table(self):
        rows = [("metric", "value")] + [
            (k, f"{v:.6f}" if isinstance(v, float) else str(v))
            for k, v in self.to_dict().items()
        ]
        width = max(len(r[0]) for r in rows) + 2
        return "\n".join(f"{name:<{width}}{value}" for name, value in rows) + "\n"


def _per_image(args):
    sample_id, pred, gt = args
    row = {
        "id": sample_id,
        "mae": mae(pred, gt),
        "s": s_measure(pred, gt),
        "e": e_measure(pred, gt),
        "conf": confusion_counts(pred, gt),
        "fbw": None,
    }
    try:
        row["fbw"] = weighted_fbeta(pred, gt)
    except UndefinedMetricError:
        pass
    return row


def evaluate_pairs(pairs):
    """Aggregate per-image metrics over (id, pred, gt) triples.

    Means are taken per image; BER comes from the dataset-accumulated confusion
    matrix. Images with empty ground truth are excluded from weighted F-beta
    (with a warning) but contribute to every other metric via the degenerate
    conventions. Iteration order is deterministic: sorted by id.
    """
    items = sorted(pairs, key=lambda t: t[0])
    if not items:
        raise DataError("no image pairs to evaluate")
    workers = int(os.environ.get("TSSAM_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_per_image, items))
    else:
        rows = [_per_image(item) for item in items]

    conf = np.sum([r["conf"] for r in rows], axis=0)
    fbw_vals = [r["fbw"] for r in rows if r["fbw"] is not None]
    skipped = len(rows) - len(fbw_vals)
    if skipped:
        warnings.warn(f"{skipped} image(s) had empty ground truth; excluded from weighted F-beta")
    return MetricReport(
        s_alpha=float(np.mean([r["s"] for r in rows])),
        e_phi=float(np.mean([r["e"] for r in rows])),
        f_beta_w=float(np.mean(fbw_vals)) if fbw_vals else 0.0,
        mae=float(np.mean([r["mae"] for r in rows])),
        ber=ber_from_counts(*conf),
        n_images=len(rows),
        fbeta_skipped=skipped,
    )


def _read_gray(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


def evaluate_mask_folders(pred_dir, gt_dir, allow_missing=False):
    """Evaluate prediction masks against ground-truth masks, paired by filename stem.

    Both folders hold 8-bit single-channel images; values are rescaled to
    [0, 1] and the ground truth is binarized at 0.5.
    """
    preds = {os.path.splitext(f)[0]: os.path.join(pred_dir, f)
             for f in os.listdir(pred_dir) if f.lower().endswith(".png")}
    gts = {os.path.splitext(f)[0]: os.path.join(gt_dir, f)
           for f in os.listdir(gt_dir) if f.lower().endswith(".png")}
    missing = sorted(set(preds) ^ set(gts))
    if missing and not allow_missing:
        raise DataError(f"unpaired prediction/gt files: {missing}")
    if missing:
        warnings.warn(f"skipping {len(missing)} unpaired file(s): {missing}")
    common = sorted(set(preds) & set(gts))
    if not common:
        raise DataError("no prediction/gt pairs found")

    def load(stem):
        pred = _read_gray(preds[stem])
        gt = (_read_gray(gts[stem]) >= 0.5).astype(np.float64)
        return stem, pred, gt

    return evaluate_pairs([load(stem) for stem in common])
