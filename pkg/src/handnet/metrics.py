"""Keypoint evaluation: EPE, PCK, PCKh, AUC, and shift robustness.

Errors are Euclidean distances per keypoint, pooled across all records.
The median of an even-length pool is the lower-middle element, pinned so
independent implementations agree bit for bit. PCK thresholds are
inclusive (error <= threshold counts as correct).
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import FormatError, ShapeError

NUM_KEYPOINTS = 21

# default acceptance grids: absolute pixels and normalized units
PCK_THRESHOLDS = np.linspace(0.0, 30.0, 61)
PCKH_THRESHOLDS = np.linspace(0.0, 1.0, 51)


@dataclass
class KeypointSet:
    """21 (x, y) coordinates in pixels, optional per-point visibility."""

    points: np.ndarray
    visibility: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 2):
            raise ShapeError(
                f"keypoints must be ({NUM_KEYPOINTS}, 2), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("keypoints must be finite")
        self.points = pts
        if self.visibility is not None:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != (NUM_KEYPOINTS,):
                raise ShapeError(f"visibility must be ({NUM_KEYPOINTS},)")
            self.visibility = vis


@dataclass
class EvalRecord:
    prediction: KeypointSet
    ground_truth: KeypointSet
    norm_scale: float = None

    def __post_init__(self):
        if self.norm_scale is not None and not self.norm_scale > 0:
            raise ValueError(f"norm_scale must be positive, got {self.norm_scale}")


def _pooled_errors(records, normalized=False):
    if not records:
        raise ValueError("no records to evaluate")
    errs = []
    for r in records:
        d = np.linalg.norm(r.prediction.points - r.ground_truth.points, axis=1)
        if normalized:
            if r.norm_scale is None:
                raise ValueError("record missing norm_scale")
            d = d / r.norm_scale
        errs.append(d)
    return np.concatenate(errs)


def epe(records):
    """(mean, median) endpoint error in pixels over all keypoints."""
    errs = np.sort(_pooled_errors(records))
    return float(errs.mean()), float(errs[(errs.size - 1) // 2])


def _curve(errs, thresholds):
    t = np.asarray(thresholds, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty threshold list")
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    return (errs[:, None] <= t[None, :]).mean(axis=0)


def pck_curve(records, thresholds):
    """Fraction of keypoints with error <= each pixel threshold."""
    return _curve(_pooled_errors(records), thresholds)


def pckh_curve(records, normalized_thresholds):
    """PCK over errors divided by each record's norm_scale."""
    return _curve(_pooled_errors(records, normalized=True), normalized_thresholds)


def auc(curve, thresholds):
    """Trapezoidal integral of the curve, normalized by the range width."""
    c = np.asarray(curve, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if c.shape != t.shape:
        raise ShapeError(f"curve {c.shape} and thresholds {t.shape} differ")
    if c.size < 2:
        raise ValueError("need at least 2 curve points")
    widths = np.diff(t)
    area = float(((c[:-1] + c[1:]) * 0.5 * widths).sum())
    return area / float(t[-1] - t[0])


# --------------------------------------------------------- shift protocol

@dataclass
class ShiftReport:
    baseline_epe: tuple
    shifted_epe: tuple
    delta_mean: float
    delta_median: float
    n_samples: int
    n_skipped: int
    baseline_records: list = field(repr=False)
    shifted_records: list = field(repr=False)


def shift_image(img, dy, dx):
    """Translate content by (dy, dx) pixels, reflect-filling the border."""
    if dy == 0 and dx == 0:
        return img.copy()
    x4 = img[None] if img.ndim == 3 else img
    ph, pw = abs(int(dy)), abs(int(dx))
    xp = ops.reflect_pad(x4, ph, pw)
    h, w = img.shape[-3], img.shape[-2]
    out = xp[:, ph - dy : ph - dy + h, pw - dx : pw - dx + w, :]
    return out[0] if img.ndim == 3 else out


def shift_robustness(model, dataset, max_shift=20, seed=0):
    """Evaluate EPE unshifted vs under per-sample uniform random shifts.

    dataset: (images (n,S,S,C) array, ground truths (n,21,2) array).
    model: callable (images, gts) -> predictions (n,21,2) in pixels; the
    ground truth is passed along so oracle/debug models can echo it, real
    models must ignore it. Shifts are drawn per sample in [-max_shift,
    max_shift] for both axes; a sample whose shifted keypoints leave the
    frame is skipped and counted. Baseline metrics use the same surviving
    subset so the degradation delta is paired.
    """
    images, gts = dataset
    images = np.asarray(images)
    gts = np.asarray(gts, dtype=np.float64)
    n = images.shape[0]
    h, w = images.shape[1], images.shape[2]
    rng = np.random.default_rng(seed)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    keep, sh_imgs, sh_gts = [], [], []
    for i in range(n):
        dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
        g = gts[i] + np.array([dx, dy], dtype=np.float64)
        if (g[:, 0] < 0).any() or (g[:, 0] > w - 1).any() \
                or (g[:, 1] < 0).any() or (g[:, 1] > h - 1).any():
            continue
        keep.append(i)
        sh_imgs.append(shift_image(images[i], dy, dx))
        sh_gts.append(g)
    if not keep:
        raise ValueError("every sample was shifted out of frame")
    keep = np.array(keep)
    base_imgs, base_gts = images[keep], gts[keep]
    sh_imgs = np.stack(sh_imgs)
    sh_gts = np.stack(sh_gts)

    base_pred = np.asarray(model(base_imgs, base_gts), dtype=np.float64)
    sh_pred = np.asarray(model(sh_imgs, sh_gts), dtype=np.float64)
    base_records = [EvalRecord(KeypointSet(p), KeypointSet(g))
                    for p, g in zip(base_pred, base_gts)]
    sh_records = [EvalRecord(KeypointSet(p), KeypointSet(g))
                  for p, g in zip(sh_pred, sh_gts)]
    b_mean, b_med = epe(base_records)
    s_mean, s_med = epe(sh_records)
    return ShiftReport(
        baseline_epe=(b_mean, b_med), shifted_epe=(s_mean, s_med),
        delta_mean=s_mean - b_mean, delta_median=s_med - b_med,
        n_samples=len(keep), n_skipped=n - len(keep),
        baseline_records=base_records, shifted_records=sh_records)


# -------------------------------------------------------------- ingestion

def parse_record_line(line, lineno=0):
    """One record: id, 21 predicted pairs, 21 true pairs, optional scale."""
    fields = line.split()
    if len(fields) not in (1 + 84, 1 + 85):
        raise FormatError(
            f"line {lineno}: expected 85 or 86 fields, got {len(fields)}")
    try:
        vals = [float(v) for v in fields[1:]]
    except ValueError as err:
        raise FormatError(f"line {lineno}: {err}") from None
    pred = KeypointSet(np.array(vals[:42]).reshape(NUM_KEYPOINTS, 2))
    gt = KeypointSet(np.array(vals[42:84]).reshape(NUM_KEYPOINTS, 2))
    scale = vals[84] if len(vals) == 85 else None
    return fields[0], EvalRecord(pred, gt, norm_scale=scale)


def read_records(path):
    """Parse a line-delimited record file -> (ids, records)."""
    ids, records = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rid, rec = parse_record_line(line, lineno)
            ids.append(rid)
            records.append(rec)
    if not records:
        raise FormatError(f"{path}: no records")
    return ids, records


def write_curve_csv(path, thresholds, values):
    with open(path, "w") as f:
        f.write("threshold,value\n")
        for t, v in zip(thresholds, values):
            f.write(f"{t:.10g},{v:.10g}\n")
