"""Evaluation metrics: PSNR, SSIM, depth L1, ATE RMSE with rigid alignment,
and mIoU/mAcc for label maps."""

from dataclasses import dataclass

import numpy as np

from . import losses

PSNR_CAP_DB = 100.0


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    psnr: float | None = None
    ssim: float | None = None
    depth_l1: float | None = None
    ate_rmse: float | None = None
    miou: float | None = None
    macc: float | None = None
    mean_cossim: float | None = None

    def as_dict(self):
        return {k: v for k, v in vars(self).items() if v is not None}

    def to_text(self):
        return "".join(f"{k}={v:.6g}\n" for k, v in self.as_dict().items())

    @staticmethod
    def from_text(text):
        rep = EvalReport()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            setattr(rep, k.strip(), float(v))
        return rep

    def table(self):
        rows = self.as_dict()
        if not rows:
            return "(empty report)"
        width = max(len(k) for k in rows)
        lines = [f"{k.ljust(width)} : {v:.6g}" for k, v in rows.items()]
        return "\n".join(lines)


def psnr(a, b):
    """10*log10(1/MSE) for images in [0,1]; capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr shapes {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def ssim(a, b, window=11, c1=0.01 ** 2, c2=0.03 ** 2):
    return losses.ssim(a, b, window, c1, c2)


def depth_l1(d_pred, d_gt):
    """Mean |pred - gt| over pixels with valid (positive) ground truth."""
    value, _ = losses.loss_depth(d_pred, d_gt)
    return value


def _match_trajectories(estimated, reference, max_dt=0.010):
    est = [(t, p) for t, p in estimated]
    ref = [(t, p) for t, p in reference]
    pairs = []
    j = 0
    for t, p in est:
        while j + 1 < len(ref) and abs(ref[j + 1][0] - t) <= abs(ref[j][0] - t):
            j += 1
        if abs(ref[j][0] - t) <= max_dt:
            pairs.append((p.translation, ref[j][1].translation))
    return pairs


def align_rigid(src, dst, with_scale=False):
    """Closed-form alignment (Horn / orthogonal Procrustes) of point sets:
    returns (s, R, t) minimizing ||s*R*src + t - dst||."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    H = cs.T @ cd
    U, S, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    if with_scale:
        var = (cs ** 2).sum()
        s = float((S @ np.diag(D)).sum() / var) if var > 0 else 1.0
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(estimated, reference, with_scale=False, max_dt=0.010):
    """RMSE of translational residuals after rigid SE(3) alignment of the
    estimated trajectory onto the reference. Trajectories are iterables of
    (timestamp, Pose); timestamps matched within max_dt."""
    pairs = _match_trajectories(list(estimated), list(reference), max_dt)
    if len(pairs) < 3:
        raise MetricError(f"only {len(pairs)} matched pose pairs, need >= 3")
    src = np.array([p[0] for p in pairs])
    dst = np.array([p[1] for p in pairs])
    s, R, t = align_rigid(src, dst, with_scale)
    resid = (s * (R @ src.T).T + t) - dst
    return float(np.sqrt((resid ** 2).sum(axis=1).mean()))


def miou_macc(pred_labels, gt_labels, num_classes, ignore_value=None):
    """Per-class IoU and recall. Classes absent from the ground truth are
    excluded from both means. Returns (miou, macc, per_class_iou) with NaN
    marking excluded classes."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise MetricError(f"label shapes {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool)
    if ignore_value is not None:
        mask = gt != ignore_value
    ious, recalls = [], []
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        gt_c = (gt == c) & mask
        pred_c = (pred == c) & mask
        if not gt_c.any():
            continue
        tp = np.count_nonzero(gt_c & pred_c)
        fp = np.count_nonzero(pred_c & ~gt_c)
        fn = np.count_nonzero(gt_c & ~pred_c)
        iou = tp / (tp + fp + fn)
        per_class[c] = iou
        ious.append(iou)
        recalls.append(tp / (tp + fn))
    if not ious:
        return 0.0, 0.0, per_class
    return float(np.mean(ious)), float(np.mean(recalls)), per_class
