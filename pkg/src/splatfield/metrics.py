"""Quantitative evaluation: ATE RMSE with rigid alignment, PSNR, SSIM, pixel
accuracy and mIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

PSNR_CAP_DB = 100.0


def ate_rmse(estimated: np.ndarray, ground_truth: np.ndarray) -> float:
    """Absolute trajectory error in centimeters.

    Inputs are index-aligned arrays of camera centers, shape (T, 3), T >= 2.
    The best rigid transform (rotation + translation, no scale) mapping the
    estimate onto the ground truth is removed before taking the RMSE of the
    translational residuals.
    """
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DimensionError(f"trajectory shapes differ: {est.shape} vs {gt.shape}")
    if est.shape[0] < 2:
        raise DimensionError("need at least two poses")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    H = (est - mu_e).T @ (gt - mu_g)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_g - R @ mu_e
    resid = est @ R.T + t - gt
    return float(np.sqrt((resid ** 2).sum(axis=1).mean()) * 100.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 2D correlation, valid mode."""
    k = win.size
    H, W = img.shape
    tmp = np.empty((H, W - k + 1))
    for i, w in enumerate(win):
        if i == 0:
            np.multiply(img[:, i:W - k + 1 + i], w, out=tmp)
        else:
            tmp += img[:, i:W - k + 1 + i] * w
    out = np.zeros((H - k + 1, W - k + 1))
    for i, w in enumerate(win):
        out += tmp[i:H - k + 1 + i] * w
    return out


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), C1=0.01^2,
    C2=0.03^2, averaged over channels and (valid) pixels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise DimensionError("image smaller than the SSIM window")
    win = _gaussian_window(window_size, sigma)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        mx = _filter_valid(x, win)
        my = _filter_valid(y, win)
        mxx = _filter_valid(x * x, win)
        myy = _filter_valid(y * y, win)
        mxy = _filter_valid(x * y, win)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class SegScores:
    accuracy: float               # percent
    miou: float                   # percent
    per_class_iou: np.ndarray     # NaN for classes absent from GT and prediction


def seg_scores(pred: np.ndarray, gt: np.ndarray, num_classes: int,
               ignore: int = 255) -> SegScores:
    """Total pixel accuracy and mean class-wise IoU, in percent.

    Pixels labeled `ignore` in the ground truth are excluded.  Classes absent
    from both the ground truth and the prediction are excluded from the mIoU
    mean (their per-class IoU is NaN).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    valid = gt != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        return SegScores(0.0, 0.0, np.full(num_classes, np.nan))
    pv = pred[valid].astype(np.int64)
    gv = gt[valid].astype(np.int64)
    acc = 100.0 * float((pv == gv).mean())
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (gv, pv), 1)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    miou = 100.0 * float(np.nanmean(iou)) if np.any(denom > 0) else 0.0
    return SegScores(acc, miou, 100.0 * iou)
