"""Grad-CAM and occlusion saliency over flow windows."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .dataset import ActivityClassId
from .echo import FACE_LAGS, FlowWindow
from .errors import DataError, NumericalError
from .learn.network import Network
from .learn.train import predict_proba


@dataclass
class SaliencyMap:
    """``values`` is the full-resolution map in [0, 1]; ``coarse`` the raw grid it came from."""

    values: np.ndarray
    coarse: np.ndarray
    class_id: ActivityClassId
    method: str
    degenerate: bool = False

    def band_mass(self, rows: int = FACE_LAGS) -> float:
        """Share of total saliency in the first ``rows`` lag rows."""
        total = float(self.values.sum())
        return float(self.values[:rows].sum()) / total if total > 0 else 0.0


def _resize_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    # pixel-centre aligned linear interpolation, edges clamped
    n_in = a.shape[axis]
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - t) + np.take(a, hi, axis=axis) * t


def bilinear_resize(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return _resize_axis(_resize_axis(np.asarray(a, dtype=np.float64), shape[0], 0), shape[1], 1)


def _normalize(m: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(m.min()), float(m.max())
    if not np.all(np.isfinite(m)):
        raise NumericalError("saliency map is not finite")
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(m), True
    return (m - lo) / (hi - lo), False


def _window_array(model: Network, window) -> np.ndarray:
    data = window.data if isinstance(window, FlowWindow) else np.asarray(window)
    a = model.arch
    if data.shape != (a.in_channels, a.height, a.width):
        raise DataError(f"window shape {data.shape} does not match the model input")
    return data


def _class_index(model: Network, cls) -> tuple[int, ActivityClassId]:
    idx = cls.id if isinstance(cls, ActivityClassId) else int(cls)
    if not 0 <= idx < model.arch.n_classes:
        raise DataError(f"class {idx} outside the {model.arch.n_classes}-class head")
    return idx, cls if isinstance(cls, ActivityClassId) else ActivityClassId(idx, str(idx))


def grad_cam(model: Network, window, cls) -> SaliencyMap:
    """Class-logit gradients pooled per channel weight the final encoder map."""
    model.check_finite()
    data = _window_array(model, window)
    idx, cid = _class_index(model, cls)
    f, _ = model.encode(model.prepare(data[None]), False)
    logits, cache = model.head(f, False)
    dlogits = np.zeros_like(logits)
    dlogits[0, idx] = 1.0
    df = model.head_backward(dlogits, cache, {})[0].astype(np.float64)  # (Hf, Wf, C)
    fmap = f[0].astype(np.float64)
    weights = df.mean(axis=(0, 1))
    cam = np.maximum(fmap @ weights, 0.0)
    if not np.all(np.isfinite(cam)):
        raise NumericalError("Grad-CAM produced non-finite values")
    values, degenerate = _normalize(bilinear_resize(cam, data.shape[1:]))
    return SaliencyMap(values, cam, cid, "grad-cam", degenerate)


def occlusion_saliency(model: Network, window, cls, patch: tuple[int, int] = (16, 16),
                       chunk: int = 16) -> SaliencyMap:
    """Drop in class probability when each patch (stride = patch size) is zeroed on all channels."""
    model.check_finite()
    data = _window_array(model, window)
    idx, cid = _class_index(model, cls)
    ph, pw = patch
    _, h, w = data.shape
    if not (1 <= ph <= h and 1 <= pw <= w):
        raise DataError(f"patch {patch} must be positive and fit inside {h}x{w}")
    rows, cols = -(-h // ph), -(-w // pw)
    base = predict_proba(model, data[None])[0, idx]
    variants = np.empty((rows * cols, *data.shape), dtype=data.dtype)
    for k in range(rows * cols):
        i, j = divmod(k, cols)
        variants[k] = data
        variants[k, :, i * ph : (i + 1) * ph, j * pw : (j + 1) * pw] = 0
    probs = predict_proba(model, variants, chunk=chunk)[:, idx]
    drop = (base - probs).reshape(rows, cols)
    values, degenerate = _normalize(bilinear_resize(np.maximum(drop, 0.0), (h, w)))
    return SaliencyMap(values, drop, cid, "occlusion", degenerate)


def rank_agreement(a: SaliencyMap, b: SaliencyMap) -> float:
    """Spearman correlation of two full-resolution maps (0 when either is constant)."""
    if a.values.shape != b.values.shape:
        raise DataError("saliency maps differ in shape")
    if np.ptp(a.values) == 0 or np.ptp(b.values) == 0:
        return 0.0
    return float(spearmanr(a.values.ravel(), b.values.ravel()).statistic)


def write_saliency_csv(smap: SaliencyMap, path: str | Path) -> None:
    """Row per lag, column per frame of the normalised map."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(smap.values.shape[1])])
        for row in smap.values:
            w.writerow([f"{v:.6g}" for v in row])
