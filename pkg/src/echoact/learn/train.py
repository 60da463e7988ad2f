"""Masked-reconstruction pretraining, focal-loss fine-tuning and 1 Hz prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ..dataset import ActivityClassId, LabeledDataset, LabeledWindow
from ..echo import HOP_FRAMES, EchoProfile, FlowWindow, extract_windows
from ..errors import ConfigError, DataError, NumericalError
from . import layers as L
from .network import Architecture, Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskConfig:
    mask_fraction_range: tuple[float, float] = (0.15, 0.20)
    n_patches_range: tuple[int, int] = (1, 4)
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.mask_fraction_range
        if not 0 < lo <= hi < 1:
            raise ConfigError("mask fractions must lie in (0, 1)")
        if not 1 <= self.n_patches_range[0] <= self.n_patches_range[1]:
            raise ConfigError("patch counts must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    pretrain_epochs: int = 100
    finetune_epochs: int = 50
    lr_init: float = 1e-3
    gamma_focal: float = 0.5
    dropout_p: float = 0.2
    rng_seed: int = 0
    loss: str = "focal"  # or "ce" for plain cross-entropy
    masked_only: bool = False
    stage2_epochs: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("batch size must be positive and epoch counts non-negative")
        if self.lr_init < 0 or self.gamma_focal < 0 or not 0 <= self.dropout_p < 1:
            raise ConfigError("need lr >= 0, gamma >= 0 and dropout in [0, 1)")
        if self.loss not in ("focal", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")


# ------------------------------------------------------------------ masking


MASK_DRAWS = 100


def _mask_rectangles(rng, h, w, cfg: MaskConfig):
    """One channel's rectangles ``(row, col, ph, pw)`` in disjoint column ranges."""
    lo, hi = cfg.mask_fraction_range
    slack = 1.0 / (2 * h)
    frac = rng.uniform(lo, hi)
    frac = min(max(frac, lo + slack), hi - slack) if hi - lo > 2 * slack else (lo + hi) / 2
    k = int(rng.integers(cfg.n_patches_range[0], cfg.n_patches_range[1] + 1))
    total = frac * h * w
    shares = rng.dirichlet(np.full(k, 2.0)) * total
    min_w = [max(1, math.ceil(a / h)) for a in shares]
    free = w - sum(min_w)
    if free < 0:
        raise ConfigError("mask fraction too large for the window width")
    extra = rng.multinomial(free, np.full(k, 1.0 / k))
    seg = [m + e for m, e in zip(min_w, extra)]
    rects, x0 = [], 0
    for a, lo_w, s in zip(shares, min_w, seg):
        pw = int(rng.integers(lo_w, max(lo_w, min(s, max(int(a), 1))) + 1))
        ph = min(h, max(1, int(round(a / pw))))
        col = x0 + int(rng.integers(0, s - pw + 1))
        row = int(rng.integers(0, h - ph + 1))
        rects.append((row, col, ph, pw))
        x0 += s
    return rects


def random_mask(window, cfg: MaskConfig, rng: np.random.Generator):
    """Zero ``k`` disjoint rectangles per channel covering 15-20 % of it.

    Rectangles occupy disjoint column ranges, so their union area is the sum
    of their areas.  The target fraction is pulled in by half a row, which
    keeps rounded rectangles inside the configured range on full-size
    windows; on small windows a draw that still leaves the range is redrawn.
    Returns ``(masked, mask)`` with ``mask`` 1 where entries were zeroed.
    """
    data = window.data if isinstance(window, FlowWindow) else np.asarray(window)
    c, h, w = data.shape
    mask = np.zeros(data.shape, dtype=bool)
    lo, hi = cfg.mask_fraction_range
    for ch in range(c):
        for _ in range(MASK_DRAWS):
            rects = _mask_rectangles(rng, h, w, cfg)
            if lo * h * w <= sum(ph * pw for _, _, ph, pw in rects) <= hi * h * w:
                break
        else:
            raise ConfigError(f"cannot mask {lo:.0%}-{hi:.0%} of a {h}x{w} channel with whole rectangles")
        for row, col, ph, pw in rects:
            mask[ch, row : row + ph, col : col + pw] = True
    masked = np.where(mask, 0, data).astype(data.dtype)
    if isinstance(window, FlowWindow):
        return FlowWindow(masked, window.start_time, window.frame_rate), mask
    return masked, mask


# ------------------------------------------------------------------ single-window API


def _chw(f: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(f.transpose(0, 3, 1, 2))


def encoder_forward(model: Network, x) -> np.ndarray:
    """Feature map ``(C_f, H_f, W_f)`` for one window (inference mode)."""
    data = x.data if isinstance(x, FlowWindow) else x
    f, _ = model.encode(model.prepare(data), train=False)
    return _chw(f)[0]


def decoder_forward(model: Network, features: np.ndarray) -> np.ndarray:
    """Reconstruction ``(C, H, W)`` (log-compressed units) from a ``(C_f, H_f, W_f)`` feature map."""
    f = np.asarray(features, dtype=model.dtype)
    if f.shape != model.arch.feature_shape:
        raise DataError(f"feature map must be {model.arch.feature_shape}, got {f.shape}")
    out, _ = model.decode(np.ascontiguousarray(f.transpose(1, 2, 0))[None], train=False)
    return _chw(out)[0]


def classifier_forward(model: Network, x, train_mode: bool = False, rng=None) -> np.ndarray:
    data = x.data if isinstance(x, FlowWindow) else x
    probs = predict_proba(model, np.asarray(data)[None], train=train_mode, rng=rng)
    return probs[0]


def predict_proba(model: Network, xs: np.ndarray, train: bool = False, rng=None, chunk: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(xs), chunk):
        f, _ = model.encode(model.prepare(xs[i : i + chunk]), train)
        logits, _ = model.head(f, train, rng)
        out.append(L.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.arch.n_classes))


def mse_loss(recon, target) -> float:
    recon, target = np.asarray(recon), np.asarray(target)
    if recon.shape != target.shape:
        raise DataError(f"shape mismatch {recon.shape} vs {target.shape}")
    return L.mse_with_grad(recon, target)[0]


def focal_loss(probs, label: int, gamma: float) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= int(label) < probs.size:
        raise DataError(f"label {label} outside [0, {probs.size})")
    pt = max(float(probs[int(label)]), 1e-12)
    return -((1.0 - pt) ** gamma) * math.log(pt)


# ------------------------------------------------------------------ batched objective


def _batch_arrays(batch):
    if isinstance(batch, np.ndarray):
        return batch, None
    if not len(batch):
        raise DataError("empty batch")
    first = batch[0]
    if isinstance(first, LabeledWindow):
        return np.stack([b.window.data for b in batch]), np.array([b.label.id for b in batch])
    if isinstance(first, FlowWindow):
        return np.stack([b.data for b in batch]), None
    return np.stack([np.asarray(b) for b in batch]), None


def loss_and_gradients(
    model: Network,
    batch,
    objective: str = "focal-finetune",
    *,
    labels: np.ndarray | None = None,
    gamma: float = 0.5,
    masks: np.ndarray | None = None,
    masked_only: bool = False,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and analytic gradients for every parameter it touches.

    ``objective`` is ``"mse-pretrain"`` (reconstruct the unmasked input from
    the input with ``masks`` zeroed) or ``"focal-finetune"`` / ``"ce-finetune"``.
    """
    xs, lab = _batch_arrays(batch)
    if len(xs) == 0:
        raise DataError("empty batch")
    grads: dict[str, np.ndarray] = {}
    target = model.prepare(xs)
    if objective == "mse-pretrain":
        inp = target if masks is None else np.where(masks.transpose(0, 2, 3, 1), 0, target).astype(target.dtype)
        f, ecache = model.encode(inp, train)
        recon, dcache = model.decode(f, train)
        weight = None
        if masked_only and masks is not None:
            weight = masks.transpose(0, 2, 3, 1).astype(np.float64)
        loss, drecon = L.mse_with_grad(recon, target, weight)
        df = model.decode_backward(drecon, dcache, grads)
        model.encode_backward(df, ecache, grads, input_grad=False)
    elif objective in ("focal-finetune", "ce-finetune"):
        if labels is not None:
            lab = np.asarray(labels)
        if lab is None:
            raise DataError("classification objectives need labels")
        if np.any(lab < 0) or np.any(lab >= model.arch.n_classes):
            raise DataError("label outside the classifier head")
        f, ecache = model.encode(target, train)
        logits, hcache = model.head(f, train, rng)
        if objective == "focal-finetune":
            loss, dlogits = L.focal_loss_with_grad(logits, lab, gamma)
        else:
            loss, dlogits = L.cross_entropy_with_grad(logits, lab)
        df = model.head_backward(dlogits, hcache, grads)
        model.encode_backward(df, ecache, grads, input_grad=False)
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite {objective} loss")
    return loss, grads


# ------------------------------------------------------------------ optimisation


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr:
                self.params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(self.params[k].dtype)


def cosine_lr(lr_init: float, epoch: int, total: int) -> float:
    """Cosine annealing from ``lr_init`` at epoch 0 towards 0 after ``total`` epochs."""
    if total <= 0:
        return lr_init
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def _fit_input_scale(xs: np.ndarray) -> float:
    m = float(np.mean(xs, dtype=np.float64))
    return m if m > 0 and math.isfinite(m) else 1.0


EpochHook = Callable[[int, float, float], None]


def pretrain(
    windows: Sequence,
    cfg: TrainConfig = TrainConfig(),
    mask_cfg: MaskConfig = MaskConfig(),
    arch: Architecture | None = None,
    on_epoch: EpochHook | None = None,
    dtype=np.float32,
) -> tuple[Network, list[tuple[int, float, float]]]:
    """Masked-reconstruction training; returns the network (encoder + decoder) and the epoch log."""
    xs, _ = _batch_arrays(list(windows)) if len(windows) else (np.zeros(0), None)
    if len(xs) == 0:
        raise DataError("pretraining needs at least one window")
    rng = np.random.default_rng(cfg.rng_seed)
    arch = arch or Architecture(in_channels=xs.shape[1], height=xs.shape[2], width=xs.shape[3])
    model = Network.init(replace(arch, dropout=cfg.dropout_p), rng, dtype)
    model.input_scale = _fit_input_scale(xs)
    mask_rng = np.random.default_rng([cfg.rng_seed, mask_cfg.rng_seed])
    opt = Adam(model.params)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        lr = cosine_lr(cfg.lr_init, epoch, cfg.pretrain_epochs)
        order = rng.permutation(len(xs))
        total, seen = 0.0, 0
        for i in range(0, len(xs), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            masks = np.stack([random_mask(xs[j], mask_cfg, mask_rng)[1] for j in idx])
            loss, grads = loss_and_gradients(
                model, xs[idx], "mse-pretrain", masks=masks, masked_only=cfg.masked_only
            )
            if not math.isfinite(loss):
                raise NumericalError(f"loss became {loss} in epoch {epoch}")
            opt.step(grads, lr)
            total += loss * len(idx)
            seen += len(idx)
        history.append((epoch, total / seen, lr))
        log.info("pretrain epoch %d loss %.6f lr %.2e", epoch, total / seen, lr)
        if on_epoch:
            on_epoch(epoch, total / seen, lr)
    model.check_finite()
    return model, history


def finetune(
    encoder: Network | None,
    ds: LabeledDataset,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: EpochHook | None = None,
    epochs: int | None = None,
    keep_head: bool = False,
    dtype=np.float32,
) -> tuple[Network, list[tuple[int, float, float]]]:
    """Train encoder and classifier head jointly (nothing frozen).

    ``encoder=None`` trains from a random initialisation.  With ``keep_head``
    the head of ``encoder`` is reused, which is how a second fine-tuning stage
    continues from a finished classifier.
    """
    if not len(ds):
        raise DataError("fine-tuning needs a non-empty labelled dataset")
    xs, ys = ds.inputs(), ds.targets()
    k = ds.n_classes
    rng = np.random.default_rng([cfg.rng_seed, 1])
    if encoder is None:
        arch = Architecture(in_channels=xs.shape[1], height=xs.shape[2], width=xs.shape[3],
                            n_classes=k, dropout=cfg.dropout_p)
        model = Network.init(arch, rng, dtype)
        model.input_scale = _fit_input_scale(xs)
    elif keep_head:
        if encoder.arch.n_classes != k:
            raise ConfigError(f"classifier has {encoder.arch.n_classes} classes, dataset has {k}")
        model = encoder.copy()
    else:
        model = encoder.with_head(k, rng)
        model.arch = replace(model.arch, dropout=cfg.dropout_p)
    model.degenerate = len(np.unique(ys)) < 2
    if model.degenerate:
        log.warning("fine-tuning dataset contains a single class; the classifier is degenerate")
    objective = "focal-finetune" if cfg.loss == "focal" else "ce-finetune"
    n_epochs = cfg.finetune_epochs if epochs is None else epochs
    opt = Adam(model.params)
    history = []
    for epoch in range(n_epochs):
        lr = cosine_lr(cfg.lr_init, epoch, n_epochs)
        order = rng.permutation(len(xs))
        total, seen = 0.0, 0
        for i in range(0, len(xs), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss, grads = loss_and_gradients(
                model, xs[idx], objective, labels=ys[idx], gamma=cfg.gamma_focal, rng=rng
            )
            if not math.isfinite(loss):
                raise NumericalError(f"loss became {loss} in epoch {epoch}")
            opt.step(grads, lr)
            total += loss * len(idx)
            seen += len(idx)
        history.append((epoch, total / seen, lr))
        log.info("finetune epoch %d loss %.6f lr %.2e", epoch, total / seen, lr)
        if on_epoch:
            on_epoch(epoch, total / seen, lr)
    model.check_finite()
    return model, history


# ------------------------------------------------------------------ inference


@dataclass
class Prediction:
    time_s: float
    label: ActivityClassId
    probs: np.ndarray


def predict(
    model: Network, flow: EchoProfile, class_table: Sequence[ActivityClassId], hop_frames: int = HOP_FRAMES
) -> list[Prediction]:
    """Classify windows every ``hop_frames`` flow frames (about once per second)."""
    if len(class_table) != model.arch.n_classes:
        raise ConfigError("class table does not match the classifier head")
    windows = extract_windows(flow, model.arch.height, model.arch.width, hop_frames)
    probs = predict_proba(model, np.stack([w.data for w in windows]))
    return [Prediction(w.start_time, class_table[int(np.argmax(p))], p) for w, p in zip(windows, probs)]


def reconstruct(model: Network, xs: np.ndarray, masks: np.ndarray | None = None, chunk: int = 16) -> np.ndarray:
    """Decoder output in log-compressed units (NCHW) for inputs with ``masks`` zeroed."""
    out = []
    for i in range(0, len(xs), chunk):
        x = xs[i : i + chunk]
        if masks is not None:
            x = np.where(masks[i : i + chunk], 0, x)
        f, _ = model.encode(model.prepare(x), False)
        r, _ = model.decode(f, False)
        out.append(_chw(r))
    return np.concatenate(out)
