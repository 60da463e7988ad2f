"""Scoring, leave-one-group-out campaigns and throughput benchmarking."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import ActivityClassId, LabeledDataset, split_leave_one_group_out
from .echo import acoustic_flow, compute_echo_profile, crop_region, extract_windows
from .errors import DataError
from .learn.network import Network
from .learn.train import MaskConfig, TrainConfig, finetune, predict_proba, pretrain

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ scoring


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[truth, predicted]``."""

    counts: np.ndarray
    labels: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if self.counts.shape != (k, k):
            raise DataError(f"confusion matrix must be {k}x{k}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-normalised matrix; rows without support stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise DataError("cannot add confusion matrices over different labels")
        return ConfusionMatrix(self.counts + other.counts, list(self.labels))


def _name(x) -> str:
    return x.name if isinstance(x, ActivityClassId) else str(x)


def confusion_matrix(preds: Sequence, truths: Sequence, labels: Sequence | None = None) -> ConfusionMatrix:
    """Tally one count per scored second.

    ``labels`` fixes the row/column order (names or class ids); without it
    the sorted union of observed labels is used.
    """
    preds, truths = [_name(p) for p in preds], [_name(t) for t in truths]
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions for {len(truths)} truths")
    names = [_name(x) for x in labels] if labels is not None else sorted(set(preds) | set(truths))
    index = {n: i for i, n in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)
    for p, t in zip(preds, truths):
        if p not in index or t not in index:
            raise DataError(f"unknown label {p if p not in index else t!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts, names)


def per_class_f1(cm: ConfusionMatrix | np.ndarray) -> np.ndarray:
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.size == 0:
        raise DataError("need a non-empty square confusion matrix")
    tp = np.diag(c)
    # F1 = 2TP / (2TP + FP + FN) equals the harmonic mean of precision and recall
    denom = 2 * tp + (c.sum(axis=0) - tp) + (c.sum(axis=1) - tp)
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm: ConfusionMatrix | np.ndarray) -> float:
    """Unweighted mean of per-class F1; classes with no TP, FP or FN count as 0."""
    return float(np.mean(per_class_f1(cm)))


# ------------------------------------------------------------------ reports


@dataclass
class GroupScore:
    group: str
    macro_f1: float
    n_windows: int
    train_seconds: float


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class_f1: np.ndarray
    macro_f1: float
    groups: list[GroupScore]
    runtime_s: float
    settings: dict = field(default_factory=dict)

    @property
    def group_scores(self) -> np.ndarray:
        return np.array([g.macro_f1 for g in self.groups])

    @property
    def mean_group_f1(self) -> float:
        return float(self.group_scores.mean())

    @property
    def std_group_f1(self) -> float:
        return float(self.group_scores.std())

    def summary(self) -> dict:
        return {
            "labels": self.confusion.labels,
            "per_class_f1": [round(float(v), 6) for v in self.per_class_f1],
            "macro_f1": self.macro_f1,
            "mean_group_f1": self.mean_group_f1,
            "std_group_f1": self.std_group_f1,
            "groups": {g.group: g.macro_f1 for g in self.groups},
            "confusion": self.confusion.counts.tolist(),
            "runtime_s": self.runtime_s,
            "settings": self.settings,
        }


def report_from_confusions(per_group: dict[str, ConfusionMatrix], runtime_s: float = 0.0,
                           train_seconds: dict[str, float] | None = None, settings=None) -> EvalReport:
    cms = list(per_group.values())
    pooled = cms[0]
    for cm in cms[1:]:
        pooled = pooled + cm
    f1 = per_class_f1(pooled)
    groups = [GroupScore(g, macro_f1(cm), cm.total, (train_seconds or {}).get(g, 0.0))
              for g, cm in per_group.items()]
    return EvalReport(pooled, f1, float(f1.mean()), groups, runtime_s, dict(settings or {}))


def write_report(report: EvalReport, directory: str | Path, config_hash: str = "") -> dict[str, Path]:
    """Per-fold CSV, JSON summary and the normalised confusion matrix as PNG and PGM."""
    from .plotting import plot_confusion, write_pgm

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = {"folds": root / "folds.csv", "summary": root / "summary.json",
             "png": root / "confusion.png", "pgm": root / "confusion.pgm"}
    with open(paths["folds"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "macro_f1", "n_windows", "train_seconds"])
        for g in report.groups:
            w.writerow([g.group, f"{g.macro_f1:.6f}", g.n_windows, f"{g.train_seconds:.2f}"])
    summary = report.summary()
    summary["config_hash"] = config_hash
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    norm = report.confusion.normalized()
    plot_confusion(norm, report.confusion.labels, paths["png"], title=f"macro F1 {report.macro_f1:.3f}",
                   meta={"config_hash": config_hash})
    write_pgm(norm, paths["pgm"])
    return paths


# ------------------------------------------------------------------ leave-one-group-out


StageHook = Callable[[str, str, LabeledDataset], None]


def crop_dataset(ds: LabeledDataset, region: str) -> LabeledDataset:
    """Copy of ``ds`` with every window restricted to ``region`` (shape preserved)."""
    if region == "full":
        return ds
    items = [replace(it, window=crop_region(it.window, region)) for it in ds.items]
    return LabeledDataset(items, ds.class_table)


def _check_lineage(stage: str, held_out: str, train: LabeledDataset) -> None:
    if held_out in train.groups:
        raise AssertionError(f"held-out group {held_out} leaked into {stage}")


def run_lopo(
    ds: LabeledDataset,
    cfg: TrainConfig = TrainConfig(),
    use_pretrain: bool = True,
    mask_cfg: MaskConfig = MaskConfig(),
    stage2: LabeledDataset | None = None,
    groups: Sequence[str] | None = None,
    on_stage: StageHook | None = None,
) -> EvalReport:
    """Hold out each group in turn, train on the rest and score the held-out seconds.

    With ``stage2`` the two-stage protocol runs: the fold's classifier trained
    on ``ds`` is fine-tuned for ``cfg.stage2_epochs`` on the other groups of
    ``stage2`` and tested on the held-out group of ``stage2``.  ``on_stage``
    sees every dataset handed to a training stage.
    """
    if len(ds.groups) < 2:
        raise DataError("leave-one-group-out needs at least two groups")
    test_source = stage2 if stage2 is not None else ds
    if stage2 is not None and [c.name for c in stage2.class_table] != [c.name for c in ds.class_table]:
        raise DataError("both protocol stages must share one class table")
    folds = list(groups) if groups is not None else ds.groups
    t_all = time.perf_counter()
    per_group, train_time = {}, {}
    for g in folds:
        t0 = time.perf_counter()
        train, _ = split_leave_one_group_out(ds, g)
        _, test = split_leave_one_group_out(test_source, g)
        hook = on_stage or (lambda *a: None)
        encoder = None
        if use_pretrain and cfg.pretrain_epochs > 0:
            _check_lineage("pretrain", g, train)
            hook("pretrain", g, train)
            encoder, _ = pretrain([it.window for it in train.items], cfg, mask_cfg)
        _check_lineage("finetune", g, train)
        hook("finetune", g, train)
        model, _ = finetune(encoder, train, cfg)
        if stage2 is not None:
            train2, _ = split_leave_one_group_out(stage2, g)
            _check_lineage("stage2", g, train2)
            hook("stage2", g, train2)
            model, _ = finetune(model, train2, cfg, epochs=cfg.stage2_epochs, keep_head=True)
        train_time[g] = time.perf_counter() - t0
        per_group[g] = score_model(model, test)
        log.info("fold %s macro F1 %.4f (%.0f s)", g, macro_f1(per_group[g]), train_time[g])
    settings = {"pretrain": use_pretrain, "two_stage": stage2 is not None, **cfg.__dict__}
    return report_from_confusions(per_group, time.perf_counter() - t_all, train_time, settings)


def score_model(model: Network, test: LabeledDataset) -> ConfusionMatrix:
    """Per-window (one per second) argmax predictions scored against the labels."""
    probs = predict_proba(model, test.inputs())
    names = [c.name for c in test.class_table]
    preds = [names[i] for i in np.argmax(probs, axis=1)]
    return confusion_matrix(preds, [it.label.name for it in test.items], names)


# ------------------------------------------------------------------ throughput


@dataclass
class ThroughputReport:
    seconds_of_audio: float
    wall_time_s: float
    n_frames: int
    n_windows: int

    @property
    def realtime_factor(self) -> float:
        return self.wall_time_s / self.seconds_of_audio if self.seconds_of_audio > 0 else 0.0

    @property
    def frames_per_second(self) -> float:
        return self.n_frames / self.wall_time_s if self.wall_time_s > 0 else 0.0


def bench_throughput(seconds_of_audio: float, seed: int = 0, repeats: int = 1) -> ThroughputReport:
    """Time filter + correlate + flow + window extraction on noise-filled four-path audio.

    The best of ``repeats`` runs is reported.
    """
    from .channel import MicStreams
    from .signal import SAMPLE_RATE, default_chirps, generate_chirp, Waveform

    if seconds_of_audio <= 0:
        return ThroughputReport(0.0, 0.0, 0, 0)
    cl, cr = default_chirps()
    tx_l, tx_r = generate_chirp(cl), generate_chirp(cr)
    n = int(round(seconds_of_audio * SAMPLE_RATE))
    rng = np.random.default_rng(seed)
    mics = MicStreams(*(Waveform(0.1 * rng.standard_normal(n), SAMPLE_RATE) for _ in range(2)), [])
    best = None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        flow = acoustic_flow(compute_echo_profile(tx_l, tx_r, mics))
        try:
            wins = extract_windows(flow)
        except DataError:
            wins = []
        dt = time.perf_counter() - t0
        best = dt if best is None else min(best, dt)
    return ThroughputReport(seconds_of_audio, best, flow.n_frames, len(wins))
