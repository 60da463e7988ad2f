"""Labelled flow windows, label alignment, group splits and the on-disk container."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import CLASS_NAMES, DEFAULT_SNR_DB, NULL_CLASS, synth_activity_scene
from .channel import simulate
from .echo import FlowWindow, compute_echo_profile, acoustic_flow, extract_windows
from .errors import DataError
from .formats import dump_kv, parse_kv, read_window, write_window
from .signal import default_chirps, generate_chirp


@dataclass(frozen=True, order=True)
class ActivityClassId:
    id: int
    name: str


def make_class_table(names: Sequence[str] = CLASS_NAMES) -> list[ActivityClassId]:
    table = [ActivityClassId(i, n) for i, n in enumerate(names)]
    validate_class_table(table)
    return table


def validate_class_table(table: Sequence[ActivityClassId]) -> None:
    if [c.id for c in table] != list(range(len(table))):
        raise DataError("class ids must be dense in [0, K)")
    names = [c.name for c in table]
    if len(set(names)) != len(names):
        raise DataError("class names must be unique")
    if names.count(NULL_CLASS) != 1:
        raise DataError(f"class table needs exactly one {NULL_CLASS!r} class")


def lookup_class(table: Sequence[ActivityClassId], name_or_id) -> ActivityClassId:
    for c in table:
        if c.name == name_or_id or (not isinstance(name_or_id, str) and c.id == name_or_id):
            return c
    raise DataError(f"unknown class {name_or_id!r}")


@dataclass
class LabeledWindow:
    window: FlowWindow
    label: ActivityClassId
    group: str

    def __post_init__(self):
        if not self.group:
            raise DataError("group identifier must be non-empty")


@dataclass
class LabeledDataset:
    items: list[LabeledWindow]
    class_table: list[ActivityClassId] = field(default_factory=make_class_table)

    def __post_init__(self):
        validate_class_table(self.class_table)
        known = set(self.class_table)
        seen: list[str] = []
        for it in self.items:
            if it.label not in known:
                raise DataError(f"label {it.label} not in the class table")
            if not seen or seen[-1] != it.group:
                if it.group in seen:
                    raise DataError(f"items of group {it.group!r} are interleaved with other groups")
                seen.append(it.group)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def grouped(cls, items: Iterable[LabeledWindow], class_table=None) -> "LabeledDataset":
        """Build a dataset, reordering items so each group is contiguous (stable within a group)."""
        buckets: OrderedDict[str, list[LabeledWindow]] = OrderedDict()
        for it in items:
            buckets.setdefault(it.group, []).append(it)
        ordered = [it for b in buckets.values() for it in b]
        return cls(ordered, list(class_table) if class_table is not None else make_class_table())

    @property
    def groups(self) -> list[str]:
        return list(OrderedDict.fromkeys(it.group for it in self.items))

    @property
    def n_classes(self) -> int:
        return len(self.class_table)

    def inputs(self) -> np.ndarray:
        return np.stack([it.window.data for it in self.items]) if self.items else np.zeros((0, 4, 295, 166), np.float32)

    def targets(self) -> np.ndarray:
        return np.array([it.label.id for it in self.items], dtype=np.int64)

    def subset(self, keep) -> "LabeledDataset":
        return LabeledDataset([it for it in self.items if keep(it)], list(self.class_table))

    def identical_to(self, other: "LabeledDataset") -> bool:
        if self.class_table != other.class_table or len(self) != len(other):
            return False
        for a, b in zip(self.items, other.items):
            if (a.label, a.group, a.window.start_time, a.window.frame_rate) != (
                b.label, b.group, b.window.start_time, b.window.frame_rate
            ):
                return False
            if a.window.data.dtype != b.window.data.dtype or not np.array_equal(a.window.data, b.window.data):
                return False
        return True


# ------------------------------------------------------------------ labelling


def read_label_csv(path: str | Path) -> list[tuple[float, float, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"start_s", "end_s", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: label CSV needs a start_s,end_s,label header")
        return [(float(r["start_s"]), float(r["end_s"]), r["label"].strip()) for r in reader]


def write_label_csv(labels: Iterable[tuple[float, float, str]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_s", "end_s", "label"])
        for s, e, lab in labels:
            w.writerow([repr(float(s)), repr(float(e)), lab])


def align_labels(
    windows: Sequence[FlowWindow],
    labels: Sequence[tuple[float, float, str]],
    class_table: Sequence[ActivityClassId] | None = None,
    group: str = "unassigned",
    window_s: float | None = None,
) -> list[LabeledWindow]:
    """Give each window the class covering most of its span.

    Time not covered by any interval counts towards the null class.  Equal
    coverage goes to whichever competitor appears first in the window.
    ``window_s`` overrides the span length (defaults to frames / frame rate).
    """
    table = list(class_table) if class_table is not None else make_class_table()
    for (s0, e0, _), (s1, _, _) in zip(labels, labels[1:]):
        if s1 < e0:
            raise DataError(f"label intervals overlap or are unsorted near t={s1:g}s")
    for s, e, _ in labels:
        if e < s:
            raise DataError(f"label interval ends before it starts ({s:g}..{e:g})")
    null = lookup_class(table, NULL_CLASS)

    out = []
    for w in windows:
        span = window_s if window_s is not None else w.duration
        a, b = w.start_time, w.start_time + span
        cover: dict[str, float] = {}
        first: dict[str, float] = {}
        cursor = a
        for s, e, name in labels:
            lo, hi = max(s, a), min(e, b)
            if hi <= lo:
                continue
            if lo > cursor:
                cover[NULL_CLASS] = cover.get(NULL_CLASS, 0.0) + lo - cursor
                first.setdefault(NULL_CLASS, cursor)
            cover[name] = cover.get(name, 0.0) + hi - lo
            first.setdefault(name, lo)
            cursor = max(cursor, hi)
        if cursor < b:
            cover[NULL_CLASS] = cover.get(NULL_CLASS, 0.0) + b - cursor
            first.setdefault(NULL_CLASS, cursor)
        best = min(cover, key=lambda k: (-round(cover[k], 9), first[k]))
        label = null if best == NULL_CLASS else lookup_class(table, best)
        out.append(LabeledWindow(w, label, group))
    return out


def split_leave_one_group_out(ds: LabeledDataset, held_out: str) -> tuple[LabeledDataset, LabeledDataset]:
    if held_out not in ds.groups:
        raise DataError(f"unknown group {held_out!r}")
    train = ds.subset(lambda it: it.group != held_out)
    test = ds.subset(lambda it: it.group == held_out)
    if not train.items:
        raise DataError("holding out the only group leaves an empty training set")
    return train, test


# ------------------------------------------------------------------ container

MANIFEST = "manifest.txt"
INDEX = "labels.csv"


def save_dataset(ds: LabeledDataset, directory: str | Path, config_hash: str = "") -> Path:
    """Directory of AEFW windows plus ``labels.csv`` (file,label,group) and a key=value manifest."""
    root = Path(directory)
    (root / "windows").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, it in enumerate(ds.items):
        rel = f"windows/w{i:05d}.aefw"
        write_window(root / rel, it.window, {"config_hash": config_hash, "group": it.group, "label": it.label.name})
        rows.append((rel, it.label.name, it.group))
    with open(root / INDEX, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label", "group"])
        w.writerows(rows)
    manifest = {
        "classes": ",".join(c.name for c in ds.class_table),
        "null_class": NULL_CLASS,
        "groups": ",".join(ds.groups),
        "n_items": len(ds),
        "config_hash": config_hash,
    }
    (root / MANIFEST).write_text(dump_kv(manifest))
    return root


def load_dataset(directory: str | Path, return_hashes: bool = False):
    root = Path(directory)
    if not (root / MANIFEST).exists():
        raise DataError(f"{root}: no {MANIFEST}; not a dataset container")
    manifest = parse_kv((root / MANIFEST).read_text())
    table = make_class_table(manifest["classes"].split(","))
    items, hashes = [], set()
    with open(root / INDEX, newline="") as fh:
        for row in csv.DictReader(fh):
            window, meta = read_window(root / row["file"])
            hashes.add(meta.get("config_hash", ""))
            items.append(LabeledWindow(window, lookup_class(table, row["label"]), row["group"]))
    ds = LabeledDataset(items, table)
    if return_hashes:
        return ds, manifest, hashes
    return ds


# ------------------------------------------------------------------ synthetic catalog


def windows_for_scene(scene, seed: int, chirps=None, kernels=None) -> list[FlowWindow]:
    cl, cr = chirps if chirps is not None else default_chirps()
    tx_l, tx_r = generate_chirp(cl), generate_chirp(cr)
    mics = simulate(tx_l, tx_r, scene, seed)
    return extract_windows(acoustic_flow(compute_echo_profile(tx_l, tx_r, mics, kernels)))


def build_synthetic_dataset(
    n_groups: int = 5,
    seconds_per_class: float = 6.0,
    seed: int = 0,
    class_names: Sequence[str] = CLASS_NAMES,
    snr_db: float | None = DEFAULT_SNR_DB,
    chirps=None,
) -> LabeledDataset:
    """One scene per (group, class); every group draws from the same script distribution."""
    table = make_class_table(class_names)
    items = []
    for g in range(n_groups):
        group = f"G{g + 1:02d}"
        for cls in table:
            scene_seed = seed * 1_000_003 + g * 1009 + cls.id
            scene = synth_activity_scene(cls.name, seconds_per_class, scene_seed, snr_db)
            for w in windows_for_scene(scene, scene_seed, chirps):
                items.append(LabeledWindow(w, cls, group))
    return LabeledDataset(items, table)
