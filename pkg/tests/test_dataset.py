import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echoact.catalog import CLASS_NAMES
from echoact.dataset import (
    ActivityClassId,
    LabeledDataset,
    LabeledWindow,
    align_labels,
    build_synthetic_dataset,
    load_dataset,
    lookup_class,
    make_class_table,
    read_label_csv,
    save_dataset,
    split_leave_one_group_out,
    write_label_csv,
)
from echoact.echo import FlowWindow
from echoact.errors import DataError

TABLE = make_class_table(["chew", "walk", "null"])


def window(start, seconds=2.0, shape=(4, 5, 6), seed=0):
    data = np.random.default_rng(seed).random(shape, dtype=np.float32)
    return FlowWindow(data, start, shape[-1] / seconds)


def toy_dataset(groups=("A", "B", "C"), per_group=3):
    items = []
    for gi, g in enumerate(groups):
        for k in range(per_group):
            items.append(LabeledWindow(window(float(k), seed=10 * gi + k), TABLE[k % len(TABLE)], g))
    return LabeledDataset(items, TABLE)


# ------------------------------------------------------------------ class table


def test_class_table_is_dense_with_one_null():
    table = make_class_table()
    assert [c.id for c in table] == list(range(len(CLASS_NAMES)))
    assert sum(c.name == "null" for c in table) == 1
    with pytest.raises(DataError):
        make_class_table(["chew", "walk"])
    with pytest.raises(DataError):
        make_class_table(["null", "chew", "null"])
    with pytest.raises(DataError):
        LabeledDataset([], [ActivityClassId(1, "null")])


def test_lookup_by_name_or_id():
    assert lookup_class(TABLE, "walk") == ActivityClassId(1, "walk")
    assert lookup_class(TABLE, 2).name == "null"
    with pytest.raises(DataError):
        lookup_class(TABLE, "swim")


def test_labeled_window_needs_group():
    with pytest.raises(DataError):
        LabeledWindow(window(0.0), TABLE[0], "")


def test_dataset_rejects_foreign_labels_and_interleaving():
    with pytest.raises(DataError):
        LabeledDataset([LabeledWindow(window(0.0), ActivityClassId(7, "swim"), "A")], TABLE)
    items = [LabeledWindow(window(float(i)), TABLE[0], g) for i, g in enumerate("ABA")]
    with pytest.raises(DataError):
        LabeledDataset(items, TABLE)
    regrouped = LabeledDataset.grouped(items, TABLE)
    assert [it.group for it in regrouped.items] == ["A", "A", "B"]
    assert regrouped.items[1].window.start_time == 2.0


# --------------------------------------------------------------------- labelling


def test_full_coverage_takes_the_label():
    (out,) = align_labels([window(4.0)], [(0.0, 10.0, "chew")], TABLE)
    assert out.label.name == "chew"


def test_majority_overlap_wins():
    (out,) = align_labels([window(4.0)], [(0.0, 4.8, "chew"), (4.8, 10.0, "walk")], TABLE)
    assert out.label.name == "walk"


def test_uncovered_window_is_null():
    (out,) = align_labels([window(20.0)], [(0.0, 4.8, "chew")], TABLE)
    assert out.label.name == "null"


def test_gap_counts_towards_null():
    (out,) = align_labels([window(4.0)], [(0.0, 4.5, "chew"), (5.8, 9.0, "walk")], TABLE)
    assert out.label.name == "null"


def test_tie_goes_to_earlier_interval():
    (out,) = align_labels([window(4.0)], [(0.0, 5.0, "walk"), (5.0, 10.0, "chew")], TABLE)
    assert out.label.name == "walk"


def test_overlapping_or_reversed_intervals_are_rejected():
    with pytest.raises(DataError):
        align_labels([window(0.0)], [(0.0, 3.0, "chew"), (2.0, 4.0, "walk")], TABLE)
    with pytest.raises(DataError):
        align_labels([window(0.0)], [(3.0, 1.0, "chew")], TABLE)


def test_unknown_label_name_is_rejected():
    with pytest.raises(DataError):
        align_labels([window(0.0)], [(0.0, 3.0, "swim")], TABLE)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=1, max_size=12),
       st.lists(st.tuples(st.floats(0.1, 4), st.sampled_from(["chew", "walk"])), max_size=8))
def test_every_window_gets_exactly_one_label(starts, spans):
    labels, t = [], 0.0
    for length, name in spans:
        labels.append((t, t + length, name))
        t += length + 0.5
    out = align_labels([window(s) for s in starts], labels, TABLE, group="g")
    assert len(out) == len(starts)
    assert all(it.label in TABLE and it.group == "g" for it in out)


def test_label_csv_roundtrip(tmp_path):
    labels = [(0.0, 4.8, "chew"), (4.8, 10.25, "walk")]
    write_label_csv(labels, tmp_path / "l.csv")
    assert read_label_csv(tmp_path / "l.csv") == labels
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_label_csv(tmp_path / "bad.csv")


# ------------------------------------------------------------------------ splits


def test_leave_one_group_out_counts():
    groups = [f"P{i:02d}" for i in range(1, 13)]
    ds = toy_dataset(groups, per_group=2)
    train, test = split_leave_one_group_out(ds, "P01")
    assert len(train.groups) == 11 and test.groups == ["P01"]
    assert len(train) + len(test) == len(ds)


def test_held_out_sets_partition_the_dataset():
    ds = toy_dataset()
    seen = []
    for g in ds.groups:
        train, test = split_leave_one_group_out(ds, g)
        assert g not in train.groups
        assert all(it.group == g for it in test.items)
        seen.extend(id(it) for it in test.items)
    assert sorted(seen) == sorted(id(it) for it in ds.items)


def test_split_errors():
    with pytest.raises(DataError):
        split_leave_one_group_out(toy_dataset(), "Z")
    with pytest.raises(DataError):
        split_leave_one_group_out(toy_dataset(("A",)), "A")


# --------------------------------------------------------------------- container


def test_save_load_roundtrip_is_bit_exact(tmp_path):
    ds = toy_dataset()
    save_dataset(ds, tmp_path / "ds", config_hash="abc123")
    back, manifest, hashes = load_dataset(tmp_path / "ds", return_hashes=True)
    assert back.identical_to(ds)
    assert manifest["groups"] == "A,B,C" and manifest["null_class"] == "null"
    assert hashes == {"abc123"}


def test_load_rejects_missing_container(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_identical_to_detects_changes():
    a, b = toy_dataset(), toy_dataset()
    assert a.identical_to(b)
    b.items[0].window.data[0, 0, 0] += 1
    assert not a.identical_to(b)


def test_inputs_and_targets():
    ds = toy_dataset()
    assert ds.inputs().shape == (9, 4, 5, 6)
    assert list(ds.targets()) == [0, 1, 2] * 3
    assert ds.n_classes == 3
    assert LabeledDataset([], TABLE).inputs().shape == (0, 4, 295, 166)


@pytest.mark.slow
def test_synthetic_dataset_layout():
    ds = build_synthetic_dataset(n_groups=2, seconds_per_class=3.0, class_names=("static", "chew", "null"))
    assert ds.groups == ["G01", "G02"]
    per = {(it.group, it.label.name) for it in ds.items}
    assert len(per) == 6
    assert ds.inputs().shape[1:] == (4, 295, 166)
    again = build_synthetic_dataset(n_groups=2, seconds_per_class=3.0, class_names=("static", "chew", "null"))
    assert ds.identical_to(again)
