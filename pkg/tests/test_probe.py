import csv
import dataclasses
import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from msdistill.distill import DistillModel
from msdistill.probe import (
    ProbeReport,
    aggregate_reports,
    build_decoder,
    compute_metrics,
    confusion_matrix,
    export_embeddings,
    linear_probe,
    majority_baseline,
    rows_to_csv,
    seg_probe,
)
from msdistill.rasterstore import SplitData, default_bands, load_split
from msdistill.trainer import save_checkpoint
from msdistill.optimsched import TrainConfig


def model(channels=1, seed=0):
    return DistillModel(channels, width=8, depth_blocks=2, hidden_dim=32, proj_dim=16, seed=seed)


def brute_force(conf):
    """Per-class tallies by walking every (truth, pred) sample one at a time."""
    k = len(conf)
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    for t in range(k):
        for p in range(k):
            for _ in range(int(conf[t][p])):
                if t == p:
                    tp[t] += 1
                else:
                    fn[t] += 1
                    fp[p] += 1
    f1, iou, rec, present = [], [], [], []
    for c in range(k):
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        r = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1.append(2 * prec * r / (prec + r) if prec + r else 0.0)
        iou.append(tp[c] / (tp[c] + fp[c] + fn[c]) if tp[c] + fp[c] + fn[c] else 0.0)
        rec.append(r)
        present.append(tp[c] + fn[c] > 0)
    miou = sum(i for i, p in zip(iou, present) if p) / sum(present)
    aa = sum(r for r, p in zip(rec, present) if p) / sum(present)
    return sum(f1) / k, iou, miou, aa


# -- metrics ------------------------------------------------------------------


def test_perfect_confusion():
    m = compute_metrics([[2, 0], [0, 2]])
    assert (m.f1_macro, m.miou, m.aa) == (1.0, 1.0, 1.0)


def test_all_one_class_prediction():
    m = compute_metrics([[50, 0], [50, 0]])
    assert m.per_class_iou == [0.5, 0.0]
    assert m.miou == 0.25 and m.aa == 0.5


def test_metrics_match_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        conf = rng.integers(0, 20, size=(k, k))
        conf[rng.random((k, k)) < 0.2] = 0
        if conf.sum() == 0:
            conf[0, 0] = 1
        m = compute_metrics(conf)
        f1, iou, miou, aa = brute_force(conf.tolist())
        assert abs(m.f1_macro - f1) < 1e-9
        assert np.allclose(m.per_class_iou, iou, atol=1e-9, rtol=0)
        assert abs(m.miou - miou) < 1e-9 and abs(m.aa - aa) < 1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 5))
def test_metrics_permutation_equivariant(seed, k):
    rng = np.random.default_rng(seed)
    conf = rng.integers(0, 10, size=(k, k))
    conf[0, 0] += 1
    perm = rng.permutation(k)
    a = compute_metrics(conf)
    b = compute_metrics(conf[np.ix_(perm, perm)])
    assert np.allclose(np.array(a.per_class_iou)[perm], b.per_class_iou)
    assert abs(a.f1_macro - b.f1_macro) < 1e-12 and abs(a.miou - b.miou) < 1e-12 and abs(a.aa - b.aa) < 1e-12
    for v in (a.f1_macro, a.miou, a.aa):
        assert 0 <= v <= 1


def test_metric_errors():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_metrics([[1, -1], [0, 1]])
    with pytest.raises(ValueError):
        compute_metrics([[1, 0, 0]])


def test_confusion_matrix_counts():
    conf = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    assert conf.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
    assert conf.sum(axis=1).tolist() == [2, 1, 3]


def test_majority_baseline_analytic_f1():
    train = np.array([0] * 30 + [1] * 50 + [2] * 20)
    test = np.array([0] * 10 + [1] * 25 + [2] * 15)
    rep = majority_baseline(train, test, 3)
    # class 1 everywhere: precision 25/50, recall 1, F1 = 2/3; the others score 0
    assert rep.f1_macro == pytest.approx((2 / 3) / 3, abs=1e-12)
    assert rep.meta["majority_class"] == 1


# -- probes -------------------------------------------------------------------


def separable_split(n, size=8, seed=0):
    """Two classes: band 0 constant +1.5 or -1.5, other bands noise."""
    rng = np.random.default_rng(seed)
    bands = default_bands(10, 2)
    labels = np.arange(n) % 2
    data = rng.normal(size=(n, len(bands), size, size)).astype(np.float32) * 0.1
    data[:, 0] = np.where(labels[:, None, None] == 1, 1.5, -1.5)
    maps = np.repeat(labels[:, None, None], size, 1).repeat(size, 2)
    return SplitData([f"p{i}" for i in range(n)], bands, data, labels.astype(np.int64), maps.astype(np.int64))


def test_linear_probe_separable_toy_and_frozen_encoder(small_dataset):
    m = model()
    before = {k: v.tobytes() for k, v in m.state_tensors().items()}
    data = (separable_split(64), separable_split(32, seed=1))
    two_class = dataclasses.replace(small_dataset, n_classes=2)
    rep = linear_probe(m, two_class, (0,), epochs=30, data=data)
    assert rep.f1_macro == 1.0
    assert np.array(rep.confusion).sum() == 32
    after = {k: v.tobytes() for k, v in m.state_tensors().items()}
    assert before == after
    assert m.student.training  # mode restored


def test_linear_probe_band_set_must_match_channels(small_dataset):
    with pytest.raises(ValueError, match="channels"):
        linear_probe(model(), small_dataset, (0, 1, 2), epochs=1)
    with pytest.raises(ValueError, match="channels"):
        linear_probe(model(3), small_dataset, (0,), epochs=1)


def test_linear_probe_deterministic_and_from_checkpoint(small_dataset, tmp_path):
    m = model(seed=2)
    path = save_checkpoint(m, tmp_path / "m.rsck", TrainConfig(width=8, depth_blocks=2, hidden_dim=32, proj_dim=16), 0)
    a = linear_probe(path, small_dataset, (3,), epochs=3, seed=1)
    b = linear_probe(m, small_dataset, (3,), epochs=3, seed=1)
    assert a.to_json() == b.to_json()
    assert len(a.train_curve) == 3
    assert np.array(a.confusion).sum(axis=1).tolist() == np.bincount(
        load_split(small_dataset, "probe_test").class_labels, minlength=4
    ).tolist()


def test_decoder_output_shape():
    for size in (8, 16, 13):
        dec = build_decoder(32, 5, size)
        assert dec(torch.randn(2, 32, 4, 4)).shape == (2, 5, size, size)


def test_seg_probe_report(small_dataset):
    m = model()
    before = {k: v.tobytes() for k, v in m.state_tensors().items()}
    rep = seg_probe(m, small_dataset, (0,), epochs=2)
    assert rep.mode == "seg"
    assert np.array(rep.confusion).sum() == 13 * 16 * 16
    assert 0 <= rep.miou <= 1 and 0 <= rep.aa <= 1
    assert before == {k: v.tobytes() for k, v in m.state_tensors().items()}


def test_seg_probe_requires_label_maps(small_dataset):
    tr = separable_split(8)
    tr.label_maps = None
    with pytest.raises(ValueError, match="label maps"):
        seg_probe(model(), small_dataset, (0,), epochs=1, data=(tr, tr))


def test_predicting_truth_gives_perfect_seg_metrics():
    truth = np.random.default_rng(0).integers(0, 4, size=(5, 8, 8))
    m = compute_metrics(confusion_matrix(truth, truth, 4))
    assert m.miou == 1.0 and m.aa == 1.0


# -- export and aggregation ---------------------------------------------------


def test_export_schema_determinism_and_class_geometry(small_dataset, tmp_path):
    m = model(seed=1)
    a = export_embeddings(m, small_dataset, (0,), tmp_path / "a.csv")
    b = export_embeddings(m, small_dataset, (0,), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(a.open()))
    n = len(small_dataset.splits["probe_test"])
    assert len(rows) == n + 1
    assert all(len(r) == 2 + m.feature_dim for r in rows)
    assert rows[0][:3] == ["patch_path", "class_label", "f0"]


def test_separable_toy_embeddings_cluster_by_class(small_dataset, monkeypatch, tmp_path):
    import msdistill.probe as probe

    monkeypatch.setattr(probe, "load_split", lambda manifest, split: separable_split(20))
    path = export_embeddings(model(seed=3), small_dataset, (0,), tmp_path / "e.csv")
    rows = list(csv.reader(path.open()))[1:]
    labels = np.array([int(r[1]) for r in rows])
    x = np.array([[float(v) for v in r[2:]] for r in rows])
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    same = sim[labels[:, None] == labels[None, :]].mean()
    diff = sim[labels[:, None] != labels[None, :]]
    assert diff.max() < same


def test_report_json_round_trip(tmp_path):
    rep = ProbeReport.from_confusion("linear", (1,), "B3", [[3, 1], [0, 4]], [0.5, 0.4], {"epochs": 2, "seed": 0})
    back = ProbeReport.load(rep.save(tmp_path / "x.probe.json"))
    assert back == rep
    assert json.loads(rep.to_json())["band_set"] == [1]


def test_aggregate_skips_corrupt_files(tmp_path):
    run = tmp_path / "run1"
    run.mkdir()
    ProbeReport.from_confusion("linear", (0,), "B2", [[1, 0], [0, 1]], meta={"epochs": 5, "seed": 3}).save(
        run / "linear_B2.probe.json"
    )
    (run / "bad.probe.json").write_text("{not json")
    rows, warnings = aggregate_reports([run])
    assert len(rows) == 1 and rows[0]["f1_macro"] == 1.0 and rows[0]["run"] == "run1"
    assert len(warnings) == 1 and "bad.probe.json" in warnings[0]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == "run,mode,band_set,f1_macro,miou,aa,epochs,seed"
    assert text.splitlines()[1] == "run1,linear,B2,1.0,1.0,1.0,5,3"


def test_aggregate_of_nothing_is_header_only(tmp_path):
    rows, warnings = aggregate_reports([tmp_path])
    assert rows == [] and warnings == []
    assert rows_to_csv(rows) == "run,mode,band_set,f1_macro,miou,aa,epochs,seed\n"
