"""Frozen-encoder evaluation: linear and segmentation probes, metrics, embedding export."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import nncore
from .distill import DistillModel
from .optimsched import SGD
from .rasterstore import Manifest, SplitData, load_split
from .trainer import load_checkpoint
from .viewsampler import bandset_name, keyed_rng

log = logging.getLogger(__name__)

PROBE_LR = 0.01
PROBE_MOMENTUM = 0.9
CLASSIFIER_HIDDEN = 128
DECODER_HIDDEN = 32


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    f1_macro: float
    per_class_f1: list[float]
    per_class_iou: list[float]
    miou: float
    aa: float


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    truth = np.asarray(truth).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    idx = truth * n_classes + pred
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _safe_div(num, den):
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def compute_metrics(confusion) -> Metrics:
    """Macro F1 over all classes; mIoU and average accuracy (mean recall) over
    the classes that occur in the ground truth. Undefined ratios count as 0."""
    c = np.asarray(confusion)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"confusion must be square, got shape {c.shape}")
    if (c < 0).any():
        raise ValueError("confusion counts must be non-negative")
    if c.sum() == 0:
        raise ValueError("confusion matrix is all zeros")
    c = c.astype(np.float64)
    tp = np.diag(c)
    truth = c.sum(axis=1)
    predicted = c.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, truth)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    iou = _safe_div(tp, truth + predicted - tp)
    present = truth > 0
    return Metrics(
        f1_macro=float(f1.mean()),
        per_class_f1=f1.tolist(),
        per_class_iou=iou.tolist(),
        miou=float(iou[present].mean()),
        aa=float(recall[present].mean()),
    )


@dataclass
class ProbeReport:
    mode: str  # "linear" | "seg" | "majority" | "seg-majority"
    band_set: list[int]
    band_names: str
    confusion: list[list[int]]
    f1_macro: float
    per_class_iou: list[float]
    miou: float
    aa: float
    train_curve: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, mode, band_set, names, confusion, curve=(), meta=None):
        m = compute_metrics(confusion)
        return cls(
            mode, [int(b) for b in band_set], names, np.asarray(confusion).astype(int).tolist(),
            m.f1_macro, m.per_class_iou, m.miou, m.aa, [float(v) for v in curve], dict(meta or {}),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "ProbeReport":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


def build_classifier(in_dim: int, n_classes: int, hidden: int = CLASSIFIER_HIDDEN, seed: int = 0) -> nn.Module:
    """Dense -> BN -> ReLU -> Dense producing logits; softmax lives in the loss."""
    return nncore.build_mlp(in_dim, hidden, n_classes, seed=seed)


class SegDecoder(nn.Module):
    """Two (bilinear x2, conv3x3, BN, ReLU) stages and a 1x1 classifier conv."""

    def __init__(self, in_channels: int, n_classes: int, out_size: int, hidden: int = DECODER_HIDDEN):
        super().__init__()
        self.out_size = out_size
        self.stage1 = nn.Sequential(nn.Conv2d(in_channels, hidden, 3, 1, 1), nncore.BatchNorm(hidden), nn.ReLU())
        self.stage2 = nn.Sequential(nn.Conv2d(hidden, hidden, 3, 1, 1), nncore.BatchNorm(hidden), nn.ReLU())
        self.classify = nn.Conv2d(hidden, n_classes, 1)

    def forward(self, x):
        x = self.stage1(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        x = self.stage2(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        x = self.classify(x)
        if x.shape[-1] != self.out_size or x.shape[-2] != self.out_size:
            x = F.interpolate(x, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False)
        return x


def build_decoder(in_channels: int, n_classes: int, out_size: int, seed: int = 0) -> SegDecoder:
    return nncore.init_params(SegDecoder(in_channels, n_classes, out_size), seed)


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------


def _frozen_encoder(ckpt) -> nn.Module:
    model = ckpt if isinstance(ckpt, DistillModel) else load_checkpoint(ckpt)[0]
    return model.student["encoder"]


def _band_input(split: SplitData, band_set: Sequence[int], channels: int) -> np.ndarray:
    if len(band_set) != channels:
        raise ValueError(
            f"band set {tuple(band_set)} has {len(band_set)} channels; the encoder takes {channels}"
        )
    return split.data[:, list(band_set)]


@torch.no_grad()
def frozen_features(encoder, x: np.ndarray, maps: bool = False, batch: int = 256) -> torch.Tensor:
    """Encoder outputs in eval mode without gradient; the encoder's mode is restored."""
    was = encoder.training
    encoder.eval()
    outs = []
    for i in range(0, len(x), batch):
        xb = torch.from_numpy(np.ascontiguousarray(x[i : i + batch]))
        outs.append(encoder.feature_maps(xb) if maps else encoder(xb))
    encoder.train(was)
    return torch.cat(outs)


def fit_head(head: nn.Module, x: torch.Tensor, y: torch.Tensor, epochs: int, seed: int, batch_size: int = 32) -> list[float]:
    """SGD (lr 0.01, momentum 0.9) on cross-entropy; returns the per-epoch mean loss."""
    opt = SGD(nncore.param_store(head), PROBE_MOMENTUM, 0.0)
    n = len(x)
    bs = min(batch_size, n)
    curve = []
    for epoch in range(epochs):
        head.train()
        order = torch.from_numpy(keyed_rng(seed, epoch).permutation(n))
        losses = []
        for b in range(n // bs):
            idx = order[b * bs : (b + 1) * bs]
            opt.zero_grad()
            loss = F.cross_entropy(head(x[idx]), y[idx])
            nncore.backward(loss)
            opt.step(PROBE_LR)
            losses.append(float(loss.detach()))
        curve.append(float(np.mean(losses)))
    return curve


@torch.no_grad()
def predict(head: nn.Module, x: torch.Tensor) -> np.ndarray:
    head.eval()
    return head(x).argmax(dim=1).numpy()


def _splits(manifest: Manifest, data):
    if data is not None:
        return data
    return load_split(manifest, "probe_train"), load_split(manifest, "probe_test")


def linear_probe(
    ckpt,
    manifest: Manifest,
    band_set: Sequence[int],
    epochs: int = 100,
    seed: int = 0,
    batch_size: int = 32,
    data: tuple[SplitData, SplitData] | None = None,
) -> ProbeReport:
    """Train a classifier head on frozen encoder features of ``band_set``.

    ``ckpt`` is a checkpoint path or an in-memory :class:`DistillModel`; the
    student encoder is used and never modified. ``data`` may carry preloaded
    (probe_train, probe_test) splits.
    """
    encoder = _frozen_encoder(ckpt)
    train, test = _splits(manifest, data)
    channels = encoder.specs[0].in_channels
    x_tr = frozen_features(encoder, _band_input(train, band_set, channels))
    x_te = frozen_features(encoder, _band_input(test, band_set, channels))
    y_tr = torch.from_numpy(train.class_labels)
    head = build_classifier(x_tr.shape[1], manifest.n_classes, seed=seed)
    curve = fit_head(head, x_tr, y_tr, epochs, seed, batch_size)
    conf = confusion_matrix(test.class_labels, predict(head, x_te), manifest.n_classes)
    return ProbeReport.from_confusion(
        "linear", band_set, bandset_name(band_set, train.bands), conf, curve,
        {"epochs": epochs, "seed": seed, "n_train": len(train), "n_test": len(test)},
    )


def seg_probe(
    ckpt,
    manifest: Manifest,
    band_set: Sequence[int],
    epochs: int = 100,
    seed: int = 0,
    batch_size: int = 32,
    data: tuple[SplitData, SplitData] | None = None,
) -> ProbeReport:
    """Train a segmentation decoder on frozen pre-pool encoder maps; report pixel metrics."""
    encoder = _frozen_encoder(ckpt)
    train, test = _splits(manifest, data)
    if train.label_maps is None or test.label_maps is None:
        raise ValueError("segmentation probing needs patches with label maps")
    channels = encoder.specs[0].in_channels
    m_tr = frozen_features(encoder, _band_input(train, band_set, channels), maps=True)
    m_te = frozen_features(encoder, _band_input(test, band_set, channels), maps=True)
    size = train.data.shape[-1]
    head = build_decoder(m_tr.shape[1], manifest.n_classes, size, seed=seed)
    curve = fit_head(head, m_tr, torch.from_numpy(train.label_maps), epochs, seed, batch_size)
    pred = np.concatenate([predict(head, m_te[i : i + 256]) for i in range(0, len(m_te), 256)])
    conf = confusion_matrix(test.label_maps, pred, manifest.n_classes)
    return ProbeReport.from_confusion(
        "seg", band_set, bandset_name(band_set, train.bands), conf, curve,
        {"epochs": epochs, "seed": seed, "n_train": len(train), "n_test": len(test)},
    )


def majority_baseline(train_labels, test_labels, n_classes: int, mode: str = "majority") -> ProbeReport:
    """Predict the most frequent training class everywhere (patches or pixels)."""
    train_labels = np.asarray(train_labels).ravel()
    test_labels = np.asarray(test_labels)
    majority = int(np.argmax(np.bincount(train_labels, minlength=n_classes)))
    conf = confusion_matrix(test_labels, np.full(test_labels.shape, majority), n_classes)
    return ProbeReport.from_confusion(mode, [], "-", conf, meta={"majority_class": majority})


def export_embeddings(ckpt, manifest: Manifest, band_set: Sequence[int], out_path, split: str = "probe_test") -> Path:
    """CSV with one row per patch: path, class label, then the encoder features."""
    encoder = _frozen_encoder(ckpt)
    data = load_split(manifest, split)
    feats = frozen_features(encoder, _band_input(data, band_set, encoder.specs[0].in_channels)).numpy()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch_path", "class_label"] + [f"f{i}" for i in range(feats.shape[1])])
    for path, label, row in zip(data.paths, data.class_labels, feats):
        w.writerow([path, int(label)] + [repr(float(v)) for v in row])
    out_path = Path(out_path)
    nncore.atomic_write(out_path, buf.getvalue().encode())
    return out_path


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("run", "mode", "band_set", "f1_macro", "miou", "aa", "epochs", "seed")


def aggregate_reports(run_dirs: Sequence) -> tuple[list[dict], list[str]]:
    """Collect ``*.probe.json`` reports into rows; unreadable files become warnings."""
    rows, warnings = [], []
    for d in run_dirs:
        d = Path(d)
        for path in sorted(d.glob("*.probe.json")):
            try:
                r = ProbeReport.load(path)
            except (OSError, ValueError, TypeError, KeyError) as e:
                warnings.append(f"skipping {path}: {e}")
                continue
            rows.append({
                "run": d.name,
                "mode": r.mode,
                "band_set": r.band_names,
                "f1_macro": r.f1_macro,
                "miou": r.miou,
                "aa": r.aa,
                "epochs": r.meta.get("epochs", ""),
                "seed": r.meta.get("seed", ""),
            })
    return rows, warnings


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
