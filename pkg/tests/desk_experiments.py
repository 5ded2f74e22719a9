"""Shared desk-scale pretraining runs for the directional acceptance criteria.

One synthetic dataset (2000 patches of 16x16 px) and, per seed, three 30-epoch
pretraining arms: single-channel with stop-gradient, the same with the
stop-gradient ablated, and MS-only. Runs and probe results are cached per
process so the criteria that share them do not retrain.
"""

from __future__ import annotations

import functools
import math
import tempfile
from pathlib import Path

import numpy as np

from msdistill.optimsched import TrainConfig
from msdistill.probe import linear_probe, majority_baseline, seg_probe
from msdistill.rasterstore import generate_synthetic_dataset, load_split
from msdistill.trainer import build_model, pretrain
from msdistill.viewsampler import SamplingPolicy, enumerate_eval_bandsets

SEEDS = (0, 1, 2, 3, 4)
N_PATCHES = 2000
PATCH_SIZE = 16
DATA_SEED = 1
EPOCHS = 30
WIDTH = 8
SEG_EPOCHS = 30
SEG_BANDS = ((2,), (4,), (10,))  # B4 (10 m), B6 (20 m), VV

ROOT = Path(tempfile.mkdtemp(prefix="msdistill-desk-"))


def config(seed: int, policy: str = "single", ablate: bool = False) -> TrainConfig:
    return TrainConfig(
        epochs=EPOCHS, width=WIDTH, seed=seed, policy=SamplingPolicy(policy),
        ablate_stop_gradient=ablate, checkpoint_every=EPOCHS,
    )


@functools.cache
def dataset():
    return generate_synthetic_dataset(ROOT / "data", N_PATCHES, 4, PATCH_SIZE, 10, 2, seed=DATA_SEED)


@functools.cache
def probe_data():
    m = dataset()
    return load_split(m, "probe_train"), load_split(m, "probe_test")


@functools.cache
def run(seed: int, policy: str = "single", ablate: bool = False):
    cfg = config(seed, policy, ablate)
    tag = f"{policy}{'-ablated' if ablate else ''}-s{seed}"
    return pretrain(dataset(), cfg, ROOT / tag)


def random_model(seed: int):
    return build_model(config(seed))


def threshold(factor: float) -> float:
    return factor / math.sqrt(config(0).proj_dim)


@functools.cache
def linear_f1(seed: int, arm: str) -> dict:
    """Macro F1 per eval band set for arm in {single, ms-only, random}."""
    model = random_model(seed) if arm == "random" else run(seed, arm).model
    data = probe_data()
    sets = enumerate_eval_bandsets(SamplingPolicy("single"), data[0].bands)
    return {bs: linear_probe(model, dataset(), bs, seed=seed, data=data).f1_macro for bs in sets}


@functools.cache
def seg_miou(seed: int, arm: str) -> float:
    model = random_model(seed) if arm == "random" else run(seed, arm).model
    data = probe_data()
    return float(np.mean([
        seg_probe(model, dataset(), bs, epochs=SEG_EPOCHS, seed=seed, data=data).miou for bs in SEG_BANDS
    ]))


@functools.cache
def majority(mode: str) -> float:
    """Macro F1 (linear) or mIoU (seg) of predicting the majority training class everywhere."""
    tr, te = probe_data()
    n = dataset().n_classes
    if mode == "linear":
        return majority_baseline(tr.class_labels, te.class_labels, n).f1_macro
    return majority_baseline(tr.label_maps, te.label_maps, n, mode="seg").miou


def sar_sets(bands) -> list[tuple[int, ...]]:
    return [(i,) for i, b in enumerate(bands) if b.modality.name == "SAR"]
