"""End to end at toy scale: pretrain, probe against a random encoder, export, report.

Run: python demos/05_pretrain_probe_report.py   (a few minutes on one core)
"""

# %%
import logging
import tempfile
from pathlib import Path

import numpy as np

from msdistill.optimsched import TrainConfig
from msdistill.probe import aggregate_reports, export_embeddings, linear_probe, rows_to_csv, seg_probe
from msdistill.rasterstore import generate_synthetic_dataset, load_split
from msdistill.trainer import build_model, pretrain

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = Path(tempfile.mkdtemp(prefix="msdistill-demo-"))
manifest = generate_synthetic_dataset(root / "data", 600, 4, 16, seed=1)
data = load_split(manifest, "probe_train"), load_split(manifest, "probe_test")

# %% Ten epochs of single-channel MS+SAR pretraining on a narrow encoder.
cfg = TrainConfig(epochs=10, width=8, seed=0)
state = pretrain(manifest, cfg, root / "run")
print("history:\n" + (root / "run" / "history.csv").read_text())

# %% Linear probes per band, pretrained vs an untrained encoder of the same shape.
random_model = build_model(cfg)
for bs in [(2,), (6,), (10,), (11,)]:
    pre = linear_probe(state.model, manifest, bs, epochs=50, data=data)
    rnd = linear_probe(random_model, manifest, bs, epochs=50, data=data)
    pre.save(root / "run" / f"linear_{pre.band_names}.probe.json")
    print(f"{pre.band_names:>3}: pretrained F1 {pre.f1_macro:.3f}   random F1 {rnd.f1_macro:.3f}")

# %% A segmentation decoder on the frozen feature maps.
seg = seg_probe(state.model, manifest, (2,), epochs=10, data=data)
print(f"segmentation on {seg.band_names}: mIoU {seg.miou:.3f}, AA {seg.aa:.3f}")

# %% Embeddings for external visualization, and the aggregate table.
path = export_embeddings(state.model, manifest, (10,), root / "vv_embeddings.csv")
x = np.loadtxt(path, delimiter=",", skiprows=1, usecols=range(2, 2 + state.model.feature_dim))
print("exported embeddings:", x.shape)
rows, _ = aggregate_reports([root / "run"])
print(rows_to_csv(rows))
