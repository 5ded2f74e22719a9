"""How one patch becomes two training views: band selection, then augmentation.

Run: python demos/02_views_and_augmentation.py
"""

# %%
import numpy as np

from msdistill.augment import apply, draw_plan
from msdistill.rasterstore import band_names, default_bands, RasterPatch
from msdistill.viewsampler import SamplingPolicy, enumerate_eval_bandsets, sample_views

rng = np.random.default_rng(0)
bands = default_bands(10, 2)
patch = RasterPatch(bands, rng.normal(size=(12, 32, 32)).astype(np.float32), None, 0)
names = band_names(bands)

# %% Each policy draws a different pair of band selections.
for kind in ("single", "three", "rgb-s1s2", "ms-only"):
    policy = SamplingPolicy(kind)
    v1, v2, sel = sample_views(patch, policy, seed=7)
    print(f"{kind:>9}: view1 {[names[i] for i in sel.v1_band_ids]}  view2 {[names[i] for i in sel.v2_band_ids]}  shape {v1.shape}")

# %% Same seed, same views; the seed is the only source of randomness.
a = sample_views(patch, SamplingPolicy("single"), seed=11)[0]
b = sample_views(patch, SamplingPolicy("single"), seed=11)[0]
print("replayable:", np.array_equal(a, b))

# %% An augmentation plan is drawn first and then applied.
plan = draw_plan(seed=3, in_h=32, in_w=32, channels=1, out_size=24)
print(plan)
out = apply(a, plan)
print("augmented view:", out.shape, f"mean {out.mean():.3f}")

# %% Evaluation uses every band on its own for the single-channel encoder.
print("eval band sets:", [tuple(names[i] for i in s) for s in enumerate_eval_bandsets(SamplingPolicy("single"), bands)])
