"""Cosine annealing with warm restarts and the momentum SGD update.

Run: python demos/04_learning_rate_schedule.py
"""

# %%
import torch

from msdistill.optimsched import SGD, TrainConfig, lr_at, restart_epochs

cfg = TrainConfig()
print("restarts within 400 epochs:", restart_epochs(cfg, 400))
for e in (0, 5, 9, 10, 20, 29, 30, 70, 150, 310, 399):
    print(f"epoch {e:3d}: lr {lr_at(e, cfg):.5f}")

# %% A crude text plot of the first 70 epochs.
for e in range(0, 70, 3):
    print(f"{e:3d} " + "#" * int(lr_at(e, cfg) * 200))

# %% Heavy-ball SGD on |w|^2 / 2: the norm shrinks by about sqrt(0.9) per step.
w = torch.tensor([0.3, -0.4], dtype=torch.float64)
opt = SGD({"w": w}, momentum=0.9)
for step in range(1, 201):
    opt.step(0.1, {"w": w.clone()})
    if step % 50 == 0:
        print(f"step {step}: |w| = {w.norm().item():.3e}")
