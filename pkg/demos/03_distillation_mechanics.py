"""Loss, EMA teacher and stop-gradient on a tiny model, plus the gradient checks.

Run: python demos/03_distillation_mechanics.py
"""

# %%
import torch

from msdistill import nncore
from msdistill.distill import DistillModel, directional_loss, ema_update, loss_path_gradcheck, total_loss, verify_stop_gradient

# %% The directional loss is 2 - 2 cos, so it only sees directions.
t = lambda *rows: torch.tensor(rows, dtype=torch.float64)
print("aligned", directional_loss(t((1, 0)), t((1, 0))).item())
print("orthogonal", directional_loss(t((1, 0)), t((0, 1))).item())
print("antipodal", directional_loss(t((1, 0)), t((-1, 0))).item())
print("scaled", directional_loss(t((3, 4)), t((6, 8))).item())

# %% Student and teacher start identical; the teacher has no predictor.
model = DistillModel(channels_in=1, width=8, depth_blocks=2, hidden_dim=32, proj_dim=16, seed=0)
print("student tensors:", len(model.theta), "teacher tensors:", len(model.xi))

v1, v2 = torch.randn(2, 16, 1, 16, 16)
print("symmetric loss:", total_loss(model, v1, v2).item(), total_loss(model, v2, v1).item())

# %% Stop-gradient: no teacher gradient, and the optimizer step leaves it alone.
print(verify_stop_gradient(model, v1, v2).summary())
ablated = DistillModel(channels_in=1, width=8, depth_blocks=2, hidden_dim=32, proj_dim=16, stop_gradient=False)
print(verify_stop_gradient(ablated, v1, v2).summary()[:120], "...")

# %% EMA: xi moves a tenth of the way toward theta per update (tau = 0.9).
with torch.no_grad():
    model.student["encoder"].layers[0].weight.add_(1.0)
w = "encoder.layers.0.weight"
gap0 = (model.theta[w] - model.xi[w]).abs().mean().item()
ema_update(model)
gap1 = (model.theta[w] - model.xi[w]).abs().mean().item()
print(f"gap after one update / before: {gap1 / gap0:.3f}")

# %% Finite differences against autograd, per layer kind and through the loss.
for name, rep in nncore.gradcheck_suite().items():
    print(f"{name:>18}: {rep.summary()}")
print(f"{'loss_path':>18}: {loss_path_gradcheck().summary()}")
