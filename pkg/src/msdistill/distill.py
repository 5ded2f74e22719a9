"""Student-teacher distillation: symmetric normalized loss, EMA teacher, stop-gradient."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import nncore
from .optimsched import SGD

PREDICTOR = "predictor."


class CollapsedProjection(ValueError):
    """A prediction or projection row has (numerically) zero norm."""


class DistillModel(nn.Module):
    """Student (encoder, projector, predictor) and teacher (encoder, projector).

    The teacher starts as an exact copy of the student and afterwards moves only
    through :func:`ema_update`. With ``stop_gradient=False`` (ablation) the
    teacher branch is differentiated too and its gradient is folded into the
    matching student parameters, as if both branches shared weights.
    """

    def __init__(
        self,
        channels_in: int = 1,
        width: int = 32,
        depth_blocks: int = 3,
        hidden_dim: int = 256,
        proj_dim: int = 64,
        tau: float = 0.9,
        seed: int = 0,
        stop_gradient: bool = True,
    ):
        super().__init__()
        if not 0 <= tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        self.arch = dict(
            channels_in=channels_in, width=width, depth_blocks=depth_blocks,
            hidden_dim=hidden_dim, proj_dim=proj_dim,
        )
        self.tau = float(tau)
        self.proj_dim = proj_dim
        self.stop_gradient = stop_gradient
        encoder = nncore.build_encoder(channels_in, width, depth_blocks, seed=seed)
        feat = encoder.feature_dim
        self.student = nn.ModuleDict(
            OrderedDict(
                encoder=encoder,
                projector=nncore.build_mlp(feat, hidden_dim, proj_dim, seed=seed + 1),
                predictor=nncore.build_mlp(proj_dim, hidden_dim, proj_dim, seed=seed + 2),
            )
        )
        self.teacher = nn.ModuleDict(
            OrderedDict(
                encoder=copy.deepcopy(self.student["encoder"]),
                projector=copy.deepcopy(self.student["projector"]),
            )
        )
        self.teacher.requires_grad_(not stop_gradient)
        self.global_step = 0

    @property
    def feature_dim(self) -> int:
        return self.student["encoder"].feature_dim

    @property
    def theta(self):
        return nncore.param_store(self.student)

    @property
    def xi(self):
        return nncore.param_store(self.teacher)

    def student_predict(self, x):
        s = self.student
        s.train()
        return s["predictor"](s["projector"](s["encoder"](x)))

    def teacher_project(self, x):
        t = self.teacher
        t.eval()
        if self.stop_gradient:
            with torch.no_grad():
                return t["projector"](t["encoder"](x))
        return t["projector"](t["encoder"](x))

    def fold_teacher_grads(self):
        """Ablation only: add teacher-branch gradients onto the student's."""
        theta = self.theta
        for name, p in self.xi.items():
            if p.grad is not None:
                tp = theta[name]
                tp.grad = p.grad.clone() if tp.grad is None else tp.grad + p.grad

    def zero_grad(self, set_to_none: bool = True):
        super().zero_grad(set_to_none=set_to_none)

    # -- serialization ------------------------------------------------------

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for prefix, mod in (("student.", self.student), ("teacher.", self.teacher)):
            for k, v in mod.state_dict().items():
                out[prefix + k] = v.detach().cpu().numpy()
        out["meta.tau"] = np.array(self.tau, dtype=np.float32)
        out["meta.global_step"] = np.array(self.global_step, dtype=np.float32)
        return out

    def load_state_tensors(self, tensors):
        for prefix, mod in (("student.", self.student), ("teacher.", self.teacher)):
            sd = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(prefix)}
            mod.load_state_dict(sd, strict=True)
        self.global_step = int(tensors["meta.global_step"])


def directional_loss(pred: torch.Tensor, proj: torch.Tensor, stop_gradient: bool = True) -> torch.Tensor:
    """Batch mean of ``2 - 2 * cos(pred_i, proj_i)``; ``proj`` is a constant target
    unless ``stop_gradient`` is False."""
    if pred.shape != proj.shape or pred.dim() != 2:
        raise ValueError(f"pred {tuple(pred.shape)} and proj {tuple(proj.shape)} must be equal (B, D)")
    if stop_gradient:
        proj = proj.detach()
    pn = pred.norm(dim=1, keepdim=True)
    zn = proj.norm(dim=1, keepdim=True)
    if bool((pn < 1e-12).any()) or bool((zn < 1e-12).any()):
        raise CollapsedProjection("zero-norm row; the direction is undefined")
    cos = ((pred / pn) * (proj / zn)).sum(dim=1)
    return (2 - 2 * cos).mean()


def total_loss(model: DistillModel, v1: torch.Tensor, v2: torch.Tensor) -> torch.Tensor:
    """Symmetric loss: student predicts the teacher's projection of the other view, both ways.

    The student sees both view batches in one forward pass, so its batch-norm
    statistics pool the two views (often two modalities), as its running
    statistics do at evaluation time.
    """
    if v1.shape != v2.shape:
        raise ValueError(f"view batches differ in shape: {tuple(v1.shape)} vs {tuple(v2.shape)}")
    p1, p2 = model.student_predict(torch.cat([v1, v2])).split(len(v1))
    z1, z2 = model.teacher_project(v1), model.teacher_project(v2)
    sg = model.stop_gradient
    return directional_loss(p1, z2, sg) + directional_loss(p2, z1, sg)


@torch.no_grad()
def ema_update(model: DistillModel) -> None:
    """``xi <- tau * xi + (1 - tau) * theta`` for teacher parameters and BN statistics.

    Evaluated as ``xi + (1 - tau) * (theta - xi)`` so that ``xi == theta`` is an
    exact fixed point in floating point.
    """
    s_state = model.student.state_dict()
    t_state = model.teacher.state_dict()
    missing = set(t_state) - set(s_state)
    if missing:
        raise KeyError(f"teacher entries without a student counterpart: {sorted(missing)}")
    tau = model.tau
    for name, xi in t_state.items():
        theta = s_state[name]
        xi.add_((theta - xi) * (1 - tau))


def teacher_snapshot(model: DistillModel) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.teacher.state_dict().items()}


@dataclass
class StopGradientReport:
    passed: bool
    teacher_params_with_grad: list[str] = field(default_factory=list)
    teacher_changed_by_step: list[str] = field(default_factory=list)

    def summary(self) -> str:
        if self.passed:
            return "PASS: teacher receives no gradient and is untouched by the optimizer step"
        return (
            f"FAIL: gradients on {self.teacher_params_with_grad}; "
            f"changed by step: {self.teacher_changed_by_step}"
        )


def verify_stop_gradient(model: DistillModel, v1: torch.Tensor, v2: torch.Tensor, lr: float = 0.1) -> StopGradientReport:
    """Run loss, backward and one optimizer step on a copy of ``model`` and report
    any teacher parameter that received gradient or changed."""
    m = copy.deepcopy(model)
    m.zero_grad()
    before = teacher_snapshot(m)
    loss = total_loss(m, v1, v2)
    nncore.backward(loss)
    with_grad = [
        k for k, p in m.xi.items() if p.grad is not None and bool((p.grad != 0).any())
    ]
    if not m.stop_gradient:
        m.fold_teacher_grads()
    SGD(m.theta, momentum=0.9).step(lr)
    after = teacher_snapshot(m)
    changed = [k for k in before if before[k].tobytes() != after[k].tobytes()]
    return StopGradientReport(not with_grad and not changed, with_grad, changed)


def loss_path_gradcheck(tolerance: float = 1e-3, seed: int = 0, coords_per_param: int = 48) -> nncore.GradcheckReport:
    """Finite-difference check of the symmetric loss with respect to every student
    tensor and both input views, through encoder, projector and predictor (float64).

    Teacher targets are computed once and held fixed: under stop-gradient they are
    constants to autograd, so differencing through them would measure a different
    function.
    """
    model = DistillModel(1, width=8, depth_blocks=2, hidden_dim=16, proj_dim=8, seed=seed).double()
    g = torch.Generator().manual_seed(seed)
    v1 = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    v2 = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    z1, z2 = model.teacher_project(v1), model.teacher_project(v2)
    v1.requires_grad_(True)
    v2.requires_grad_(True)

    def loss():
        return directional_loss(model.student_predict(v1), z2) + directional_loss(model.student_predict(v2), z1)

    params = OrderedDict(model.theta)
    params["view1"], params["view2"] = v1, v2
    return nncore.check_gradients(
        loss, params, tolerance, coords_per_param=coords_per_param, seed=seed, max_coords=50_000,
    )


@torch.no_grad()
def embedding(model: DistillModel, views, source: str = "student") -> np.ndarray:
    """Encoder features (before the projector) in eval mode."""
    if source not in ("student", "teacher"):
        raise ValueError("source must be 'student' or 'teacher'")
    enc = (model.student if source == "student" else model.teacher)["encoder"]
    was = enc.training
    enc.eval()
    x = torch.as_tensor(np.asarray(views), dtype=torch.float32)
    out = enc(x).numpy()
    enc.train(was)
    return out


@torch.no_grad()
def student_projections(model: DistillModel, views) -> np.ndarray:
    s = model.student
    was = s.training
    s.eval()
    x = torch.as_tensor(np.asarray(views), dtype=torch.float32)
    out = s["projector"](s["encoder"](x)).numpy()
    s.train(was)
    return out


def projection_spread(proj: np.ndarray) -> float:
    """Mean over dimensions of the per-dimension std of L2-normalized rows.

    About ``1/sqrt(D)`` for directions spread over the sphere, 0 when collapsed.
    """
    proj = np.asarray(proj, dtype=np.float64)
    norms = np.linalg.norm(proj, axis=1, keepdims=True)
    unit = proj / np.maximum(norms, 1e-12)
    return float(unit.std(axis=0).mean())
