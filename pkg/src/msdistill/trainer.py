"""Pretraining loop, checkpoints, history and collapse diagnostics."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nncore
from .augment import AugmentPlan, apply, draw_plan
from .distill import (
    DistillModel,
    ema_update,
    projection_spread,
    student_projections,
    teacher_snapshot,
    total_loss,
)
from .optimsched import SGD, TrainConfig, lr_at
from .rasterstore import Manifest, RasterPatch, normalize, read_patch
from .viewsampler import derive_seed, keyed_rng, sample_views

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "mean_loss", "lr", "collapse_metric", "seconds")

# seed streams under (root_seed, patch_index, epoch, stream)
_VIEWS, _AUG1, _AUG2, _PROBE = 0, 1, 2, 3
_SHUFFLE = 0x5EED


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainState:
    model: DistillModel
    cfg: TrainConfig
    epoch: int = 0
    global_step: int = 0
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def build_model(cfg: TrainConfig) -> DistillModel:
    torch.manual_seed(cfg.seed)
    return DistillModel(
        channels_in=cfg.policy.channels,
        width=cfg.width,
        depth_blocks=cfg.depth_blocks,
        hidden_dim=cfg.hidden_dim,
        proj_dim=cfg.proj_dim,
        tau=cfg.tau,
        seed=cfg.seed,
        stop_gradient=not cfg.ablate_stop_gradient,
    )


def save_checkpoint(model: DistillModel, path, cfg: TrainConfig, epoch: int) -> Path:
    path = Path(path)
    sidecar = {
        "arch": model.arch,
        "config": cfg.to_dict(),
        "epoch": epoch,
        "global_step": model.global_step,
        "stop_gradient": model.stop_gradient,
        "tau": model.tau,
    }
    nncore.write_tensors(path, model.state_tensors(), sidecar)
    return path


def load_checkpoint(path) -> tuple[DistillModel, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = DistillModel(**meta["arch"], tau=meta["tau"], stop_gradient=meta.get("stop_gradient", True))
    model.load_state_tensors(nncore.read_tensors(path))
    return model, meta


def load_patches(manifest: Manifest, split: str) -> list[RasterPatch]:
    paths = manifest.paths(split)
    if not paths:
        raise ValueError(f"split {split!r} is empty")
    return [normalize(read_patch(p), manifest.band_stats) for p in paths]


def make_batch(patches, indices, cfg: TrainConfig, epoch: int):
    """Two augmented view batches for the given patch indices.

    Every random choice is keyed by (seed, patch index, epoch), so results do
    not depend on batch composition or iteration order.
    """
    v1s, v2s = [], []
    for idx in indices:
        p = patches[idx]
        out = cfg.out_size or p.height
        v1, v2, _ = sample_views(p, cfg.policy, derive_seed(cfg.seed, idx, epoch, _VIEWS))
        c = v1.shape[0]
        t1 = draw_plan(derive_seed(cfg.seed, idx, epoch, _AUG1), p.height, p.width, c, out, cfg.augment)
        t2 = draw_plan(derive_seed(cfg.seed, idx, epoch, _AUG2), p.height, p.width, c, out, cfg.augment)
        v1s.append(apply(v1, t1))
        v2s.append(apply(v2, t2))
    return torch.from_numpy(np.stack(v1s)), torch.from_numpy(np.stack(v2s))


def collapse_probe_batch(patches, cfg: TrainConfig) -> torch.Tensor:
    """Fixed, un-augmented first views of the first ``collapse_probe_size`` patches."""
    views = []
    for idx in range(min(cfg.collapse_probe_size, len(patches))):
        p = patches[idx]
        v1, _, _ = sample_views(p, cfg.policy, derive_seed(cfg.seed, idx, 0, _PROBE))
        out = cfg.out_size or p.height
        plan = AugmentPlan(False, False, 0, (0, 0, p.height, p.width), out, None, None, False, 0)
        views.append(apply(v1, plan))
    return torch.from_numpy(np.stack(views))


def collapse_metric(model: DistillModel, probe_batch) -> float:
    """Spread of L2-normalized student projections (eval mode) over ``probe_batch``."""
    return projection_spread(student_projections(model, probe_batch))


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for rec in history:
        w.writerow([rec["epoch"], repr(rec["mean_loss"]), repr(rec["lr"]), repr(rec["collapse_metric"]), repr(rec["seconds"])])
    return buf.getvalue()


def train_step(model: DistillModel, opt: SGD, v1, v2, lr: float, debug_checks: bool = False) -> float:
    """Loss, backward, SGD on the student, then EMA on the teacher. Returns the loss."""
    model.zero_grad()
    loss = total_loss(model, v1, v2)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at global step {model.global_step}")
    nncore.backward(loss)
    if not model.stop_gradient:
        model.fold_teacher_grads()
    before = teacher_snapshot(model) if debug_checks else None
    opt.step(lr)
    if before is not None:
        after = teacher_snapshot(model)
        changed = [k for k in before if before[k].tobytes() != after[k].tobytes()]
        if changed:
            raise AssertionError(f"optimizer step modified teacher entries {changed}")
    ema_update(model)
    model.global_step += 1
    return value


def _dump_divergence(out_dir: Path, state: TrainState, epoch: int, batch, lr: float, err: Exception):
    stats = {
        k: {"max_abs": float(p.detach().abs().max()), "finite": bool(torch.isfinite(p).all())}
        for k, p in state.model.theta.items()
    }
    doc = {
        "error": str(err),
        "epoch": epoch,
        "global_step": state.model.global_step,
        "lr": lr,
        "batch_indices": [int(i) for i in batch],
        "student_params": stats,
    }
    path = out_dir / f"diverged_step{state.model.global_step}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def pretrain(manifest: Manifest, cfg: TrainConfig, out_dir, model: DistillModel | None = None) -> TrainState:
    """Self-supervised pretraining on the ``pretrain`` split.

    Writes ``ckpt_epoch{N}.rsck`` every ``cfg.checkpoint_every`` epochs and at
    the end, and rewrites ``history.csv`` after every epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patches = load_patches(manifest, "pretrain")
    n = len(patches)
    if n < cfg.batch_size:
        raise ValueError(f"pretrain split has {n} patches, fewer than one batch of {cfg.batch_size}")
    model = model or build_model(cfg)
    state = TrainState(model, cfg)
    opt = SGD(model.theta, cfg.momentum, cfg.weight_decay)
    probe = collapse_probe_batch(patches, cfg)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = keyed_rng(cfg.seed, _SHUFFLE, epoch).permutation(n)
        losses = []
        for b in range(n // cfg.batch_size):  # last partial batch dropped
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            v1, v2 = make_batch(patches, batch, cfg, epoch)
            try:
                losses.append(train_step(model, opt, v1, v2, lr, cfg.debug_checks))
            except (TrainingDiverged, FloatingPointError) as err:
                dump = _dump_divergence(out_dir, state, epoch, batch, lr, err)
                raise TrainingDiverged(f"{err}; diagnostics in {dump}") from err
        elapsed = time.perf_counter() - t0
        rec = {
            "epoch": epoch + 1,
            "mean_loss": float(np.mean(losses)),
            "lr": lr,
            "collapse_metric": collapse_metric(model, probe),
            "seconds": round(elapsed, 3) if cfg.log_wall_time else 0.0,
        }
        state.history.append(rec)
        state.epoch = epoch + 1
        state.global_step = model.global_step
        log.info(
            "epoch %d loss %.4f lr %.4f collapse %.4f (%.1fs)",
            rec["epoch"], rec["mean_loss"], lr, rec["collapse_metric"], elapsed,
        )
        nncore.atomic_write(out_dir / "history.csv", history_csv(state.history).encode())
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
            path = out_dir / f"ckpt_epoch{state.epoch}.rsck"
            if path not in state.checkpoints:
                save_checkpoint(model, path, cfg, state.epoch)
                state.checkpoints.append(path)
    return state
