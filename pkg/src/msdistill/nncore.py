"""Layer vocabulary, encoder/head builders, gradient checking and tensor files.

Reverse-mode differentiation is delegated to torch autograd; this module fixes
the layer set, initialization, shape checking, and an independent
finite-difference harness that verifies the gradients autograd produces.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class LayerKind(str, enum.Enum):
    CONV2D = "Conv2d"
    BATCHNORM = "BatchNorm"
    RELU = "ReLU"
    MAXPOOL = "MaxPool"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    DENSE = "Dense"
    RESIDUAL = "ResidualBlock"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))

    @property
    def in_channels(self) -> int | None:
        p = self.params
        return p.get("in_channels", p.get("in_features", p.get("num_features")))


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


class BatchNorm(nn.Module):
    """Batch normalization over channels for both (N, C) and (N, C, H, W) inputs."""

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x):
        return F.batch_norm(
            x,
            self.running_mean,
            self.running_var,
            self.weight,
            self.bias,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ResidualBlock(nn.Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus (projected) shortcut, then ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, 0, bias=False),
                BatchNorm(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


def build_layer(spec: LayerSpec) -> nn.Module:
    p = spec.params
    k = spec.kind
    if k == LayerKind.CONV2D:
        return nn.Conv2d(
            p["in_channels"],
            p["out_channels"],
            p.get("kernel", 3),
            p.get("stride", 1),
            p.get("padding", 1),
            bias=p.get("bias", True),
        )
    if k == LayerKind.BATCHNORM:
        return BatchNorm(p["num_features"], p.get("momentum", BN_MOMENTUM), p.get("eps", BN_EPS))
    if k == LayerKind.RELU:
        return nn.ReLU()
    if k == LayerKind.MAXPOOL:
        return nn.MaxPool2d(p.get("kernel", 2), p.get("stride", p.get("kernel", 2)))
    if k == LayerKind.GLOBAL_AVG_POOL:
        return GlobalAvgPool()
    if k == LayerKind.DENSE:
        return nn.Linear(p["in_features"], p["out_features"], bias=p.get("bias", True))
    if k == LayerKind.RESIDUAL:
        return ResidualBlock(p["in_channels"], p["out_channels"], p.get("stride", 1))
    raise ValueError(f"unknown layer kind {k}")


class Net(nn.Module):
    """A sequential stack built from ``LayerSpec``s with per-layer shape checks."""

    def __init__(self, specs: list[LayerSpec]):
        super().__init__()
        self.specs = list(specs)
        self.layers = nn.ModuleList(build_layer(s) for s in self.specs)

    def run(self, x, stop: int | None = None):
        for i, (spec, layer) in enumerate(zip(self.specs[:stop], self.layers[:stop])):
            want = spec.in_channels
            if want is not None and (x.dim() < 2 or x.shape[1] != want):
                raise ShapeError(
                    f"layer {i} ({spec.kind.value}) expects {want} input channels, "
                    f"got input of shape {tuple(x.shape)}"
                )
            x = layer(x)
        return x

    def forward(self, x):
        return self.run(x)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Kaiming-uniform (fan-in, ReLU gain) weights, zero biases, BN scale 1 / offset 0."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, BatchNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
    return module


def param_store(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named trainable parameters in deterministic registration order."""
    return OrderedDict(module.named_parameters())


def forward(net: nn.Module, x: torch.Tensor, mode: str = "train") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    net.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return net(x)
    return net(x)


def backward(loss: torch.Tensor) -> None:
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise RuntimeError("loss has no recorded tape; was it computed under no_grad?")
    loss.backward()


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


class Encoder(Net):
    def __init__(self, specs, feature_dim: int, downsample: int):
        super().__init__(specs)
        self.feature_dim = feature_dim
        self.downsample = downsample

    def _check(self, x):
        if x.dim() != 4 or min(x.shape[-2:]) < self.downsample:
            raise ShapeError(
                f"input {tuple(x.shape)} is smaller than the encoder's total downsampling "
                f"factor {self.downsample}"
            )

    def forward(self, x):
        self._check(x)
        return self.run(x)

    def feature_maps(self, x):
        """Activations of the last residual stage, before global pooling."""
        self._check(x)
        return self.run(x, stop=-1)


def stage_channels(width: int, depth_blocks: int) -> list[int]:
    return [width * min(2**s, 4) for s in range(depth_blocks - 1)] + [4 * width]


def encoder_specs(channels_in: int, width: int, depth_blocks: int) -> list[LayerSpec]:
    specs = [
        LayerSpec(LayerKind.CONV2D, dict(in_channels=channels_in, out_channels=width, kernel=3, stride=1, padding=1, bias=False)),
        LayerSpec(LayerKind.BATCHNORM, dict(num_features=width)),
        LayerSpec(LayerKind.RELU),
    ]
    c = width
    for s, out in enumerate(stage_channels(width, depth_blocks)):
        specs.append(LayerSpec(LayerKind.RESIDUAL, dict(in_channels=c, out_channels=out, stride=1 if s == 0 else 2)))
        c = out
    specs.append(LayerSpec(LayerKind.GLOBAL_AVG_POOL))
    return specs


def build_encoder(channels_in: int, width: int = 32, depth_blocks: int = 3, seed: int = 0) -> Encoder:
    """Residual CNN: stem conv, one residual block per stage (stride 2 after the
    first), global average pool. Output features have dimension ``4 * width``."""
    if channels_in not in (1, 3):
        raise ValueError("channels_in must be 1 or 3")
    if width < 8 or depth_blocks < 2:
        raise ValueError("need width >= 8 and depth_blocks >= 2")
    enc = Encoder(encoder_specs(channels_in, width, depth_blocks), 4 * width, 2 ** (depth_blocks - 1))
    return init_params(enc, seed)


def mlp_specs(in_dim: int, hidden: int, out_dim: int) -> list[LayerSpec]:
    return [
        LayerSpec(LayerKind.DENSE, dict(in_features=in_dim, out_features=hidden)),
        LayerSpec(LayerKind.BATCHNORM, dict(num_features=hidden)),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.DENSE, dict(in_features=hidden, out_features=out_dim)),
    ]


def build_mlp(in_dim: int, hidden: int, out_dim: int, seed: int = 0) -> Net:
    """Dense -> BatchNorm -> ReLU -> Dense, used for projector, predictor and probe heads."""
    return init_params(Net(mlp_specs(in_dim, hidden, out_dim)), seed)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    tolerance: float
    per_param: dict[str, float]  # max relative error per parameter
    n_coords: int
    fraction_within: float
    max_rel_error: float
    passed: bool
    failure: str | None = None

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = (
            f"{status}: {self.n_coords} coords, {self.fraction_within:.2%} within "
            f"{self.tolerance:g}, max rel err {self.max_rel_error:.3g}"
        )
        return msg + (f" ({self.failure})" if self.failure else "")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tolerance: float = 1e-3,
    h: float = 1e-5,
    coverage: float = 0.99,
    max_factor: float = 10.0,
    corrupt: Callable[[dict], dict] | None = None,
    max_coords: int = 10_000,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    ``params`` should be float64 leaf tensors with ``requires_grad``. Passing
    requires at least ``coverage`` of coordinates within ``tolerance`` and no
    coordinate above ``max_factor * tolerance``. With ``coords_per_param`` only
    that many coordinates per tensor (drawn with ``seed``) are differenced.
    """
    rng = np.random.default_rng(seed)
    chosen = {}
    for name, p in params.items():
        n = p.numel()
        if coords_per_param is None or n <= coords_per_param:
            chosen[name] = np.arange(n)
        else:
            chosen[name] = np.sort(rng.choice(n, coords_per_param, replace=False))
    n_coords = sum(len(c) for c in chosen.values())
    if n_coords > max_coords:
        raise ValueError(f"{n_coords} coordinates exceed the check budget of {max_coords}")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        return GradcheckReport(tolerance, {}, n_coords, 0.0, math.inf, False, "non-finite loss at base point")
    loss.backward()
    analytic = {
        k: (p.grad.detach().cpu().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for k, p in params.items()
    }
    if corrupt is not None:
        analytic = corrupt(analytic)

    per_param, errors = {}, []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = chosen[name]
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = loss_fn().item()
                flat[i] = orig - h
                f_minus = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    return GradcheckReport(
                        tolerance, per_param, n_coords, 0.0, math.inf, False,
                        f"non-finite loss perturbing {name}[{i}]",
                    )
                numeric[j] = (f_plus - f_minus) / (2 * h)
            a = analytic[name].reshape(-1)[idx]
            if not np.isfinite(a).all():
                bad = int(np.flatnonzero(~np.isfinite(a))[0])
                return GradcheckReport(
                    tolerance, per_param, n_coords, 0.0, math.inf, False,
                    f"non-finite analytic gradient at {name}[{int(idx[bad])}]",
                )
            err = relative_error(a, numeric)
            per_param[name] = float(err.max()) if err.size else 0.0
            errors.append(err)
    all_err = np.concatenate(errors) if errors else np.zeros(0)
    frac = float((all_err < tolerance).mean()) if all_err.size else 1.0
    max_err = float(all_err.max()) if all_err.size else 0.0
    passed = frac >= coverage and max_err < max_factor * tolerance
    return GradcheckReport(tolerance, per_param, n_coords, frac, max_err, passed)


def gradcheck(
    net_builder: Callable[[], nn.Module],
    input_shape: tuple[int, ...],
    tolerance: float = 1e-3,
    seed: int = 0,
    mode: str = "train",
    nudge: float = 0.0,
    check_input: bool = True,
    corrupt: Callable[[dict], dict] | None = None,
    h: float = 1e-5,
    coords_per_param: int | None = None,
) -> GradcheckReport:
    """Gradient check of ``sum(net(x) * r)`` for a random input ``x`` and random
    output weights ``r``, in float64. ``nudge`` pushes input entries at least that
    far from zero so ReLU kinks do not fall inside the difference stencil."""
    g = torch.Generator().manual_seed(seed)
    net = net_builder().double()
    net.train(mode == "train")
    x = torch.randn(input_shape, generator=g, dtype=torch.float64)
    if nudge > 0:
        x = torch.sign(x) * torch.clamp(x.abs(), min=nudge)
    with torch.no_grad():
        out_shape = net(x).shape
    r = torch.randn(out_shape, generator=g, dtype=torch.float64)
    params = OrderedDict(net.named_parameters())
    if check_input:
        x.requires_grad_(True)
        params["input"] = x
    return check_gradients(
        lambda: (net(x) * r).sum(), params, tolerance, h=h, corrupt=corrupt,
        coords_per_param=coords_per_param, seed=seed,
    )


def gradcheck_suite(tolerance: float = 1e-3, seed: int = 0) -> "OrderedDict[str, GradcheckReport]":
    """Gradient check of every layer kind (BatchNorm in both modes and both input
    ranks) plus a small encoder, all in float64."""
    def net(*specs):
        return lambda: init_params(Net(list(specs)), seed)

    conv = LayerSpec(LayerKind.CONV2D, dict(in_channels=2, out_channels=3, kernel=3, stride=2, padding=1))
    cases = OrderedDict(
        conv2d=(net(conv), (2, 2, 6, 6), {}),
        batchnorm_4d=(net(LayerSpec(LayerKind.BATCHNORM, dict(num_features=3))), (4, 3, 3, 3), {}),
        batchnorm_2d=(net(LayerSpec(LayerKind.BATCHNORM, dict(num_features=5))), (6, 5), {}),
        batchnorm_eval=(net(LayerSpec(LayerKind.BATCHNORM, dict(num_features=3))), (4, 3, 3, 3), {"mode": "eval"}),
        relu=(net(LayerSpec(LayerKind.RELU)), (3, 4), {"nudge": 0.05}),
        maxpool=(net(LayerSpec(LayerKind.MAXPOOL, dict(kernel=2))), (2, 2, 4, 4), {}),
        global_avg_pool=(net(LayerSpec(LayerKind.GLOBAL_AVG_POOL)), (2, 3, 4, 4), {}),
        dense=(net(LayerSpec(LayerKind.DENSE, dict(in_features=5, out_features=4))), (3, 5), {}),
        residual_block=(
            net(LayerSpec(LayerKind.RESIDUAL, dict(in_channels=2, out_channels=4, stride=2))), (3, 2, 6, 6), {},
        ),
        residual_identity=(
            net(LayerSpec(LayerKind.RESIDUAL, dict(in_channels=3, out_channels=3, stride=1))), (3, 3, 4, 4), {},
        ),
        encoder=(lambda: build_encoder(1, 8, 2, seed=seed), (4, 1, 8, 8), {"coords_per_param": 64}),
    )
    out = OrderedDict()
    for name, (builder, shape, kw) in cases.items():
        out[name] = gradcheck(builder, shape, tolerance, seed=seed, **kw)
    return out


# ---------------------------------------------------------------------------
# Tensor files ("RSCK")
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RSCK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r} at offset 0")
    if len(buf) < 10:
        raise CheckpointFormatError("truncated header at offset 4")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    off, out = 10, OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointFormatError(f"truncated payload for {name!r} at offset {off}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as e:
        raise CheckpointFormatError(f"truncated record at offset {off}: {e}") from None
    if off != len(buf):
        raise CheckpointFormatError(f"trailing bytes at offset {off}")
    return out


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_tensors(path, tensors: Mapping[str, np.ndarray], sidecar: dict | None = None) -> None:
    """Write an RSCK file, plus ``<path>.json`` when ``sidecar`` is given."""
    atomic_write(path, encode_tensors(tensors))
    if sidecar is not None:
        text = json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        atomic_write(str(path) + ".json", text.encode())


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())
