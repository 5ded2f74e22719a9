"""Raster patches: data model, binary patch files, band statistics and a synthetic generator.

A patch holds ``B = n_ms + n_sar`` co-registered bands (multi-spectral first,
SAR polarizations last) plus an optional pixel label map and patch label.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"RSP1"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHB")  # magic, version, n_bands, height, width, flags
_BAND = struct.Struct("<HBH")  # band_id, modality, resolution_m
_U16 = struct.Struct("<H")

FLAG_LABEL_MAP = 0x1
FLAG_CLASS_LABEL = 0x2

SPLITS = ("pretrain", "probe_train", "probe_test")

# Sentinel-2 10 m / 20 m bands in file order; 60 m atmospheric bands are not modelled.
S2_BAND_NAMES = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12")
S2_RESOLUTIONS = (10, 10, 10, 20, 20, 20, 10, 20, 20, 20)
SAR_NAMES = ("VV", "VH")


class PatchFormatError(ValueError):
    """Malformed patch file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid generator or dataset configuration."""


class Modality(enum.IntEnum):
    MS = 0
    SAR = 1


@dataclass(frozen=True)
class BandMeta:
    band_id: int
    modality: Modality
    nominal_resolution_m: int = 10


@dataclass(eq=False)
class RasterPatch:
    """One multi-band patch. ``data`` is ``(B, H, W)`` float32."""

    bands: list[BandMeta]
    data: np.ndarray
    label_map: np.ndarray | None = None
    class_label: int | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != len(self.bands):
            raise ValueError(
                f"data shape {self.data.shape} does not match {len(self.bands)} bands"
            )
        ids = [b.band_id for b in self.bands]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate band ids: {ids}")
        if sum(b.modality == Modality.SAR for b in self.bands) > 2:
            raise ValueError("at most two SAR polarizations per patch")
        if not np.isfinite(self.data).all():
            raise ValueError("patch data contains non-finite values")
        if self.label_map is not None:
            self.label_map = np.ascontiguousarray(self.label_map, dtype=np.uint16)
            if self.label_map.shape != self.data.shape[1:]:
                raise ValueError("label_map shape must equal (H, W)")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def ms_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.bands) if b.modality == Modality.MS]

    @property
    def sar_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.bands) if b.modality == Modality.SAR]

    def __eq__(self, other):
        if not isinstance(other, RasterPatch):
            return NotImplemented
        if self.bands != other.bands or self.class_label != other.class_label:
            return False
        if self.data.shape != other.data.shape or self.data.tobytes() != other.data.tobytes():
            return False
        if (self.label_map is None) != (other.label_map is None):
            return False
        return self.label_map is None or np.array_equal(self.label_map, other.label_map)


def default_bands(n_ms: int = 10, n_sar: int = 2) -> list[BandMeta]:
    if n_ms == len(S2_RESOLUTIONS):
        res = list(S2_RESOLUTIONS)
    else:
        res = [10] * n_ms
    bands = [BandMeta(i, Modality.MS, res[i]) for i in range(n_ms)]
    bands += [BandMeta(n_ms + j, Modality.SAR, 10) for j in range(n_sar)]
    return bands


def band_names(bands: Sequence[BandMeta]) -> list[str]:
    """Human-readable names: Sentinel-2 names for the 10-band schema, MS<i> otherwise."""
    n_ms = sum(b.modality == Modality.MS for b in bands)
    names, sar_seen = [], 0
    for b in bands:
        if b.modality == Modality.MS:
            names.append(S2_BAND_NAMES[b.band_id] if n_ms == 10 else f"MS{b.band_id}")
        else:
            names.append(SAR_NAMES[sar_seen])
            sar_seen += 1
    return names


# ---------------------------------------------------------------------------
# Patch files
# ---------------------------------------------------------------------------


def encode_patch(patch: RasterPatch) -> bytes:
    flags = 0
    if patch.label_map is not None:
        flags |= FLAG_LABEL_MAP
    if patch.class_label is not None:
        flags |= FLAG_CLASS_LABEL
    parts = [_HEADER.pack(MAGIC, VERSION, len(patch.bands), patch.height, patch.width, flags)]
    for b in patch.bands:
        parts.append(_BAND.pack(b.band_id, int(b.modality), b.nominal_resolution_m))
    if patch.class_label is not None:
        parts.append(_U16.pack(patch.class_label))
    parts.append(patch.data.astype("<f4", copy=False).tobytes())
    if patch.label_map is not None:
        parts.append(patch.label_map.astype("<u2", copy=False).tobytes())
    return b"".join(parts)


def decode_patch(buf: bytes) -> RasterPatch:
    if len(buf) < _HEADER.size:
        raise PatchFormatError("truncated header", len(buf))
    magic, version, n_bands, h, w, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise PatchFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise PatchFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    bands = []
    for _ in range(n_bands):
        if off + _BAND.size > len(buf):
            raise PatchFormatError("truncated band record", off)
        band_id, modality, res = _BAND.unpack_from(buf, off)
        try:
            bands.append(BandMeta(band_id, Modality(modality), res))
        except ValueError:
            raise PatchFormatError(f"unknown modality {modality}", off + 2) from None
        off += _BAND.size
    class_label = None
    if flags & FLAG_CLASS_LABEL:
        if off + 2 > len(buf):
            raise PatchFormatError("truncated class label", off)
        (class_label,) = _U16.unpack_from(buf, off)
        off += 2
    n_px = n_bands * h * w
    if off + 4 * n_px > len(buf):
        raise PatchFormatError("truncated pixel payload", off)
    data = np.frombuffer(buf, dtype="<f4", count=n_px, offset=off).reshape(n_bands, h, w)
    off += 4 * n_px
    label_map = None
    if flags & FLAG_LABEL_MAP:
        if off + 2 * h * w > len(buf):
            raise PatchFormatError("truncated label map", off)
        label_map = np.frombuffer(buf, dtype="<u2", count=h * w, offset=off).reshape(h, w)
        off += 2 * h * w
    if off != len(buf):
        raise PatchFormatError(f"{len(buf) - off} trailing bytes", off)
    return RasterPatch(bands, data.astype(np.float32), label_map, class_label)


def write_patch(patch: RasterPatch, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_patch(patch))
    os.replace(tmp, path)


def read_patch(path) -> RasterPatch:
    return decode_patch(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    """Dataset index. Patch paths are relative to ``root``."""

    root: Path
    patches: list[str]
    n_classes: int
    band_stats: list[tuple[float, float]]
    splits: dict[str, list[str]]
    generator: dict = field(default_factory=dict)

    def paths(self, split: str) -> list[Path]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return [self.root / p for p in self.splits[split]]

    def to_json(self) -> str:
        doc = {
            "patches": self.patches,
            "n_classes": self.n_classes,
            "band_stats": [{"mean": m, "std": s} for m, s in self.band_stats],
            "splits": self.splits,
            "generator": self.generator,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(self.to_json())
        return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    stats = [(float(d["mean"]), float(d["std"])) for d in doc["band_stats"]]
    for i, (_, s) in enumerate(stats):
        if not s > 0:
            raise ConfigError(f"band {i} has non-positive std {s}")
    seen: set[str] = set()
    for name, members in doc["splits"].items():
        overlap = seen.intersection(members)
        if overlap:
            raise ConfigError(f"split {name!r} overlaps another split: {sorted(overlap)[:3]}")
        seen.update(members)
    return Manifest(
        root=path.parent,
        patches=list(doc["patches"]),
        n_classes=int(doc["n_classes"]),
        band_stats=stats,
        splits={k: list(v) for k, v in doc["splits"].items()},
        generator=doc.get("generator", {}),
    )


# ---------------------------------------------------------------------------
# Band statistics and normalization
# ---------------------------------------------------------------------------


def band_stats_from_patches(patches: Iterable[RasterPatch], floor: float = 1e-6):
    """Streaming per-band (mean, population std), merging patch moments pairwise."""
    count = 0
    mean = m2 = None
    for p in patches:
        x = p.data.reshape(p.data.shape[0], -1).astype(np.float64)
        n_b = x.shape[1]
        mean_b = x.mean(axis=1)
        m2_b = ((x - mean_b[:, None]) ** 2).sum(axis=1)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        if mean_b.shape != mean.shape:
            raise ValueError("patches disagree on band count")
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    if mean is None:
        raise ValueError("cannot compute band statistics of an empty split")
    std = np.maximum(np.sqrt(m2 / count), floor)
    return [(float(m), float(s)) for m, s in zip(mean, std)]


def compute_band_stats(manifest: Manifest, split: str = "pretrain"):
    paths = manifest.paths(split)
    if not paths:
        raise ValueError(f"split {split!r} is empty")
    return band_stats_from_patches(read_patch(p) for p in paths)


def normalize(patch: RasterPatch, band_stats) -> RasterPatch:
    """Per-band z-score. Returns a new patch; the input is untouched."""
    stats = np.asarray(band_stats, dtype=np.float64)
    if stats.shape != (len(patch.bands), 2):
        raise ValueError(
            f"band_stats has {stats.shape[0]} entries, patch has {len(patch.bands)} bands"
        )
    mean, std = stats[:, 0, None, None], stats[:, 1, None, None]
    z = ((patch.data.astype(np.float64) - mean) / std).astype(np.float32)
    return RasterPatch(list(patch.bands), z, patch.label_map, patch.class_label)


@dataclass
class SplitData:
    """A whole split held in memory, stacked along the first axis."""

    paths: list[str]
    bands: list[BandMeta]
    data: np.ndarray  # (N, B, H, W) float32
    class_labels: np.ndarray  # (N,) int64, -1 where absent
    label_maps: np.ndarray | None  # (N, H, W) int64

    def __len__(self):
        return len(self.paths)


def load_split(manifest: Manifest, split: str, normalized: bool = True) -> SplitData:
    rel = manifest.splits[split]
    if not rel:
        raise ValueError(f"split {split!r} is empty")
    patches = [read_patch(manifest.root / p) for p in rel]
    if normalized:
        patches = [normalize(p, manifest.band_stats) for p in patches]
    data = np.stack([p.data for p in patches])
    labels = np.array(
        [-1 if p.class_label is None else p.class_label for p in patches], dtype=np.int64
    )
    maps = None
    if all(p.label_map is not None for p in patches):
        maps = np.stack([p.label_map for p in patches]).astype(np.int64)
    return SplitData(list(rel), list(patches[0].bands), data, labels, maps)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

SIGNATURE_MIN_DIST = 0.5
MS_NOISE_SIGMA = 0.1
SPECKLE_SHAPE = 4.0
MS_TEXTURE_AMPLITUDE = 0.2
SAR_TEXTURE_DEPTH = 0.6
_MAX_SIGNATURE_ATTEMPTS = 1000


def sample_signatures(rng: np.random.Generator, n_classes: int, n_ms: int) -> np.ndarray:
    """Per-class MS signatures in [0, 1]^n_ms, pairwise L2 distance >= 0.5."""
    for _ in range(_MAX_SIGNATURE_ATTEMPTS):
        mu = rng.uniform(0.0, 1.0, size=(n_classes, n_ms))
        d = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
        d[np.diag_indices(n_classes)] = np.inf
        if d.min() >= SIGNATURE_MIN_DIST:
            return mu
    raise ConfigError(
        f"could not separate {n_classes} signatures in {n_ms} bands by "
        f"{SIGNATURE_MIN_DIST} after {_MAX_SIGNATURE_ATTEMPTS} attempts"
    )


def _region_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    kind = rng.integers(3)
    if kind == 0:  # ellipse
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 8, size / 2, 2)
        a = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
        v = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == 1:  # axis-aligned rectangle
        h, w = rng.integers(size // 4, size // 2 + 1, 2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        m = np.zeros((size, size), dtype=bool)
        m[top : top + h, left : left + w] = True
        return m
    # half-plane through a point in the central half of the patch
    py, px = rng.uniform(size / 4, 3 * size / 4, 2)
    a = rng.uniform(0, 2 * np.pi)
    return (xx - px) * np.cos(a) + (yy - py) * np.sin(a) > 0


def class_texture(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Spatial pattern in [-1, 1] characteristic of class ``label``.

    The kind cycles smooth / stripes / checkerboard / fine grain, and the period
    grows by 1.5x for every further block of four classes. Orientation and phase
    are random per region, so the kind survives flips and quarter turns.
    """
    kind, period = label % 4, 4.0 * 1.5 ** (label // 4)
    if kind == 0:
        return np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 1:
        a = rng.integers(4) * np.pi / 4
        phase = rng.uniform(0, 2 * np.pi)
        return np.sign(np.sin(2 * np.pi * (xx * np.cos(a) + yy * np.sin(a)) / period + phase))
    if kind == 2:
        py, px = rng.uniform(0, 2 * np.pi, 2)
        return np.sign(np.sin(2 * np.pi * xx / period + px) * np.sin(2 * np.pi * yy / period + py))
    cell = max(1, int(period // 4))
    grain = rng.choice([-1.0, 1.0], size=(-(-size // cell),) * 2)
    return np.kron(grain, np.ones((cell, cell)))[:size, :size]


def _block_average(img: np.ndarray, k: int = 2) -> np.ndarray:
    h, w = img.shape
    if h % k or w % k:
        return img
    small = img.reshape(h // k, k, w // k, k).mean(axis=(1, 3))
    return np.repeat(np.repeat(small, k, axis=0), k, axis=1)


def synthesize_patch(
    rng: np.random.Generator,
    bands: list[BandMeta],
    signatures: np.ndarray,
    sar_levels: np.ndarray,
    size: int,
    texture: bool = True,
) -> RasterPatch:
    """Draw one patch: background class plus 0-3 painted regions of random classes.

    With ``texture`` each region carries its class texture in every band, so the
    two modalities share both the region layout and the class-specific spatial
    pattern. Without it regions are flat apart from noise.
    """
    n_classes = signatures.shape[0]
    c0 = int(rng.integers(n_classes))
    label_map = np.full((size, size), c0, dtype=np.int64)
    pattern = class_texture(c0, rng, size)
    for _ in range(rng.integers(0, 4)):
        mask = _region_mask(rng, size)
        c = int(rng.integers(n_classes))
        label_map[mask] = c
        pattern[mask] = class_texture(c, rng, size)[mask]
    counts = np.bincount(label_map.ravel(), minlength=n_classes)
    class_label = int(np.argmax(counts))

    data = np.empty((len(bands), size, size), dtype=np.float64)
    ms = [i for i, b in enumerate(bands) if b.modality == Modality.MS]
    sar = [i for i, b in enumerate(bands) if b.modality == Modality.SAR]
    if not texture:
        pattern = np.zeros((size, size))
    for k, i in enumerate(ms):
        clean = signatures[label_map, k] + MS_TEXTURE_AMPLITUDE * pattern
        if bands[i].nominal_resolution_m == 20:
            clean = _block_average(clean)
        data[i] = clean + rng.normal(0.0, MS_NOISE_SIGMA, size=(size, size))
    for k, i in enumerate(sar):
        backscatter = sar_levels[k][label_map] * (1 + SAR_TEXTURE_DEPTH * pattern)
        level = np.log1p(backscatter)
        speckle = rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, size=(size, size))
        data[i] = level * speckle
    return RasterPatch(bands, data.astype(np.float32), label_map.astype(np.uint16), class_label)


def split_sizes(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_pre = max(1, int(round(fractions[0] * n)))
    n_tr = min(n - n_pre, int(round(fractions[1] * n)))
    return n_pre, n_tr, n - n_pre - n_tr


def generate_synthetic_dataset(
    out_dir,
    n_patches: int,
    n_classes: int = 4,
    size: int = 32,
    n_ms: int = 10,
    n_sar: int = 2,
    seed: int = 0,
    split_fractions=(0.6, 0.2, 0.2),
    texture: bool = True,
) -> Manifest:
    """Write ``n_patches`` synthetic patches plus ``manifest.json`` under ``out_dir``.

    MS bands carry a per-class spectral signature plus Gaussian noise; SAR bands
    carry ``log1p`` of a per-class backscatter level under mean-1 Gamma speckle.
    With ``texture`` (default) every class also gets a spatial pattern shared by
    both modalities, see :func:`class_texture`.
    Both modalities share the region geometry of each patch. Output is
    byte-identical for identical arguments.
    """
    if n_patches < 1:
        raise ConfigError("n_patches must be >= 1")
    if not 2 <= n_classes <= 16:
        raise ConfigError("n_classes must be in [2, 16]")
    if size not in (16, 32, 64):
        raise ConfigError("size must be one of 16, 32, 64")
    if n_ms < 3:
        raise ConfigError("need at least 3 MS bands")
    if n_sar not in (1, 2):
        raise ConfigError("n_sar must be 1 or 2")

    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    signatures = sample_signatures(rng, n_classes, n_ms)
    sar_levels = rng.uniform(0.5, 8.0, size=(n_sar, n_classes))
    bands = default_bands(n_ms, n_sar)

    rel_paths = []
    for idx in range(n_patches):
        patch = synthesize_patch(
            np.random.default_rng([seed, idx]), bands, signatures, sar_levels, size, texture
        )
        rel = f"patches/patch_{idx:05d}.rsp"
        write_patch(patch, out_dir / rel)
        rel_paths.append(rel)

    n_pre, n_tr, _ = split_sizes(n_patches, split_fractions)
    splits = {
        "pretrain": rel_paths[:n_pre],
        "probe_train": rel_paths[n_pre : n_pre + n_tr],
        "probe_test": rel_paths[n_pre + n_tr :],
    }
    manifest = Manifest(
        root=out_dir,
        patches=rel_paths,
        n_classes=n_classes,
        band_stats=[],
        splits=splits,
        generator={
            "n_patches": n_patches,
            "n_classes": n_classes,
            "size": size,
            "n_ms": n_ms,
            "n_sar": n_sar,
            "seed": seed,
            "split_fractions": list(split_fractions),
            "texture": texture,
            "signatures": signatures.tolist(),
            "sar_levels": sar_levels.tolist(),
        },
    )
    manifest.band_stats = compute_band_stats(manifest, "pretrain")
    manifest.save()
    return manifest
