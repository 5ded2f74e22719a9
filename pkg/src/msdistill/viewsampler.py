"""Turn one patch into the two raw views fed to the student and teacher branches."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rasterstore import BandMeta, Modality, RasterPatch, band_names


class PolicyKind(str, enum.Enum):
    SINGLE = "single"  # one MS band vs one SAR polarization
    THREE = "three"  # three distinct MS bands vs (VV, VH, duplicate) in random order
    RGB_S1S2 = "rgb-s1s2"  # fixed RGB vs one SAR + two distinct non-RGB MS bands
    MS_ONLY = "ms-only"  # one MS band vs another independently drawn MS band


@dataclass(frozen=True)
class SamplingPolicy:
    kind: PolicyKind = PolicyKind.SINGLE
    rgb_band_ids: tuple[int, int, int] = (2, 1, 0)  # B4, B3, B2 in the 10-band schema

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        rgb = tuple(int(i) for i in self.rgb_band_ids)
        if len(rgb) != 3 or len(set(rgb)) != 3:
            raise ValueError(f"rgb_band_ids must be three distinct indices, got {rgb}")
        object.__setattr__(self, "rgb_band_ids", rgb)

    @property
    def channels(self) -> int:
        return 1 if self.kind in (PolicyKind.SINGLE, PolicyKind.MS_ONLY) else 3

    @property
    def uses_sar(self) -> bool:
        return self.kind != PolicyKind.MS_ONLY


@dataclass(frozen=True)
class ViewSelection:
    """Which bands went into each view. Indices address ``patch.bands``."""

    v1_band_ids: tuple[int, ...]
    v2_band_ids: tuple[int, ...]
    v1_modalities: tuple[Modality, ...]
    v2_modalities: tuple[Modality, ...]
    rng_seed: int


def keyed_rng(*keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


def derive_seed(*keys: int) -> int:
    """Collapse a key tuple such as (root_seed, patch_index, epoch, stream) into one seed."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1, np.uint64)[0])


def _select(patch: RasterPatch, policy: SamplingPolicy, rng: np.random.Generator):
    ms, sar = patch.ms_indices, patch.sar_indices
    if len(ms) < 3:
        raise ValueError("patch needs at least 3 MS bands")
    if policy.uses_sar and not sar:
        raise ValueError(f"policy {policy.kind.value!r} needs SAR bands but the patch has none")

    kind = policy.kind
    if kind == PolicyKind.SINGLE:
        return (ms[rng.integers(len(ms))],), (sar[rng.integers(len(sar))],)
    if kind == PolicyKind.MS_ONLY:
        return (ms[rng.integers(len(ms))],), (ms[rng.integers(len(ms))],)
    if kind == PolicyKind.THREE:
        v1 = tuple(ms[i] for i in rng.choice(len(ms), size=3, replace=False))
        order = [sar[i] for i in rng.permutation(len(sar))]
        dup = order[rng.integers(len(order))]
        v2 = (order + [dup] * (3 - len(order)))[:3]
        return v1, tuple(v2)
    # RGB_S1S2
    for i in policy.rgb_band_ids:
        if i not in ms:
            raise ValueError(f"rgb band id {i} is not an MS band of this patch")
    others = [i for i in ms if i not in policy.rgb_band_ids]
    if len(others) < 2:
        raise ValueError("rgb-s1s2 needs at least two non-RGB MS bands")
    s = sar[rng.integers(len(sar))]
    pick = rng.choice(len(others), size=2, replace=False)
    return policy.rgb_band_ids, (s, others[pick[0]], others[pick[1]])


def sample_views(patch: RasterPatch, policy: SamplingPolicy, seed: int):
    """Draw the raw view pair for ``patch``.

    Returns ``(view1, view2, selection)``; views are independent ``(C, H, W)``
    float32 copies, with ``C = policy.channels``.
    """
    v1, v2 = _select(patch, policy, keyed_rng(seed))
    sel = ViewSelection(
        tuple(int(i) for i in v1),
        tuple(int(i) for i in v2),
        tuple(patch.bands[i].modality for i in v1),
        tuple(patch.bands[i].modality for i in v2),
        int(seed),
    )
    view1, view2 = views_from_selection(patch, sel)
    return view1, view2, sel


def views_from_selection(patch: RasterPatch, selection: ViewSelection):
    # fancy indexing always copies, so the two views never share storage
    return (
        patch.data[list(selection.v1_band_ids)],
        patch.data[list(selection.v2_band_ids)],
    )


def enumerate_eval_bandsets(policy: SamplingPolicy, schema: Sequence[BandMeta] | RasterPatch):
    """Fixed band sets for band-wise probing.

    Single-channel policies probe every band on its own. Three-channel policies
    probe RGB, the red-edge triple (B5, B6, B7) and the SAR stack (VV, VH, VV).
    """
    bands = schema.bands if isinstance(schema, RasterPatch) else list(schema)
    ms = [i for i, b in enumerate(bands) if b.modality == Modality.MS]
    sar = [i for i, b in enumerate(bands) if b.modality == Modality.SAR]
    if policy.channels == 1:
        return [(i,) for i in ms + sar]
    sets = [tuple(policy.rgb_band_ids)]
    if len(ms) >= 6:
        sets.append((ms[3], ms[4], ms[5]))
    if sar:
        first, second = sar[0], sar[1] if len(sar) > 1 else sar[0]
        sets.append((first, second, first))
    return sets


def bandset_name(band_set: Sequence[int], bands: Sequence[BandMeta]) -> str:
    names = band_names(bands)
    return "/".join(names[i] for i in band_set)
