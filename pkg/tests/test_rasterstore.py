import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_patch
from msdistill.rasterstore import (
    BandMeta,
    ConfigError,
    Manifest,
    Modality,
    PatchFormatError,
    RasterPatch,
    band_names,
    band_stats_from_patches,
    compute_band_stats,
    decode_patch,
    default_bands,
    encode_patch,
    generate_synthetic_dataset,
    load_manifest,
    load_split,
    normalize,
    read_patch,
    sample_signatures,
    write_patch,
)


# -- data model ---------------------------------------------------------------


def test_default_schema_is_ten_ms_then_two_sar():
    bands = default_bands()
    assert [b.modality for b in bands] == [Modality.MS] * 10 + [Modality.SAR] * 2
    assert band_names(bands) == ["B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12", "VV", "VH"]
    assert {b.nominal_resolution_m for b in bands[:10]} == {10, 20}


def test_patch_rejects_non_finite_and_duplicate_ids():
    bands = default_bands(3, 0)
    bad = np.zeros((3, 4, 4), np.float32)
    bad[1, 2, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        RasterPatch(bands, bad)
    with pytest.raises(ValueError, match="duplicate"):
        RasterPatch([bands[0], bands[0], bands[1]], np.zeros((3, 4, 4)))


def test_patch_rejects_more_than_two_polarizations():
    bands = [BandMeta(i, Modality.SAR) for i in range(3)]
    with pytest.raises(ValueError, match="two SAR"):
        RasterPatch(bands, np.zeros((3, 2, 2)))


# -- patch files --------------------------------------------------------------


def test_one_pixel_file_size_matches_layout():
    # header: 4s magic + 4 x u16 + u8 flags = 13; band record u16 + u8 + u16 = 5; one f32 = 4
    p = RasterPatch([BandMeta(0, Modality.MS, 10)], np.full((1, 1, 1), 0.5, np.float32))
    buf = encode_patch(p)
    assert len(buf) == 13 + 5 + 4
    assert buf[:4] == b"RSP1"
    assert struct.unpack_from("<f", buf, 18)[0] == 0.5


def test_layout_field_by_field():
    p = RasterPatch(default_bands(3, 1), np.arange(4 * 2 * 3, dtype=np.float32).reshape(4, 2, 3),
                    np.array([[0, 1, 2], [3, 0, 1]]), 2)
    buf = encode_patch(p)
    magic, version, nb, h, w, flags = struct.unpack_from("<4sHHHHB", buf, 0)
    assert (magic, version, nb, h, w, flags) == (b"RSP1", 1, 4, 2, 3, 0b11)
    assert struct.unpack_from("<HBH", buf, 13 + 3 * 5) == (3, 1, 10)
    off = 13 + 4 * 5
    assert struct.unpack_from("<H", buf, off)[0] == 2
    payload = np.frombuffer(buf, "<f4", 24, off + 2)
    assert payload.tolist() == list(range(24))
    assert np.frombuffer(buf, "<u2", 6, off + 2 + 96).tolist() == [0, 1, 2, 3, 0, 1]
    assert len(buf) == off + 2 + 96 + 12


def test_round_trip_on_disk(tmp_path, rng):
    p = random_patch(rng)
    write_patch(p, tmp_path / "a.rsp")
    assert read_patch(tmp_path / "a.rsp") == p
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=60, deadline=None)
@given(
    n_ms=st.integers(1, 10), n_sar=st.integers(0, 2), h=st.integers(1, 9), w=st.integers(1, 9),
    has_map=st.booleans(), label=st.one_of(st.none(), st.integers(0, 65535)), seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(n_ms, n_sar, h, w, has_map, label, seed):
    r = np.random.default_rng(seed)
    data = r.standard_normal((n_ms + n_sar, h, w)).astype(np.float32) * 1e3
    lm = r.integers(0, 16, (h, w)) if has_map else None
    p = RasterPatch(default_bands(n_ms, n_sar), data, lm, label)
    q = decode_patch(encode_patch(p))
    assert q == p
    assert q.data.tobytes() == p.data.tobytes()


def test_bad_magic_names_offset_zero(rng):
    buf = bytearray(encode_patch(random_patch(rng)))
    buf[:4] = b"XXXX"
    with pytest.raises(PatchFormatError) as e:
        decode_patch(bytes(buf))
    assert e.value.offset == 0


def test_bad_version_and_truncation(rng):
    buf = encode_patch(random_patch(rng))
    with pytest.raises(PatchFormatError, match="version"):
        decode_patch(buf[:4] + struct.pack("<H", 9) + buf[6:])
    with pytest.raises(PatchFormatError, match="truncated") as e:
        decode_patch(buf[:-1])
    assert e.value.offset > 13
    with pytest.raises(PatchFormatError, match="trailing"):
        decode_patch(buf + b"\0")
    with pytest.raises(PatchFormatError, match="truncated header"):
        decode_patch(buf[:5])


# -- statistics ---------------------------------------------------------------


def test_constant_band_std_floor():
    p = RasterPatch(default_bands(1, 0), np.full((1, 4, 4), 3.0, np.float32))
    ((mean, std),) = band_stats_from_patches([p])
    assert mean == 3.0 and std == 1e-6


def test_two_level_band_mean_and_std():
    x = np.zeros((1, 2, 4), np.float32)
    x[0, 1] = 1.0
    ((mean, std),) = band_stats_from_patches([RasterPatch(default_bands(1, 0), x)])
    assert mean == 0.5 and std == 0.5


def test_streaming_matches_two_pass(rng):
    patches = [random_patch(rng, 3, 1, size=int(rng.integers(2, 9))) for _ in range(40)]
    for p in patches:
        p.data *= rng.uniform(0.1, 50)
        p.data += rng.uniform(-100, 100)
    got = np.array(band_stats_from_patches(patches))
    flat = [np.concatenate([p.data[b].ravel().astype(np.float64) for p in patches]) for b in range(4)]
    two_pass_mean = np.array([f.sum() / f.size for f in flat])
    two_pass_std = np.array([np.sqrt(((f - m) ** 2).sum() / f.size) for f, m in zip(flat, two_pass_mean)])
    np.testing.assert_allclose(got[:, 0], two_pass_mean, rtol=1e-10, atol=1e-9)
    np.testing.assert_allclose(got[:, 1], two_pass_std, rtol=1e-10)


def test_empty_split_is_an_error(tmp_path):
    m = Manifest(tmp_path, [], 2, [], {"pretrain": [], "probe_train": [], "probe_test": []})
    with pytest.raises(ValueError, match="empty"):
        compute_band_stats(m)


def test_normalize_identity_and_mean_band():
    data = np.stack([np.full((3, 3), 7.0), np.arange(9.0).reshape(3, 3)]).astype(np.float32)
    p = RasterPatch(default_bands(2, 0), data)
    z = normalize(p, [(7.0, 2.0), (0.0, 1.0)])
    assert np.all(z.data[0] == 0)
    assert z.data[1].tobytes() == data[1].tobytes()
    assert p.data[0, 0, 0] == 7.0  # input untouched
    with pytest.raises(ValueError, match="entries"):
        normalize(p, [(0.0, 1.0)])


# -- synthetic generator ------------------------------------------------------


def test_generator_refuses_bad_arguments(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(tmp_path, 0)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(tmp_path, 4, n_classes=17)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(tmp_path, 4, size=24)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(tmp_path, 4, n_sar=3)


def test_signature_rejection_sampling_gives_up():
    # 16 classes cannot sit 0.5 apart inside the unit cube of 3 bands often enough
    with pytest.raises(ConfigError, match="attempts"):
        sample_signatures(np.random.default_rng(0), 16, 3)


def test_generator_is_byte_deterministic(tmp_path):
    a = generate_synthetic_dataset(tmp_path / "a", 10, 4, 32, seed=7)
    b = generate_synthetic_dataset(tmp_path / "b", 10, 4, 32, seed=7)
    for pa, pb in zip(a.paths("pretrain") + a.paths("probe_test"), b.paths("pretrain") + b.paths("probe_test")):
        assert pa.read_bytes() == pb.read_bytes()
    assert (tmp_path / "a/manifest.json").read_text() == (tmp_path / "b/manifest.json").read_text()
    c = generate_synthetic_dataset(tmp_path / "c", 10, 4, 32, seed=8)
    assert c.generator["signatures"] != a.generator["signatures"]


def test_generated_patch_invariants(small_dataset):
    m = small_dataset
    assert len(m.patches) == 64
    assert sum(len(v) for v in m.splits.values()) == 64
    sigs = np.array(m.generator["signatures"])
    d = np.linalg.norm(sigs[:, None] - sigs[None], axis=-1)[~np.eye(4, dtype=bool)]
    assert d.min() >= 0.5
    for path in m.paths("pretrain") + m.paths("probe_test"):
        p = read_patch(path)
        counts = np.bincount(p.label_map.ravel(), minlength=m.n_classes)
        assert p.label_map.max() < m.n_classes
        assert p.class_label == int(np.argmax(counts))
        assert 1 <= len(np.unique(p.label_map)) <= 4
        sar = p.data[p.sar_indices]
        assert np.isfinite(sar).all() and (sar > 0).all()


def test_manifest_round_trip_and_validation(small_dataset, tmp_path):
    m = load_manifest(small_dataset.root)
    assert m.to_json() == small_dataset.to_json()
    assert len(m.band_stats) == 12 and all(s > 0 for _, s in m.band_stats)
    doc = json.loads(m.to_json())
    doc["splits"]["probe_test"].append(doc["splits"]["pretrain"][0])
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="disjoint|overlap"):
        load_manifest(tmp_path)
    doc = json.loads(m.to_json())
    doc["band_stats"][0]["std"] = 0.0
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="std"):
        load_manifest(tmp_path)


def test_normalized_pretrain_split_is_standardized(small_dataset):
    data = load_split(small_dataset, "pretrain").data
    flat = data.transpose(1, 0, 2, 3).reshape(12, -1).astype(np.float64)
    assert np.abs(flat.mean(axis=1)).max() < 1e-4
    assert np.all((flat.std(axis=1) > 0.99) & (flat.std(axis=1) < 1.01))


def test_class_balance_on_full_size_set(tmp_path):
    m = generate_synthetic_dataset(tmp_path, 2000, 4, 32, 10, 2, seed=1)
    labels = [read_patch(p).class_label for s in m.splits for p in m.paths(s)]
    counts = np.bincount(labels, minlength=4)
    assert np.all(np.abs(counts - 500) <= 50), counts


def test_texture_flag_only_changes_pixels(tmp_path):
    a = generate_synthetic_dataset(tmp_path / "t", 6, 4, 16, seed=2)
    b = generate_synthetic_dataset(tmp_path / "f", 6, 4, 16, seed=2, texture=False)
    pa, pb = read_patch(a.paths("pretrain")[0]), read_patch(b.paths("pretrain")[0])
    assert np.array_equal(pa.label_map, pb.label_map)
    assert not np.array_equal(pa.data, pb.data)
