import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sammix import dataio
from sammix.dataio import (
    DataIntegrityError,
    Dataset,
    DatasetFormatError,
    DatasetVersionError,
    PhantomConfig,
    RawVolume,
    Sample,
    derive_class_label,
    extract_middle_slices,
    load_dataset,
    load_raw_volume,
    resize_grid,
    save_dataset,
    save_raw_volume,
    split_supervision,
    window_level,
)

from conftest import load_golden


# ---------------------------------------------------------------------------
# window_level
# ---------------------------------------------------------------------------


def test_window_level_pinned_values():
    vol = RawVolume(np.array([[[-160.0, 240.0, 40.0]]]))
    out = window_level(vol, width=400.0, center=40.0).voxels[0, 0]
    assert out[0] == 0.0
    assert out[1] == 1.0
    assert out[2] == 0.5


def test_window_level_clamps_both_sides():
    vol = RawVolume(np.array([[[-1000.0, -161.0, 241.0, 3000.0]]]))
    out = window_level(vol).voxels[0, 0]
    assert out[0] == 0.0 and out[1] == 0.0
    assert out[2] == 1.0 and out[3] == 1.0


def test_window_level_is_linear_inside_window():
    vol = RawVolume(np.array([[[-60.0, 140.0]]]))
    out = window_level(vol).voxels[0, 0]
    assert out[0] == pytest.approx(0.25)
    assert out[1] == pytest.approx(0.75)


def test_window_level_rejects_non_finite():
    vol = RawVolume(np.array([[[0.0, np.nan]]]))
    with pytest.raises(DataIntegrityError):
        window_level(vol)
    with pytest.raises(ValueError):
        window_level(RawVolume(np.zeros((1, 1, 1))), width=0.0)


@given(st.floats(min_value=-2000, max_value=2000), st.floats(min_value=-2000, max_value=2000))
def test_window_level_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    out = window_level(RawVolume(np.array([[[lo, hi]]]))).voxels[0, 0]
    assert 0.0 <= out[0] <= out[1] <= 1.0


# ---------------------------------------------------------------------------
# extract_middle_slices
# ---------------------------------------------------------------------------


def _vol(s):
    return RawVolume(np.zeros((s, 2, 2)))


def test_middle_slices_pinned_examples():
    assert extract_middle_slices(_vol(100), 0.3) == list(range(35, 65))
    assert extract_middle_slices(_vol(10), 1.0) == list(range(10))
    assert extract_middle_slices(_vol(3), 0.3) == [1]


def test_middle_slices_rejects_bad_fraction_and_empty_band():
    with pytest.raises(ValueError):
        extract_middle_slices(_vol(10), 0.0)
    with pytest.raises(ValueError):
        extract_middle_slices(_vol(10), 1.5)
    with pytest.raises(DataIntegrityError):
        extract_middle_slices(_vol(1), 0.3)


@given(st.integers(min_value=1, max_value=500), st.floats(min_value=0.01, max_value=1.0))
def test_middle_slices_centered_window(s, fraction):
    count = round(s * fraction)
    if count < 1:
        return
    idx = extract_middle_slices(_vol(s), fraction)
    assert len(idx) == count
    assert idx == list(range(idx[0], idx[0] + count))  # contiguous
    below = idx[0]
    above = s - 1 - idx[-1]
    assert below - above in (0, 1)


# ---------------------------------------------------------------------------
# resize_grid
# ---------------------------------------------------------------------------


def test_resize_constant_grid_stays_constant():
    g = np.full((5, 7), 0.37, dtype=np.float32)
    out = resize_grid(g, (11, 13), mode="bilinear")
    assert np.allclose(out, 0.37, atol=1e-6)


def test_resize_bilinear_preserves_corners():
    ramp = np.arange(16, dtype=np.float32).reshape(4, 4)
    up = resize_grid(ramp, (8, 8), mode="bilinear")
    assert up[0, 0] == ramp[0, 0]
    assert up[0, -1] == ramp[0, -1]
    assert up[-1, 0] == ramp[-1, 0]
    assert up[-1, -1] == ramp[-1, -1]


def test_resize_nearest_checkerboard_subsample():
    cb = ((np.indices((8, 8)).sum(axis=0)) % 2).astype(np.float32)
    out = resize_grid(cb, (4, 4), mode="nearest")
    assert (out == cb[::2, ::2]).all()
    assert set(np.unique(out)) <= {0.0, 1.0}


@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_resize_nearest_never_invents_values(h, w, th, tw, seed):
    rng = np.random.default_rng(seed)
    g = rng.choice([0.0, 1.0, 2.0], size=(h, w)).astype(np.float32)
    out = resize_grid(g, (th, tw), mode="nearest")
    assert set(np.unique(out)) <= set(np.unique(g))


def test_resize_rejects_bad_args():
    g = np.zeros((4, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        resize_grid(g, (0, 4))
    with pytest.raises(ValueError):
        resize_grid(np.zeros(4), (2, 2))
    with pytest.raises(ValueError):
        resize_grid(g, (2, 2), mode="bicubic")


# ---------------------------------------------------------------------------
# labels and supervision split
# ---------------------------------------------------------------------------


def test_derive_class_label():
    assert derive_class_label(np.zeros((4, 4), dtype=np.uint8)) == 0
    m = np.zeros((4, 4), dtype=np.uint8)
    m[2, 1] = 1
    assert derive_class_label(m) == 1
    with pytest.raises(DataIntegrityError):
        derive_class_label(np.full((2, 2), 3, dtype=np.uint8))


def _toy_dataset(n_pos=6, n_neg=4) -> Dataset:
    samples = []
    for i in range(n_pos + n_neg):
        seg = np.zeros((8, 8), dtype=np.uint8)
        if i < n_pos:
            seg[2 : 4 + i % 3, 3:6] = 1
        samples.append(
            Sample(
                image=np.full((8, 8), 0.5, dtype=np.float32),
                seg_label=seg,
                cls_label=int(seg.max()),
                sample_id=f"s{i:02d}",
            )
        )
    return Dataset(samples=samples, split="train", labeled_ids={s.sample_id for s in samples if s.seg_label is not None})


def test_split_supervision_deterministic_and_correct():
    ds = _toy_dataset()
    a = split_supervision(ds, 3, seed=7)
    b = split_supervision(ds, 3, seed=7)
    assert a.labeled_ids == b.labeled_ids
    assert len(a.labeled_ids) == 3
    for s in a.samples:
        if s.sample_id in a.labeled_ids:
            assert s.seg_label is not None and s.cls_label == 1
        else:
            assert s.seg_label is None
            # class labels survive on every sample
            assert s.cls_label in (0, 1)


def test_split_supervision_seed_changes_draw():
    ds = _toy_dataset(n_pos=12)
    draws = {frozenset(split_supervision(ds, 4, seed=k).labeled_ids) for k in range(6)}
    assert len(draws) > 1


def test_split_supervision_error_names_both_numbers():
    ds = _toy_dataset(n_pos=6)
    with pytest.raises(ValueError, match=r"(?s)7.*6"):
        split_supervision(ds, 7, seed=0)


def test_split_supervision_zero_budget():
    ds = _toy_dataset()
    out = split_supervision(ds, 0, seed=0)
    assert out.labeled_ids == set()
    assert all(s.seg_label is None for s in out.samples)


def test_split_supervision_does_not_mutate_input():
    ds = _toy_dataset()
    before = [s.seg_label is not None for s in ds.samples]
    split_supervision(ds, 2, seed=1)
    after = [s.seg_label is not None for s in ds.samples]
    assert before == after


def test_split_supervision_golden_ids(phantom_splits):
    train = phantom_splits["train"]
    out = split_supervision(train, 5, seed=17)
    assert sorted(out.labeled_ids) == load_golden("split_ids_n5_seed17.json")


# ---------------------------------------------------------------------------
# phantom generator
# ---------------------------------------------------------------------------


def test_phantom_corpus_invariants(phantom_splits):
    for name, ds in phantom_splits.items():
        assert len(ds) > 0
        ds.validate()
        for s in ds.samples:
            assert s.image.shape == (64, 64)
            assert s.seg_label is not None
            assert s.cls_label == int(s.seg_label.max())
    # both clamp ends of the intensity window are exercised somewhere
    imgs = np.stack([s.image for s in phantom_splits["train"].samples])
    assert (imgs == 0.0).any() and (imgs == 1.0).any()


def test_phantom_organ_band_fraction_over_seeds():
    # organ occupies a contiguous minority band of slices
    cfg = PhantomConfig()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        _, organ = dataio._phantom_volume(rng, cfg)
        per_slice = organ.reshape(organ.shape[0], -1).any(axis=1)
        frac = per_slice.sum() / organ.shape[0]
        assert 0.2 <= frac <= 0.6, f"seed {seed}: band fraction {frac}"
        on = np.nonzero(per_slice)[0]
        assert (np.diff(on) == 1).all(), f"seed {seed}: band not contiguous"


def test_phantom_generation_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    dataio.generate_phantoms(3, seed=9, out_dir=a, keep_raw=True)
    dataio.generate_phantoms(3, seed=9, out_dir=b, keep_raw=True)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_phantom_different_seed_differs(tmp_path):
    a = dataio.generate_phantoms(2, seed=1, out_dir=tmp_path / "a", keep_raw=False)
    b = dataio.generate_phantoms(2, seed=2, out_dir=tmp_path / "b", keep_raw=False)
    im_a = a["train"].samples[0].image
    im_b = b["train"].samples[0].image
    assert not np.array_equal(im_a, im_b)


# ---------------------------------------------------------------------------
# on-disk round trips and error taxonomy
# ---------------------------------------------------------------------------


def test_dataset_round_trip_bit_exact(tmp_path, phantom_splits):
    ds = phantom_splits["val"]
    save_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path, "val")
    assert loaded.labeled_ids == ds.labeled_ids
    assert [s.sample_id for s in loaded.samples] == [s.sample_id for s in ds.samples]
    for s0, s1 in zip(ds.samples, loaded.samples):
        assert s0.image.tobytes() == s1.image.tobytes()
        assert s0.seg_label.tobytes() == s1.seg_label.tobytes()
        assert s0.cls_label == s1.cls_label
    # save -> load -> save writes identical bytes
    save_dataset(loaded, tmp_path / "again")
    for rel in sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file()):
        assert (tmp_path / "again" / rel).read_bytes() == (tmp_path / rel).read_bytes()


def test_load_rejects_malformed_header(tmp_path, phantom_splits):
    save_dataset(phantom_splits["val"], tmp_path)
    (tmp_path / "val" / "index.json").write_text("{not json")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path, "val")


def test_load_rejects_missing_fields(tmp_path, phantom_splits):
    save_dataset(phantom_splits["val"], tmp_path)
    (tmp_path / "val" / "index.json").write_text(json.dumps({"format_version": 1}))
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path, "val")


def test_load_rejects_unknown_version(tmp_path, phantom_splits):
    save_dataset(phantom_splits["val"], tmp_path)
    idx = json.loads((tmp_path / "val" / "index.json").read_text())
    idx["format_version"] = 99
    (tmp_path / "val" / "index.json").write_text(json.dumps(idx))
    with pytest.raises(DatasetVersionError):
        load_dataset(tmp_path, "val")


def test_load_rejects_truncated_payload(tmp_path, phantom_splits):
    save_dataset(phantom_splits["val"], tmp_path)
    sid = phantom_splits["val"].samples[0].sample_id
    img = tmp_path / "val" / f"{sid}.img.f32"
    img.write_bytes(img.read_bytes()[:-8])
    with pytest.raises(DataIntegrityError):
        load_dataset(tmp_path, "val")


def test_load_rejects_missing_mask_for_labeled_id(tmp_path, phantom_splits):
    save_dataset(phantom_splits["val"], tmp_path)
    labeled = sorted(phantom_splits["val"].labeled_ids)[0]
    (tmp_path / "val" / f"{labeled}.msk.u8").unlink()
    with pytest.raises(DataIntegrityError):
        load_dataset(tmp_path, "val")


def test_load_missing_split_is_format_error(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path, "train")


def test_raw_volume_round_trip(tmp_path):
    vol = RawVolume(np.random.default_rng(0).normal(size=(4, 6, 5)).astype(np.float32).astype(np.float64), spacing=(2.5, 0.8, 0.8))
    save_raw_volume(vol, tmp_path / "v")
    loaded = load_raw_volume(tmp_path / "v")
    assert loaded.spacing == (2.5, 0.8, 0.8)
    assert np.array_equal(loaded.voxels, vol.voxels)
    bad = tmp_path / "v.vol.f32"
    bad.write_bytes(bad.read_bytes()[:-4])
    with pytest.raises(DataIntegrityError):
        load_raw_volume(tmp_path / "v")


def test_sample_invariant_enforced():
    img = np.full((4, 4), 0.5, dtype=np.float32)
    seg = np.zeros((4, 4), dtype=np.uint8)
    seg[1, 1] = 1
    with pytest.raises(DataIntegrityError):
        Sample(image=img, seg_label=seg, cls_label=0, sample_id="x").validate()
    Sample(image=img, seg_label=seg, cls_label=1, sample_id="x").validate()
