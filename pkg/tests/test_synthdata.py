import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttaseg import synthdata
from ttaseg.synthdata import (PROFILES, BoxPrompt, ShiftProfile, boundary_gradient_stat,
                              degrade, gen_source, gen_target, generate, load_manifest,
                              load_sample, oracle_box, render_scene, sample_spec,
                              write_dataset)


def test_same_seed_is_bitwise_deterministic():
    a = gen_source(42, 3)
    b = gen_source(42, 3)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image)
        assert np.array_equal(s.gt_mask, t.gt_mask)
        assert s.box == t.box


def test_every_mask_meets_minimum_area():
    for s in gen_source(7, 20) + gen_target(7, 20, "mri-like"):
        assert s.gt_mask.sum() >= 16


def test_intensities_stay_in_unit_interval():
    for s in gen_target(3, 10, "mri-like") + gen_target(3, 10, "ct-like"):
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_source_boundaries_much_sharper_than_target():
    for seed in (0, 1, 2):
        ratios = []
        for src, tgt in zip(gen_source(seed, 12), gen_target(seed, 12, "mri-like")):
            ratios.append(boundary_gradient_stat(src.image, src.gt_mask)
                          / boundary_gradient_stat(tgt.image, tgt.gt_mask))
        assert np.mean(ratios) > 2.0, f"seed {seed}: contrast ratio {np.mean(ratios):.2f}"


def test_identity_shift_degenerates_to_grayscale_of_source_render():
    identity = ShiftProfile("identity", grayscale=True, gamma_range=(1.0, 1.0),
                            blur_range=(0.0, 0.0), noise_sigma=0.0)
    for idx in range(4):
        spec_t = sample_spec(5, idx, identity)
        spec_s = sample_spec(5, idx, PROFILES["source"])
        rgb, mask_s = render_scene(spec_s)
        target = degrade(rgb, spec_t)
        luma = np.tensordot(np.array([0.299, 0.587, 0.114]), rgb, axes=1)
        assert np.array_equal(target, np.clip(luma, 0.0, 1.0))
        _, mask_t = render_scene(spec_t)
        assert np.array_equal(mask_s, mask_t)


def test_blur_monotonically_reduces_boundary_gradient():
    spec = sample_spec(9, 0, PROFILES["source"])
    rgb, mask = render_scene(spec)
    stats = []
    for blur in (0.0, 0.5, 1.0, 2.0):
        shifted = spec.__class__(**{**spec.__dict__, "blur_sigma": blur, "grayscale": True,
                                    "noise_sigma": 0.0})
        stats.append(boundary_gradient_stat(degrade(rgb, shifted), mask))
    assert all(a > b for a, b in zip(stats, stats[1:]))


def test_unknown_profile_rejected():
    with pytest.raises(ValueError, match="unknown shift profile"):
        generate(0, 1, "xray-like")


def test_oracle_box_single_pixel_exclusive_convention():
    mask = np.zeros((16, 16), dtype=bool)
    mask[5, 7] = True
    assert oracle_box(mask, pad=0) == BoxPrompt(7.0, 5.0, 8.0, 6.0)


def test_oracle_box_pad_clips_to_canvas():
    mask = np.zeros((8, 8), dtype=bool)
    mask[4, 4] = True
    assert oracle_box(mask, pad=100) == BoxPrompt(0.0, 0.0, 8.0, 8.0)


def test_oracle_box_rejects_empty_mask():
    with pytest.raises(ValueError, match="empty"):
        oracle_box(np.zeros((4, 4), dtype=bool))


@given(seed=st.integers(0, 100_000))
@settings(max_examples=30, deadline=None)
def test_oracle_box_contains_every_foreground_pixel(seed):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(12, 12)) < 0.15
    if not mask.any():
        mask[rng.integers(12), rng.integers(12)] = True
    box = oracle_box(mask, pad=rng.integers(0, 3))
    ys, xs = np.nonzero(mask)
    assert box.x0 <= xs.min() and xs.max() < box.x1
    assert box.y0 <= ys.min() and ys.max() < box.y1


def test_box_prompt_validates():
    with pytest.raises(ValueError, match="degenerate"):
        BoxPrompt(5.0, 5.0, 5.0, 9.0)
    with pytest.raises(ValueError, match="negative"):
        BoxPrompt(-1.0, 0.0, 2.0, 2.0)


def test_dataset_roundtrip(tmp_path):
    samples = gen_source(1, 2) + gen_target(1, 2, "ct-like")
    manifest = write_dataset(samples, tmp_path)
    pairs = load_manifest(manifest)
    assert len(pairs) == 4
    for (img_path, mask_path), original in zip(pairs, samples):
        loaded = load_sample(img_path, mask_path)
        assert loaded.image.shape == original.image.shape
        assert np.array_equal(loaded.gt_mask, original.gt_mask)
        assert np.max(np.abs(loaded.image - original.image)) <= 0.5 / 255
        assert loaded.box == original.box


def test_load_sample_empty_mask_yields_no_box(tmp_path):
    from ttaseg.netpbm import write_pgm
    write_pgm(tmp_path / "img.pgm", np.full((8, 8), 0.5))
    write_pgm(tmp_path / "mask.pgm", np.zeros((8, 8), dtype=bool))
    sample = load_sample(tmp_path / "img.pgm", tmp_path / "mask.pgm")
    assert sample.box is None
    assert not sample.gt_mask.any()


def test_manifest_requires_header(tmp_path):
    bad = tmp_path / "manifest.csv"
    bad.write_text("a,b\nx.pgm,y.pgm\n")
    with pytest.raises(ValueError, match="header"):
        load_manifest(bad)


def test_empty_manifest_rejected(tmp_path):
    empty = tmp_path / "manifest.csv"
    empty.write_text("image,mask\n")
    with pytest.raises(ValueError, match="no samples"):
        load_manifest(empty)


def test_source_is_color_target_is_gray():
    assert gen_source(0, 1)[0].image.ndim == 3
    assert gen_target(0, 1, "mri-like")[0].image.ndim == 2


def test_profiles_match_documented_ranges():
    assert PROFILES["mri-like"].gamma_range == (0.4, 0.7)
    assert PROFILES["mri-like"].blur_range == (1.0, 2.0)
    assert PROFILES["mri-like"].noise_sigma == 0.05
    assert PROFILES["ct-like"].gamma_range == (1.5, 2.5)
    assert PROFILES["ct-like"].blur_range == (0.5, 1.5)
    assert PROFILES["ct-like"].noise_sigma == 0.03
