import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from helpers import stitch_oracle, tiler_oracle
from manet.data import (BUILDING, TAXONOMY, DataError, Sample, TileIndex, augment, augment_with,
                        dataset_fingerprint, load_patch, load_split, normalize_dsm, patch_paths,
                        read_dsm, slide_windows, stitch_average, synth_generate, write_dsm, write_labels,
                        write_optical, write_synthetic_dataset)


def _write(tmp_path, h, w, hl=None, wl=None, labels_max=5, seed=0):
    rng = np.random.default_rng(seed)
    d = tmp_path / "patch"
    d.mkdir(exist_ok=True)
    opt, dsm, lab = patch_paths(d)
    write_optical(opt, rng.random((3, h, w)))
    write_dsm(dsm, rng.random((h, w)) * 30)
    write_labels(lab, rng.integers(0, labels_max + 1, (hl or h, wl or w)))
    return opt, dsm, lab


def test_taxonomy():
    assert TAXONOMY.names == ("Building", "Tree", "LowVegetation", "Car", "ImperviousSurface", "Clutter")
    assert TAXONOMY.foreground == (True,) * 5 + (False,)
    assert sum(not f for f in TAXONOMY.foreground) == 1


def test_load_patch_roundtrip(tmp_path):
    s = load_patch(*_write(tmp_path, 512, 512))
    assert s.optical.shape == (3, 512, 512) and s.dsm.shape == (1, 512, 512) and s.labels.shape == (512, 512)
    assert 0.0 <= s.optical.min() and s.optical.max() <= 1.0
    assert s.dsm.min() == 0.0 and s.dsm.max() == 1.0


def test_load_patch_extent_mismatch(tmp_path):
    with pytest.raises(DataError, match="extent mismatch"):
        load_patch(*_write(tmp_path, 32, 32, hl=32, wl=16))


def test_load_patch_label_out_of_range(tmp_path):
    paths = _write(tmp_path, 16, 16, labels_max=7)
    with pytest.raises(DataError, match="labels.png"):
        load_patch(*paths)


def test_constant_dsm_normalizes_to_zero():
    assert not normalize_dsm(np.full((4, 4), 12.5)).any()


def test_dsm_header_and_bitexact(tmp_path):
    d = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
    write_dsm(tmp_path / "a.raw", d)
    assert read_dsm(tmp_path / "a.raw").tobytes() == d.tobytes()
    lines = (tmp_path / "a.hdr").read_text().split("\n")
    assert lines[:2] == ["5", "7"] and float(lines[2]) == d.min() and float(lines[3]) == d.max()
    (tmp_path / "a.hdr").write_text("6\n7\n0\n1\n")
    with pytest.raises(DataError):
        read_dsm(tmp_path / "a.raw")


# -- tiling -------------------------------------------------------------------
def _offsets(tiles):
    return [(t.row, t.col) for t in tiles]


def test_slide_window_examples():
    assert len(slide_windows((256, 256), 256, 256)) == 1
    assert len(slide_windows((512, 512), 256, 128)) == 9
    assert _offsets(slide_windows((300, 256), 256, 256)) == [(0, 0), (44, 0)]


def test_slide_window_errors():
    with pytest.raises(ValueError):
        slide_windows((100, 100), 128, 64)
    with pytest.raises(ValueError):
        slide_windows((100, 100), 64, 0)
    with pytest.raises(ValueError):
        slide_windows((3, 3), 1, 2)  # would leave gaps


@st.composite
def tiling(draw):
    window = draw(st.integers(1, 40))
    h = draw(st.integers(window, 120))
    w = draw(st.integers(window, 120))
    stride = draw(st.integers(1, window))
    return (h, w), window, stride


@given(tiling())
def test_tiler_matches_brute_force_and_covers(args):
    extent, window, stride = args
    tiles = slide_windows(extent, window, stride, "p")
    assert _offsets(tiles) == tiler_oracle(extent, window, stride)
    cover = np.zeros(extent, dtype=int)
    for t in tiles:
        assert t.row + window <= extent[0] and t.col + window <= extent[1]
        cover[t.row:t.row + window, t.col:t.col + window] += 1
    assert cover.min() >= 1


def test_stitch_no_overlap_is_concatenation(rng):
    tiles = slide_windows((8, 8), 4, 4)
    probs = [rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1) for _ in tiles]
    out = stitch_average(zip(tiles, probs), (8, 8))
    for t, p in zip(tiles, probs):
        np.testing.assert_allclose(out[:, t.row:t.row + 4, t.col:t.col + 4], p, atol=1e-6)


def test_stitch_overlap_average():
    p = np.zeros((2, 4, 4)); p[0] = 1.0
    q = np.zeros((2, 4, 4)); q[1] = 1.0
    out = stitch_average([(TileIndex("", 0, 0, 2), p), (TileIndex("", 0, 2, 2), q)], (4, 6))
    np.testing.assert_allclose(out[:, :, 2:4], 0.5)
    np.testing.assert_allclose(out[0, :, :2], 1.0)


def test_stitch_nine_tile_oracle():
    tiles = slide_windows((512, 512), 256, 128)
    probs = [np.stack([np.full((256, 256), (i % 4) / 8.0), np.full((256, 256), 1 - (i % 4) / 8.0)])
             for i in range(len(tiles))]
    out = stitch_average(zip(tiles, probs), (512, 512))
    ref = stitch_oracle([((t.row, t.col), p) for t, p in zip(tiles, probs)], (512, 512), 2)
    assert out.tobytes() == ref.tobytes()


def test_stitch_uncovered_pixel():
    with pytest.raises(AssertionError):
        stitch_average([(TileIndex("", 0, 0, 4), np.full((2, 4, 4), 0.5))], (4, 8))


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_stitch_renormalized_and_weights(seed, stride):
    rng = np.random.default_rng(seed)
    tiles = slide_windows((12, 12), 8, stride)
    probs = [rng.dirichlet(np.ones(4), size=(8, 8)).transpose(2, 0, 1) for _ in tiles]
    out = stitch_average(zip(tiles, probs), (12, 12))
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-5)
    # with constant tiles the implied weights are uniform: output equals the mean of covering constants
    const = [np.full_like(p, 0.25) for p in probs]
    np.testing.assert_allclose(stitch_average(zip(tiles, const), (12, 12)), 0.25, atol=1e-7)


# -- augmentation -----------------------------------------------------------------
def _sample(rng, n=6):
    return Sample(rng.random((3, n, n)).astype(np.float32), rng.random((1, n, n)).astype(np.float32),
                  rng.integers(0, 6, (n, n)))


def test_augment_identity_and_involution(rng):
    s = _sample(rng)
    same = augment_with(s, 0, False)
    assert np.array_equal(same.optical, s.optical) and np.array_equal(same.labels, s.labels)
    twice = augment_with(augment_with(s, 2, False), 2, False)
    assert np.array_equal(twice.dsm, s.dsm) and np.array_equal(twice.labels, s.labels)


@given(st.integers(0, 3), st.booleans(), st.integers(0, 2 ** 31 - 1))
def test_augmentation_consistency(rot, flip, seed):
    rng = np.random.default_rng(seed)
    s = _sample(rng)
    # encode each pixel's coordinate in all rasters, then check they travel together
    code = np.arange(36).reshape(6, 6)
    s = Sample(np.stack([code] * 3).astype(np.float32), code[None].astype(np.float32), code.copy())
    a = augment_with(s, rot, flip)
    assert np.array_equal(a.optical[0], a.labels) and np.array_equal(a.dsm[0], a.labels)
    assert np.array_equal(np.sort(a.labels.ravel()), np.arange(36))


@given(st.integers(0, 2 ** 31 - 1))
def test_augment_preserves_histogram(seed):
    rng = np.random.default_rng(seed)
    s = _sample(rng)
    a = augment(s, seed)
    assert np.array_equal(np.bincount(a.labels.ravel(), minlength=6), np.bincount(s.labels.ravel(), minlength=6))


def test_augment_requires_square(rng):
    s = Sample(np.zeros((3, 4, 6)), np.zeros((1, 4, 6)), np.zeros((4, 6), int))
    with pytest.raises(DataError):
        augment(s, 0)


# -- synthetic data -------------------------------------------------------------------
def test_synth_deterministic(tmp_path):
    a = write_synthetic_dataset(tmp_path / "a", 6, 2, seed=5, size=64)
    b = write_synthetic_dataset(tmp_path / "b", 6, 2, seed=5, size=64)
    assert dataset_fingerprint(a) == dataset_fingerprint(b)
    c = write_synthetic_dataset(tmp_path / "c", 6, 2, seed=6, size=64)
    assert dataset_fingerprint(a) != dataset_fingerprint(c)


def test_synth_class_coverage_and_height_rule():
    patches = synth_generate(8, seed=0)
    labels = np.concatenate([p.labels.ravel() for p in patches])
    assert (np.bincount(labels, minlength=6) > 0).sum() >= 4
    for p in patches:
        b = p.labels == BUILDING
        if b.any():
            assert p.dsm[b].mean() > p.dsm[~b].mean()


def test_buildings_indistinguishable_in_optical():
    p = synth_generate(1, seed=2)[0]
    b, imp = p.labels == BUILDING, p.labels == 4
    assert np.abs(p.optical[:, b].mean(axis=1) - p.optical[:, imp].mean(axis=1)).max() < 0.01


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        synth_generate(0, seed=0)
    with pytest.raises(ValueError):
        synth_generate(2, seed=0, num_classes=5)


def test_synth_loads(synth_root):
    train = load_split(synth_root, "train")
    test = load_split(synth_root, "test")
    assert len(train) == 4 and len(test) == 2
    assert all(s.labels.max() < 6 for _, s in train + test)


def test_missing_split(tmp_path):
    with pytest.raises(DataError):
        load_split(tmp_path, "train")
