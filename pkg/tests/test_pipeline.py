import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from wavelane import pipeline as P
from wavelane.tensor import ShapeError

from oracles import window_origins


# -- grid geometry -------------------------------------------------------------


def test_test_grid_counts_24_per_image_and_240_total():
    grid = P.make_grid((5616, 3744), 1024, 1000)
    assert len(grid) == 6 * 4 == 24
    assert sum(len(P.make_grid((5616, 3744), 1024, 1000)) for _ in range(10)) == 240


def test_train_grid_counts_35():
    assert len(P.make_grid((5616, 3744), 1024, 800)) == 7 * 5 == 35


def test_edge_windows_are_clamped():
    grid = P.make_grid((5616, 3744), 1024, 1000)
    xs = sorted({x for x, _ in grid.origins})
    ys = sorted({y for _, y in grid.origins})
    assert xs == [0, 1000, 2000, 3000, 4000, 4592]
    assert ys == [0, 1000, 2000, 2720]


def test_patch_larger_than_extent_rejected():
    with pytest.raises(ShapeError):
        P.make_grid((500, 2000), 1024, 1000)


def test_stride_beyond_patch_rejected():
    with pytest.raises(ValueError, match="gaps"):
        P.make_grid((100, 100), 10, 11)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300))
def test_origins_match_enumeration_and_formula(extent, patch, stride):
    assume(stride <= patch <= extent)
    got = P.axis_origins(extent, patch, stride)
    assert got == window_origins(extent, patch, stride)
    assert len(got) == math.ceil((extent - patch) / stride) + 1


@given(st.integers(8, 80), st.integers(8, 80), st.integers(4, 8), st.integers(1, 8))
def test_coverage_and_bounds(w, h, patch, stride):
    assume(stride <= patch)
    grid = P.make_grid((w, h), patch, stride)
    cover = np.zeros((h, w), dtype=int)
    for rows, cols in grid.windows():
        assert rows.stop <= h and cols.stop <= w and rows.start >= 0 and cols.start >= 0
        cover[rows, cols] += 1
    assert (cover >= 1).all()


# -- extract / stitch ------------------------------------------------------------


def test_single_window_extract_is_image(rng):
    img = rng.random((3, 16, 16))
    (p,) = P.extract(img, P.make_grid((16, 16), 16, 16))
    np.testing.assert_array_equal(p, img)


def test_extract_extent_mismatch():
    with pytest.raises(ShapeError):
        P.extract(np.zeros((3, 10, 12)), P.make_grid((10, 10), 4, 4))


def test_non_overlapping_windows_tile_the_image(rng):
    img = rng.random((3, 12, 8))
    grid = P.make_grid((8, 12), 4, 4)
    canvas = np.zeros_like(img)
    for p, (rows, cols) in zip(P.extract(img, grid), grid.windows()):
        canvas[:, rows, cols] = p
    np.testing.assert_array_equal(canvas, img)
    logits, _ = P.stitch(P.extract(img[:2], grid), grid)
    np.testing.assert_array_equal(logits, img[:2])


def test_overlap_shares_pixels(rng):
    img = rng.random((1, 10, 10))
    grid = P.make_grid((10, 10), 6, 4)
    a, b = P.extract(img, grid)[:2]
    np.testing.assert_array_equal(a[:, :, 4:6], b[:, :, 0:2])


def test_overlap_strip_of_opposite_logits_falls_to_background():
    grid = P.make_grid((40, 32), 32, 8)  # two windows overlapping 24 px
    assert len(grid) == 2
    L = np.zeros((2, 32, 32))
    L[1] = 1.0
    logits, mask = P.stitch([L, -L], grid)
    np.testing.assert_array_equal(logits[:, :, 8:32], 0.0)
    assert not mask[:, 8:32].any()
    assert mask[:, :8].all() and not mask[:, 32:].any()


def test_identical_windows_give_that_decision():
    grid = P.make_grid((20, 20), 8, 3)
    L = np.stack([np.full((8, 8), 0.2), np.full((8, 8), 0.7)])
    logits, mask = P.stitch([L] * len(grid), grid)
    np.testing.assert_allclose(logits, np.broadcast_to(L[:, :1, :1], (2, 20, 20)))
    assert mask.all()


def test_patch_count_mismatch():
    grid = P.make_grid((16, 16), 8, 8)
    with pytest.raises(ShapeError):
        P.stitch([np.zeros((2, 8, 8))] * 3, grid)


@given(
    st.integers(16, 48),
    st.integers(16, 48),
    st.integers(8, 16),
    st.integers(1, 16),
    st.integers(0, 2**16),
)
def test_ground_truth_round_trip_is_exact(w, h, patch, stride, seed):
    assume(stride <= patch)
    mask = (np.random.default_rng(seed).random((h, w)) < 0.3).astype(np.uint8)
    grid = P.make_grid((w, h), patch, stride)
    _, out = P.stitch(P.extract(P.one_hot(mask), grid), grid)
    np.testing.assert_array_equal(out, mask)


def test_predict_image_pads_small_inputs_and_is_worker_independent(rng):
    img = rng.random((3, 20, 30))

    def predictor(tile):
        return np.stack([np.zeros(tile.shape[1:]), tile[0] - 0.5])

    a_logits, a_mask = P.predict_image(img, predictor, 32, 16)
    b_logits, b_mask = P.predict_image(img, predictor, 32, 16, workers=3)
    assert a_mask.shape == (20, 30)
    np.testing.assert_array_equal(a_logits, b_logits)
    np.testing.assert_array_equal(a_mask, (img[0] > 0.5).astype(np.uint8))


# -- preprocessing / augmentation ------------------------------------------------


def test_subtract_mean_examples(rng):
    stats = P.DatasetStats((0.1, 0.2, 0.3), (10, 1))
    patch = np.broadcast_to(np.array([0.1, 0.2, 0.3])[:, None, None], (3, 4, 4)).copy()
    np.testing.assert_allclose(P.subtract_mean(patch, stats), 0.0, atol=1e-15)
    x = rng.random((3, 4, 4))
    np.testing.assert_array_equal(P.subtract_mean(x, P.DatasetStats((0.0, 0.0, 0.0), (1, 1))), x)


def test_training_mean_is_removed(rng):
    imgs = [rng.integers(0, 256, size=(3, 16, 16), dtype=np.uint8) for _ in range(3)]
    masks = [(rng.random((16, 16)) < 0.1).astype(np.uint8) for _ in range(3)]
    stats = P.compute_stats(imgs, masks)
    grid = P.make_grid((16, 16), 8, 8)
    patches = [P.subtract_mean(P.to_unit(p).astype(np.float64), stats) for im in imgs for p in P.extract(im, grid)]
    np.testing.assert_allclose(np.mean([p.mean(axis=(1, 2)) for p in patches], axis=0), 0.0, atol=1e-12)
    assert stats.class_counts == (sum(int((m == 0).sum()) for m in masks), sum(int(m.sum()) for m in masks))
    assert stats.class_ratio == stats.class_counts[0] / stats.class_counts[1]


def test_class_ratio_without_lanes():
    with pytest.raises(P.DataError):
        _ = P.DatasetStats((0, 0, 0), (10, 0)).class_ratio


@given(arrays(np.uint8, (2, 6, 5), elements=st.integers(0, 255)), st.integers(0, 2**16))
def test_flip_pairs_image_and_mask(img, seed):
    mask = (img[0] > 127).astype(np.uint8)
    a, m = P.augment_flip(img, mask, seed)
    np.testing.assert_array_equal(m, (a[0] > 127).astype(np.uint8))
    assert m.sum() == mask.sum()
    b, n = P.augment_flip(img, mask, seed)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(m, n)


def test_double_horizontal_flip_identity(rng):
    x = rng.random((3, 4, 5))
    np.testing.assert_array_equal(x[..., ::-1][..., ::-1], x)
    seeds = [s for s in range(50) if tuple(np.random.default_rng(s).random(2) < 0.5) == (True, False)][:1]
    a, _ = P.augment_flip(x, x[0], seeds[0])
    b, _ = P.augment_flip(a, a[0], seeds[0])
    np.testing.assert_array_equal(b, x)


# -- PNG I/O -------------------------------------------------------------------


def test_png_round_trips(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 9, 7), dtype=np.uint8)
    P.write_rgb(tmp_path / "a.png", img)
    np.testing.assert_array_equal(P.read_rgb(tmp_path / "a.png"), img)
    mask = (rng.random((9, 7)) < 0.5).astype(np.uint8)
    P.write_mask(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(P.read_mask(tmp_path / "m.png"), mask)


def test_mask_with_grey_values_rejected(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((4, 4), 128, dtype=np.uint8), mode="L").save(tmp_path / "bad.png")
    with pytest.raises(P.DataError, match="values other than"):
        P.read_mask(tmp_path / "bad.png")


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(P.DataError):
        P.read_rgb(tmp_path / "x.png")


def test_overlay_colours():
    img = np.zeros((3, 2, 2), dtype=np.uint8)
    pred = np.array([[1, 0], [0, 0]])
    truth = np.array([[1, 1], [0, 0]])
    out = P.overlay(img, pred, truth)
    assert out[:, 0, 0].tolist() == [255, 0, 0]
    assert out[:, 0, 1].tolist() == [0, 0, 255]
    assert out[:, 1, 1].tolist() == [0, 0, 0]
