import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerstack.layerspace import (
    ForegroundLayer,
    LayerMask,
    LayerSet,
    LayerValidationError,
    background_from_foregrounds,
    binarize_masks,
    composite,
    dilate_mask,
    exclusivity,
    validate,
)

from _oracles import pixel_loop_composite


def random_partition(rng, n_layers, h, w):
    owner = rng.integers(0, n_layers, size=(h, w))
    return [(owner == i).astype(np.float32) for i in range(n_layers)]


def random_layer_set(rng, n_layers=3, h=4, w=4):
    masks = random_partition(rng, n_layers, h, w)
    images = rng.uniform(-1, 1, size=(n_layers, h, w, 3)).astype(np.float32)
    fgs = tuple(ForegroundLayer(images[i], LayerMask(masks[i]), f"fg {i}") for i in range(1, n_layers))
    return LayerSet(images[0], LayerMask(masks[0]), fgs, "global")


# --- composite --------------------------------------------------------------

def test_full_coverage_foreground_gives_constant():
    h = w = 5
    fg = ForegroundLayer(np.full((h, w, 3), 0.3), LayerMask(np.ones((h, w))), "a red circle")
    ls = LayerSet(np.full((h, w, 3), -0.7), LayerMask(np.zeros((h, w))), (fg,), "g")
    assert np.all(composite(ls).pixels == np.float32(0.3))


def test_background_only_is_identity():
    rng = np.random.default_rng(0)
    bg = rng.uniform(-1, 1, size=(6, 7, 3)).astype(np.float32)
    ls = LayerSet(bg, LayerMask(np.ones((6, 7))), (), "g")
    assert np.array_equal(composite(ls).pixels, bg)


def test_composite_matches_pixel_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ls = random_layer_set(rng, 3, 4, 4)
        assert np.array_equal(composite(ls).pixels, pixel_loop_composite(ls))


def test_composite_permutation_invariant():
    rng = np.random.default_rng(2)
    ls = random_layer_set(rng, 4, 8, 8)
    ref = composite(ls).pixels
    for perm in itertools.permutations(range(3)):
        assert np.array_equal(composite(ls.permuted(perm)).pixels, ref)


def test_composite_rejects_soft_masks_in_strict_mode():
    h = w = 3
    fg = ForegroundLayer(np.zeros((h, w, 3)), LayerMask(np.full((h, w), 0.5)), "p")
    ls = LayerSet(np.zeros((h, w, 3)), LayerMask(np.full((h, w), 0.5)), (fg,), "g")
    with pytest.raises(LayerValidationError):
        composite(ls)
    assert composite(ls, strict=False).pixels.shape == (h, w, 3)


def test_dimension_mismatch_rejected():
    with pytest.raises(LayerValidationError):
        ForegroundLayer(np.zeros((4, 4, 3)), LayerMask(np.zeros((5, 4))), "p")


# --- background complement -------------------------------------------------

def test_background_of_nothing_is_all_ones():
    assert np.all(background_from_foregrounds([], shape=(3, 3)).grid == 1)


def test_background_of_tiling_is_zero():
    left = np.zeros((4, 4), np.float32)
    left[:, :2] = 1
    assert np.all(background_from_foregrounds([LayerMask(left), LayerMask(1 - left)]).grid == 0)


def test_background_complement_pixel_loop():
    rng = np.random.default_rng(3)
    a, b, _ = random_partition(rng, 3, 6, 6)
    bg = background_from_foregrounds([LayerMask(a), LayerMask(b)]).grid
    for y in range(6):
        for x in range(6):
            assert bg[y, x] == 1.0 - a[y, x] - b[y, x]


def test_background_overlap_rejected():
    m = np.ones((2, 2), np.float32)
    with pytest.raises(LayerValidationError, match="overlap"):
        background_from_foregrounds([LayerMask(m), LayerMask(m)])


# --- binarization -------------------------------------------------------------

def test_binarize_argmax():
    soft = np.array([0.9, 0.2, 0.4], np.float32).reshape(3, 1, 1)
    assert [m.grid.item() for m in binarize_masks(soft)] == [1, 0, 0]


def test_binarize_tie_goes_to_lowest_index():
    soft = np.array([0.5, 0.5], np.float32).reshape(2, 1, 1)
    assert [m.grid.item() for m in binarize_masks(soft)] == [1, 0]


def test_binarize_averages_channels():
    soft = np.zeros((2, 1, 1, 3), np.float32)
    soft[0, 0, 0] = [1.0, 0.0, 0.0]  # mean 1/3
    soft[1, 0, 0] = [0.4, 0.4, 0.4]  # mean 0.4
    assert [m.grid.item() for m in binarize_masks(soft)] == [0, 1]


def test_binarize_partition_pixel_loop():
    rng = np.random.default_rng(4)
    soft = rng.uniform(size=(3, 8, 8, 3)).astype(np.float32)
    out = binarize_masks(soft)
    means = soft.mean(axis=-1)
    for y in range(8):
        for x in range(8):
            col = [m.grid[y, x] for m in out]
            assert sum(col) == 1
            best = max(range(3), key=lambda i: (means[i, y, x], -i))
            assert col[best] == 1


@settings(max_examples=50, deadline=None)
@given(
    layers=st.integers(1, 4),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_partition_of_unity_property(layers, h, w, seed):
    soft = np.random.default_rng(seed).uniform(size=(layers, h, w)).astype(np.float32)
    total = np.sum([m.grid for m in binarize_masks(soft)], axis=0)
    assert np.all(total == 1)


def test_complement_closure():
    rng = np.random.default_rng(5)
    part = random_partition(rng, 3, 7, 7)
    fg = [LayerMask(m) for m in part[1:]]
    bg = background_from_foregrounds(fg)
    again = binarize_masks(np.stack([bg.grid] + [m.grid for m in fg]))
    for a, b in zip(again, [bg] + fg):
        assert np.array_equal(a.grid, b.grid)


# --- dilation -----------------------------------------------------------------

def loop_dilate(grid, k):
    r = k // 2
    h, w = grid.shape
    out = np.zeros_like(grid)
    for y in range(h):
        for x in range(w):
            out[y, x] = grid[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1].max()
    return out


def test_dilate_kernel_one_is_identity():
    m = (np.random.default_rng(6).uniform(size=(9, 9)) > 0.7).astype(np.float32)
    assert np.array_equal(dilate_mask(LayerMask(m), 1).grid, m)


def test_dilate_single_pixel_block():
    m = np.zeros((9, 9), np.float32)
    m[4, 4] = 1
    expected = np.zeros_like(m)
    expected[2:7, 2:7] = 1
    assert np.array_equal(dilate_mask(LayerMask(m), 5).grid, expected)
    corner = np.zeros((9, 9), np.float32)
    corner[0, 0] = 1
    expected = np.zeros_like(corner)
    expected[:3, :3] = 1
    assert np.array_equal(dilate_mask(LayerMask(corner), 5).grid, expected)


def test_dilate_matches_neighbourhood_loop():
    m = (np.random.default_rng(7).uniform(size=(16, 16)) > 0.85).astype(np.float32)
    out = dilate_mask(LayerMask(m), 5).grid
    assert np.array_equal(out, loop_dilate(m, 5))
    assert out.min() >= m.min() and np.all(out >= m)


@pytest.mark.parametrize("k", [0, 2, 4, -1])
def test_dilate_rejects_even_kernels(k):
    with pytest.raises(ValueError):
        dilate_mask(LayerMask(np.zeros((3, 3))), k)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k1=st.sampled_from([1, 3, 5]), k2=st.sampled_from([5, 7, 9]))
def test_dilation_monotone(seed, k1, k2):
    m = (np.random.default_rng(seed).uniform(size=(10, 10)) > 0.8).astype(np.float32)
    assert np.all(dilate_mask(LayerMask(m), k1).grid <= dilate_mask(LayerMask(m), k2).grid)


# --- validation -----------------------------------------------------------------

def test_validate_accepts_partition():
    validate(random_layer_set(np.random.default_rng(8), 3, 5, 5))


def test_validate_rejects_overlap():
    h = w = 4
    m = np.zeros((h, w), np.float32)
    m[0, 0] = 1
    fgs = (ForegroundLayer(np.zeros((h, w, 3)), LayerMask(m), "a"), ForegroundLayer(np.zeros((h, w, 3)), LayerMask(m), "b"))
    ls = LayerSet(np.zeros((h, w, 3)), LayerMask(1 - m), fgs, "g")
    with pytest.raises(LayerValidationError):
        validate(ls)


def test_validate_rejects_wrong_background():
    ls = random_layer_set(np.random.default_rng(9), 2, 4, 4)
    bad = LayerSet(ls.background_image, LayerMask(np.ones((4, 4))), ls.foregrounds, "g")
    with pytest.raises(LayerValidationError, match="complement"):
        validate(bad)


def test_validate_rejects_layer_count():
    ls = LayerSet(np.zeros((2, 2, 3)), LayerMask(np.ones((2, 2))), (), "g")
    with pytest.raises(LayerValidationError, match="layer count"):
        validate(ls)


def test_exclusivity_bounds():
    onehot = np.stack(random_partition(np.random.default_rng(10), 3, 5, 5))
    assert exclusivity(onehot) == 1.0
    assert exclusivity(np.full((3, 5, 5), 0.4)) == 0.0
