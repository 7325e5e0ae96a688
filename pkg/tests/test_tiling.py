"""Patch extraction, stitching, and spatial splits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqdenoise.tiling import (PatchGrid, TilingError, extract_patches,
                              spatial_split, stitch)


def test_single_patch_when_patch_equals_image():
    img = np.random.default_rng(0).normal(size=(1, 64, 64)).astype(np.float32)
    patches, grid = extract_patches(img, (64, 64), (0, 0))
    assert patches.shape == (1, 1, 64, 64)
    assert grid.origins == [(0, 0)]


def test_nine_patch_arithmetic_oracle():
    img = np.zeros((1, 128, 128), np.float32)
    patches, grid = extract_patches(img, (64, 64), (32, 32))
    assert len(grid.origins) == 9            # ((128-64)/32 + 1)^2
    assert sorted(set(o[0] for o in grid.origins)) == [0, 32, 64]
    assert sorted(set(o[1] for o in grid.origins)) == [0, 32, 64]


def test_boundary_clamp_inward():
    img = np.zeros((1, 100, 100), np.float32)
    _, grid = extract_patches(img, (64, 64), (32, 32))
    assert max(o[0] for o in grid.origins) == 36
    assert max(o[1] for o in grid.origins) == 36


def test_extract_validation():
    img = np.zeros((1, 32, 32), np.float32)
    with pytest.raises(TilingError, match="exceeds"):
        extract_patches(img, (64, 64), (0, 0))
    with pytest.raises(TilingError, match="overlap"):
        extract_patches(img, (16, 16), (16, 0))


def test_stitch_constant_partition_of_unity():
    img = np.full((2, 48, 40), 3.25, np.float32)
    patches, grid = extract_patches(img, (16, 16), (8, 8))
    out = stitch(patches, grid)
    np.testing.assert_allclose(out, 3.25, atol=1e-6)


def test_round_trip_identity_2d_and_3d():
    rng = np.random.default_rng(1)
    img2 = rng.normal(size=(3, 50, 37)).astype(np.float32)
    patches, grid = extract_patches(img2, (16, 12), (7, 5))
    np.testing.assert_allclose(stitch(patches, grid), img2, atol=1e-6)

    img3 = rng.normal(size=(1, 20, 18, 16)).astype(np.float32)
    patches, grid = extract_patches(img3, (8, 8, 8), (4, 4, 4))
    np.testing.assert_allclose(stitch(patches, grid), img3, atol=1e-6)


def test_reference_tiling_configurations():
    rng = np.random.default_rng(2)
    # patch 128 with 64 overlap in both spatial directions
    img = rng.normal(size=(3, 256, 192)).astype(np.float32)
    patches, grid = extract_patches(img, (128, 128), (64, 64))
    np.testing.assert_allclose(stitch(patches, grid), img, atol=1e-6)
    # 64^3 cubes with 32-voxel stride
    vol = rng.normal(size=(1, 96, 96, 96)).astype(np.float32)
    patches, grid = extract_patches(vol, (64, 64, 64), (32, 32, 32))
    assert grid.stride == (32, 32, 32)
    np.testing.assert_allclose(stitch(patches, grid), vol, atol=1e-6)


def test_stitch_grid_mismatch():
    img = np.zeros((1, 32, 32), np.float32)
    patches, grid = extract_patches(img, (16, 16), (8, 8))
    with pytest.raises(TilingError):
        stitch(patches[:-1], grid)


def test_grid_json_round_trip():
    _, grid = extract_patches(np.zeros((1, 40, 40)), (16, 16), (8, 8))
    again = PatchGrid.from_json(grid.to_json())
    assert again == grid


@settings(max_examples=40, deadline=None)
@given(h=st.integers(12, 70), w=st.integers(12, 70),
       ph=st.integers(4, 12), pw=st.integers(4, 12),
       oh=st.integers(0, 3), ow=st.integers(0, 3),
       seed=st.integers(0, 1000))
def test_round_trip_random_geometries(h, w, ph, pw, oh, ow, seed):
    img = np.random.default_rng(seed).normal(size=(1, h, w)).astype(np.float32)
    patches, grid = extract_patches(img, (ph, pw), (oh, ow))
    # coverage: every pixel appears in at least one patch
    covered = np.zeros((h, w), bool)
    for org in grid.origins:
        covered[org[0]:org[0] + ph, org[1]:org[1] + pw] = True
    assert covered.all()
    np.testing.assert_allclose(stitch(patches, grid), img, atol=1e-6)


# ---------------------------------------------------------------------------
# spatial splits


def test_split_reference_row_counts():
    img = np.zeros((3, 753, 10), np.float32)
    a, b, c = spatial_split(img, sizes=(420, 128, 205))
    assert a.shape[1] == 420 and b.shape[1] == 128 and c.shape[1] == 205


def test_split_equal_fractions():
    img = np.zeros((1, 99, 4), np.float32)
    parts = spatial_split(img, fractions=(1 / 3, 1 / 3, 1 / 3))
    assert [p.shape[1] for p in parts] == [33, 33, 33]


def test_split_partition_property():
    img = np.arange(2 * 30 * 4, dtype=np.float32).reshape(2, 30, 4)
    a, b, c = spatial_split(img, sizes=(10, 12, 8))
    np.testing.assert_array_equal(np.concatenate([a, b, c], axis=1), img)
    # views are disjoint row ranges: no value appears in two regions
    vals = [set(p.ravel().tolist()) for p in (a, b, c)]
    assert not (vals[0] & vals[1]) and not (vals[1] & vals[2])


def test_split_validation():
    img = np.zeros((1, 20, 4), np.float32)
    with pytest.raises(TilingError):
        spatial_split(img, sizes=(10, 5, 4))
