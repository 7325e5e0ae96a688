"""Overlapping patch extraction, weighted stitching, and spatial splits.

Patches are always full-size: the boundary patch on each axis is shifted
inward so every source element is covered at least once. Stitching blends
overlapping predictions with a separable triangular (center-peaked) weight
window and normalizes by the accumulated weight, so stitching the extracted
patches of any image reproduces it exactly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np


class TilingError(ValueError):
    pass


@dataclass
class PatchGrid:
    source_shape: tuple   # spatial extents only
    patch_shape: tuple
    stride: tuple
    origins: list         # row-major list of per-axis origin tuples

    def to_json(self):
        return json.dumps({
            "source_shape": list(self.source_shape),
            "patch_shape": list(self.patch_shape),
            "stride": list(self.stride),
            "origins": [list(o) for o in self.origins],
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(tuple(d["source_shape"]), tuple(d["patch_shape"]),
                   tuple(d["stride"]), [tuple(o) for o in d["origins"]])


def _axis_origins(size, patch, stride):
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)  # boundary patch clamped inward
    return origins


def extract_patches(image, patch_shape, overlap):
    """Split (C, *spatial) into full-size overlapping patches.

    Returns (stack, grid) where stack is (n_patches, C, *patch_shape).
    """
    image = np.asarray(image)
    spatial = image.shape[1:]
    patch_shape = tuple(patch_shape)
    overlap = tuple(overlap)
    if len(patch_shape) != len(spatial) or len(overlap) != len(spatial):
        raise TilingError("patch/overlap rank must match the image's spatial rank")
    for ax, (p, o, s) in enumerate(zip(patch_shape, overlap, spatial)):
        if p > s:
            raise TilingError(f"patch extent {p} exceeds image extent {s} on axis {ax}")
        if o >= p:
            raise TilingError(f"overlap {o} must be smaller than patch {p} on axis {ax}")
    stride = tuple(p - o for p, o in zip(patch_shape, overlap))
    per_axis = [_axis_origins(s, p, st) for s, p, st in zip(spatial, patch_shape, stride)]
    origins = [tuple(o) for o in itertools.product(*per_axis)]
    patches = np.empty((len(origins), image.shape[0]) + patch_shape, image.dtype)
    for i, org in enumerate(origins):
        sl = (slice(None),) + tuple(slice(o, o + p) for o, p in zip(org, patch_shape))
        patches[i] = image[sl]
    return patches, PatchGrid(spatial, patch_shape, stride, origins)


def _triangle_window(patch_shape, dtype):
    """Separable center-peaked weights, strictly positive everywhere."""
    axes = []
    for p in patch_shape:
        ramp = np.minimum(np.arange(1, p + 1), np.arange(p, 0, -1)).astype(dtype)
        axes.append(ramp / ramp.max())
    w = axes[0]
    for a in axes[1:]:
        w = np.multiply.outer(w, a)
    return w


def stitch(patches, grid: PatchGrid):
    """Overlap-weighted average of patch predictions back onto the source grid."""
    patches = np.asarray(patches)
    if patches.shape[0] != len(grid.origins):
        raise TilingError(
            f"stack has {patches.shape[0]} patches, grid expects {len(grid.origins)}")
    if tuple(patches.shape[2:]) != tuple(grid.patch_shape):
        raise TilingError(
            f"patch shape {patches.shape[2:]} != grid patch shape {grid.patch_shape}")
    channels = patches.shape[1]
    acc_dtype = np.float64 if patches.dtype == np.float64 else np.float32
    out = np.zeros((channels,) + tuple(grid.source_shape), acc_dtype)
    weight = np.zeros(tuple(grid.source_shape), acc_dtype)
    window = _triangle_window(grid.patch_shape, acc_dtype)
    for i, org in enumerate(grid.origins):
        sl = tuple(slice(o, o + p) for o, p in zip(org, grid.patch_shape))
        out[(slice(None),) + sl] += patches[i] * window
        weight[sl] += window
    return (out / weight).astype(patches.dtype)


def spatial_split(image, sizes=None, fractions=None, axis=0):
    """Partition an image into three contiguous regions along a spatial axis.

    ``sizes`` gives explicit extents (must sum to the axis extent);
    ``fractions`` divides proportionally, remainder going to the last region.
    Returns (train, test, calibration) views that tile the image exactly, so
    no element is shared between regions.
    """
    image = np.asarray(image)
    extent = image.shape[1 + axis]
    if (sizes is None) == (fractions is None):
        raise TilingError("give exactly one of sizes or fractions")
    if fractions is not None:
        sizes = [int(extent * f) for f in fractions[:2]]
        sizes.append(extent - sum(sizes))
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise TilingError(f"need three positive region sizes, got {sizes}")
    if sum(sizes) != extent:
        raise TilingError(f"region sizes {sizes} do not sum to extent {extent}")
    bounds = np.cumsum([0] + list(sizes))
    regions = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = [slice(None)] * image.ndim
        sl[1 + axis] = slice(int(lo), int(hi))
        regions.append(image[tuple(sl)])
    return tuple(regions)
