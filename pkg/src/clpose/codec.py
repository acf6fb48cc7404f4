"""Encoding poses into map stacks and decoding map stacks back to poses.

The encoder writes, per keypoint, one heatmap plane (activation falls off
with distance from the keypoint) and two offset planes holding the
stride-normalized displacement from every patch center to the keypoint.
Because every cell stores an exact displacement, decoding is exact for
noiseless maps at any stride; quantization error is entirely a property of
the argmax baseline decoder.

Encode and decode are pure functions and safe to run data-parallel.
"""

from __future__ import annotations

import numpy as np

from .core import (
    CodecConfig,
    DecodedPose,
    GridSpec,
    NormMode,
    PoseInstance,
    TargetMaps,
)
from .errors import DataError


def _check_in_bounds(pose: PoseInstance, grid: GridSpec) -> None:
    for idx, kp in enumerate(pose.keypoints):
        if not kp.labeled:
            continue
        if not (0.0 <= kp.x < grid.width and 0.0 <= kp.y < grid.height):
            raise DataError(
                f"labeled keypoint {idx} at ({kp.x}, {kp.y}) lies outside "
                f"the {grid.width}x{grid.height} image"
            )


def encode_heatmaps(
    pose: PoseInstance, grid: GridSpec, config: CodecConfig
) -> np.ndarray:
    """Encode K heatmap planes, shape (K, grid_height, grid_width).

    Cell value is exp(-D / (2 sigma^2)) where D is the squared (default) or
    plain Euclidean distance from the patch center to the keypoint,
    depending on config.norm_mode. Unlabeled keypoints produce all-zero
    planes; callers track them via the validity mask.
    """
    _check_in_bounds(pose, grid)
    cx, cy = grid.cell_centers()
    planes = np.zeros((pose.k, grid.grid_height, grid.grid_width), dtype=np.float64)
    denom = 2.0 * config.sigma * config.sigma
    for idx, kp in enumerate(pose.keypoints):
        if not kp.labeled:
            continue
        d2 = (cx - kp.x) ** 2 + (cy - kp.y) ** 2
        if config.norm_mode is NormMode.SQUARED_DISTANCE:
            planes[idx] = np.exp(-d2 / denom)
        else:
            planes[idx] = np.exp(-np.sqrt(d2) / denom)
    return planes


def encode_offsetmaps(pose: PoseInstance, grid: GridSpec) -> np.ndarray:
    """Encode 2K offset planes: K y-offset planes then K x-offset planes.

    Offsets are (keypoint - patch_center) / stride, defined at every cell.
    Restricting which cells are scored is the loss module's job. Unlabeled
    keypoints produce zero planes.
    """
    _check_in_bounds(pose, grid)
    cx, cy = grid.cell_centers()
    planes = np.zeros(
        (2 * pose.k, grid.grid_height, grid.grid_width), dtype=np.float64
    )
    for idx, kp in enumerate(pose.keypoints):
        if not kp.labeled:
            continue
        planes[idx] = (kp.y - cy) / grid.stride
        planes[pose.k + idx] = (kp.x - cx) / grid.stride
    return planes


def encode(pose: PoseInstance, grid: GridSpec, config: CodecConfig) -> TargetMaps:
    """Encode a pose into a full TargetMaps stack."""
    heatmaps = encode_heatmaps(pose, grid, config)
    offsets = encode_offsetmaps(pose, grid)
    return TargetMaps(
        grid=grid,
        heatmaps=heatmaps,
        y_offsets=offsets[: pose.k],
        x_offsets=offsets[pose.k :],
        valid=pose.labeled_mask(),
    )


def decode(maps: TargetMaps, config: CodecConfig) -> DecodedPose:
    """Decode a map stack into sub-stride keypoint coordinates.

    Per keypoint: cells whose heatmap activation reaches config.tau form the
    candidate set; each candidate proposes patch_center + offset * stride;
    the result is the activation-weighted mean of the proposals. When no
    cell reaches tau the single global-argmax cell is used (its offsets
    still applied) and the fallback flag is set; an all-zero plane therefore
    decodes to cell (0, 0)'s proposal with confidence 0 rather than failing.
    """
    grid = maps.grid
    cx, cy = grid.cell_centers()
    prop_x = cx + maps.x_offsets * grid.stride
    prop_y = cy + maps.y_offsets * grid.stride

    coords = np.empty((maps.k, 2), dtype=np.float64)
    confidence = np.empty(maps.k, dtype=np.float64)
    n_cells = np.empty(maps.k, dtype=np.int64)
    fallback = np.empty(maps.k, dtype=bool)
    for k in range(maps.k):
        plane = maps.heatmaps[k]
        selected = plane >= config.tau
        count = int(np.count_nonzero(selected))
        n_cells[k] = count
        fallback[k] = count == 0
        if count == 0:
            # Flat argmax scans row-major, so ties resolve to smallest (y, x).
            flat = int(np.argmax(plane))
            iy, ix = divmod(flat, grid.grid_width)
            coords[k, 0] = prop_x[k, iy, ix]
            coords[k, 1] = prop_y[k, iy, ix]
            confidence[k] = plane[iy, ix]
            continue
        weights = plane[selected]
        total = weights.sum()
        coords[k, 0] = float(np.dot(weights, prop_x[k][selected])) / total
        coords[k, 1] = float(np.dot(weights, prop_y[k][selected])) / total
        confidence[k] = float(weights.mean())
    return DecodedPose(
        coords=coords, confidence=confidence, n_cells=n_cells, used_fallback=fallback
    )


def argmax_decode(maps: TargetMaps) -> DecodedPose:
    """Heatmap-only baseline: each keypoint decodes to its argmax cell center.

    Ties resolve to the smallest (y, x) cell index. This decoder ignores the
    offset planes entirely, so its error grows with the stride (up to half a
    cell diagonal); it exists as the comparison baseline for quantization
    experiments. n_cells is reported as 1, the single contributing cell.
    """
    grid = maps.grid
    coords = np.empty((maps.k, 2), dtype=np.float64)
    confidence = np.empty(maps.k, dtype=np.float64)
    for k in range(maps.k):
        flat = int(np.argmax(maps.heatmaps[k]))
        iy, ix = divmod(flat, grid.grid_width)
        coords[k, 0] = (ix + grid.deviation) * grid.stride
        coords[k, 1] = (iy + grid.deviation) * grid.stride
        confidence[k] = maps.heatmaps[k, iy, ix]
    return DecodedPose(
        coords=coords,
        confidence=confidence,
        n_cells=np.ones(maps.k, dtype=np.int64),
        used_fallback=np.zeros(maps.k, dtype=bool),
    )
