"""Grid geometry, configuration, and the shared value types.

Coordinate conventions used throughout the package:

* Image coordinates are continuous pixels, x to the right, y down.
* Grid cells are indexed 0-based as (x, y) with 0 <= x < grid_width and
  0 <= y < grid_height. Each cell covers an S x S pixel patch whose
  center is at ((x + 0.5) * S, (y + 0.5) * S).
* When S does not divide the image size, the right/bottom remainder strip
  belongs to no cell. Keypoints inside the strip are still encodable: the
  nearest cells receive nonzero heatmap values and exact offsets.

All types here are immutable values; they can be shared freely between
concurrent workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

DEVIATION_CONSTANT = 0.5


class Visibility(enum.IntEnum):
    """Keypoint annotation state, numerically aligned with COCO's v flag."""

    UNLABELED = 0
    OCCLUDED = 1
    VISIBLE = 2

    @property
    def labeled(self) -> bool:
        return self is not Visibility.UNLABELED


class NormMode(str, enum.Enum):
    """How the heatmap kernel measures distance.

    SQUARED_DISTANCE uses exp(-d^2 / (2 sigma^2)), the conventional Gaussian.
    LITERAL_L2 uses exp(-d / (2 sigma^2)), an exponential falloff in plain
    distance. Both are supported; squared distance is the default because at
    the default sigma/tau it yields a compact threshold region, while the
    literal form covers nearly the whole grid.
    """

    SQUARED_DISTANCE = "squared-distance"
    LITERAL_L2 = "literal-l2"


class RegionSource(str, enum.Enum):
    """Which heatmap stack defines the offset-scoring region."""

    GROUND_TRUTH = "ground-truth"
    PREDICTED = "predicted"
    UNION = "union"


@dataclass(frozen=True)
class GridSpec:
    """Image-to-grid geometry: W x H pixels downsampled by stride S.

    Grid dimensions are always recomputed from (width, height, stride),
    never stored, so they cannot drift out of sync.
    """

    width: int
    height: int
    stride: int
    deviation: float = DEVIATION_CONSTANT

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.width < self.stride or self.height < self.stride:
            raise ConfigError(
                f"stride {self.stride} exceeds image size "
                f"{self.width}x{self.height}"
            )

    @property
    def grid_width(self) -> int:
        return self.width // self.stride

    @property
    def grid_height(self) -> int:
        return self.height // self.stride

    @property
    def cell_count(self) -> int:
        return self.grid_width * self.grid_height

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates of every patch center.

        Returns (cx, cy), each of shape (grid_height, grid_width), row-major
        with y as the outer axis.
        """
        xs = (np.arange(self.grid_width, dtype=np.float64) + self.deviation) * self.stride
        ys = (np.arange(self.grid_height, dtype=np.float64) + self.deviation) * self.stride
        cx, cy = np.meshgrid(xs, ys)
        return cx, cy


def derive_grid(width: int, height: int, stride: int) -> GridSpec:
    """Build a GridSpec with floor-divided grid dimensions.

    Raises ConfigError when stride is 0 or exceeds min(width, height).
    """
    return GridSpec(width=width, height=height, stride=stride)


def patch_center(grid: GridSpec, cell_x: int, cell_y: int) -> tuple[float, float]:
    """Center pixel coordinates of grid cell (cell_x, cell_y).

    The cell index must lie inside the grid; out-of-grid indices are a
    contract violation.
    """
    if not (0 <= cell_x < grid.grid_width and 0 <= cell_y < grid.grid_height):
        raise ContractError(
            f"cell ({cell_x}, {cell_y}) outside grid "
            f"{grid.grid_width}x{grid.grid_height}"
        )
    return (
        (cell_x + grid.deviation) * grid.stride,
        (cell_y + grid.deviation) * grid.stride,
    )


@dataclass(frozen=True)
class Keypoint:
    """A single annotated keypoint in continuous image coordinates."""

    x: float
    y: float
    visibility: Visibility = Visibility.VISIBLE

    def __post_init__(self):
        object.__setattr__(self, "visibility", Visibility(self.visibility))

    @property
    def labeled(self) -> bool:
        return self.visibility.labeled


@dataclass(frozen=True)
class NormMeta:
    """Normalization metadata attached to a pose instance.

    head_box is (x1, y1, x2, y2); torso_endpoints are two keypoint indices;
    area is in square pixels. All fields are optional and only required by
    the evaluation protocol that consumes them.
    """

    head_box: tuple[float, float, float, float] | None = None
    torso_endpoints: tuple[int, int] | None = None
    area: float | None = None


@dataclass(frozen=True)
class PoseInstance:
    """An ordered list of K keypoints plus optional normalization metadata."""

    keypoints: tuple[Keypoint, ...]
    norm_meta: NormMeta = field(default_factory=NormMeta)

    def __post_init__(self):
        if len(self.keypoints) < 1:
            raise ContractError("a pose instance needs at least one keypoint")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    @property
    def k(self) -> int:
        return len(self.keypoints)

    def coords_array(self) -> np.ndarray:
        """Keypoint coordinates as a (K, 2) float array of (x, y)."""
        return np.array([(kp.x, kp.y) for kp in self.keypoints], dtype=np.float64)

    def labeled_mask(self) -> np.ndarray:
        """(K,) boolean array, True where the keypoint is labeled."""
        return np.array([kp.labeled for kp in self.keypoints], dtype=bool)


@dataclass(frozen=True)
class CodecConfig:
    """Encoder/decoder parameters shared across the pipeline."""

    sigma: float = 16.0
    tau: float = 0.6
    norm_mode: NormMode = NormMode.SQUARED_DISTANCE
    region_source: RegionSource = RegionSource.GROUND_TRUTH

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        object.__setattr__(self, "norm_mode", NormMode(self.norm_mode))
        object.__setattr__(self, "region_source", RegionSource(self.region_source))


@dataclass(frozen=True)
class TargetMaps:
    """A stack of K heatmaps plus K y-offset and K x-offset planes.

    Planes share one (grid_height, grid_width) shape. Offsets are stored in
    stride units. ``valid`` marks which keypoints were labeled when the maps
    were encoded; planes of unlabeled keypoints are all-zero. Plane arrays
    are read-only so a stack can be shared without defensive copies.
    """

    grid: GridSpec
    heatmaps: np.ndarray
    y_offsets: np.ndarray
    x_offsets: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        shape = (self.grid.grid_height, self.grid.grid_width)
        for name in ("heatmaps", "y_offsets", "x_offsets"):
            plane = np.asarray(getattr(self, name), dtype=np.float64)
            if plane.ndim != 3 or plane.shape[1:] != shape:
                raise ContractError(
                    f"{name} must have shape (K, {shape[0]}, {shape[1]}), "
                    f"got {plane.shape}"
                )
            # freeze a view, leaving any caller-owned array writable
            view = plane.view()
            view.flags.writeable = False
            object.__setattr__(self, name, view)
        k = self.heatmaps.shape[0]
        if self.y_offsets.shape[0] != k or self.x_offsets.shape[0] != k:
            raise ContractError("heatmap and offset stacks disagree on K")
        valid = np.asarray(self.valid, dtype=bool).copy()
        if valid.shape != (k,):
            raise ContractError(f"valid must have shape ({k},), got {valid.shape}")
        valid.flags.writeable = False
        object.__setattr__(self, "valid", valid)

    @property
    def k(self) -> int:
        return self.heatmaps.shape[0]

    @property
    def plane_count(self) -> int:
        """Total number of planes in the stack (3 per keypoint)."""
        return 3 * self.k

    def replace_planes(
        self,
        heatmaps: np.ndarray | None = None,
        y_offsets: np.ndarray | None = None,
        x_offsets: np.ndarray | None = None,
    ) -> "TargetMaps":
        """New stack with some planes swapped out; the rest are shared."""
        return TargetMaps(
            grid=self.grid,
            heatmaps=self.heatmaps if heatmaps is None else heatmaps,
            y_offsets=self.y_offsets if y_offsets is None else y_offsets,
            x_offsets=self.x_offsets if x_offsets is None else x_offsets,
            valid=self.valid,
        )


@dataclass(frozen=True)
class DecodedPose:
    """Decoder output: coordinates, confidences, and decode diagnostics.

    coords is (K, 2) as (x, y) pixels. confidence is the mean activation of
    the cells that contributed to each keypoint. n_cells counts the cells at
    or above the activation threshold; used_fallback is True exactly when no
    cell reached it and the global argmax cell was used instead.
    """

    coords: np.ndarray
    confidence: np.ndarray
    n_cells: np.ndarray
    used_fallback: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ContractError(f"coords must be (K, 2), got {coords.shape}")
        k = coords.shape[0]
        fields = {
            "coords": coords,
            "confidence": np.asarray(self.confidence, dtype=np.float64).reshape(k),
            "n_cells": np.asarray(self.n_cells, dtype=np.int64).reshape(k),
            "used_fallback": np.asarray(self.used_fallback, dtype=bool).reshape(k),
        }
        for name, arr in fields.items():
            view = arr.view()
            view.flags.writeable = False
            object.__setattr__(self, name, view)

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    @property
    def score(self) -> float:
        """Instance-level detection score: mean per-keypoint confidence."""
        return float(np.mean(self.confidence))
