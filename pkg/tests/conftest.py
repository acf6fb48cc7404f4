import numpy as np
import pytest

from clpose import CodecConfig, GridSpec, Keypoint, PoseInstance, derive_grid, encode


@pytest.fixture
def grid16() -> GridSpec:
    """The default 256x256 image at stride 16 (a 16x16 grid)."""
    return derive_grid(256, 256, 16)


@pytest.fixture
def default_config() -> CodecConfig:
    return CodecConfig()


def make_pose(*coords, meta=None) -> PoseInstance:
    kwargs = {"norm_meta": meta} if meta is not None else {}
    return PoseInstance(
        keypoints=tuple(Keypoint(float(x), float(y)) for x, y in coords), **kwargs
    )


def random_pair(grid, k: int, seed: int, config: CodecConfig | None = None):
    """A (target, noisy prediction) map pair for gradient tests."""
    config = config or CodecConfig()
    rng = np.random.default_rng(seed)
    cover_w = grid.grid_width * grid.stride
    cover_h = grid.grid_height * grid.stride
    pose = make_pose(
        *zip(rng.uniform(0, cover_w, k), rng.uniform(0, cover_h, k))
    )
    target = encode(pose, grid, config)
    predicted = target.replace_planes(
        heatmaps=target.heatmaps + rng.normal(0, 0.3, target.heatmaps.shape),
        y_offsets=target.y_offsets + rng.normal(0, 0.7, target.y_offsets.shape),
        x_offsets=target.x_offsets + rng.normal(0, 0.7, target.x_offsets.shape),
    )
    return target, predicted
