"""Desk-scale experiment harness: synthetic poses, map perturbation,
direct-map gradient-descent fitting, and the stride sweep.

Everything here is a pure function of its inputs and seeds. Random streams
are derived per instance from (seed, instance index), so splitting work
across processes cannot change results.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .codec import argmax_decode, decode, encode
from .core import (
    CodecConfig,
    GridSpec,
    Keypoint,
    NormMeta,
    PoseInstance,
    RegionSource,
    TargetMaps,
    Visibility,
    derive_grid,
)
from .errors import ConfigError
from .loss import LossConfig, RegionMask, _composite_terms, region_mask


class NoiseKind(str, enum.Enum):
    GAUSSIAN_ADDITIVE = "gaussian-additive"
    ACTIVATION_SCALING = "activation-scaling"
    OFFSET_JITTER = "offset-jitter"


@dataclass(frozen=True)
class NoiseModel:
    """A reproducible map perturbation: (kind, magnitude, seed) fix the output."""

    kind: NoiseKind = NoiseKind.GAUSSIAN_ADDITIVE
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ConfigError(f"noise magnitude must be >= 0, got {self.magnitude}")
        object.__setattr__(self, "kind", NoiseKind(self.kind))


class FitInit(str, enum.Enum):
    ZEROS = "zeros"
    NOISE = "noise"


@dataclass(frozen=True)
class FitConfig:
    """Fixed-step gradient descent settings for direct map fitting."""

    step_size: float = 0.1
    max_iters: int = 5000
    stop_loss: float = 1e-6
    init: FitInit = FitInit.ZEROS
    init_scale: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        object.__setattr__(self, "init", FitInit(self.init))


@dataclass(frozen=True)
class FitResult:
    """Outcome of a direct map fit.

    trace[i] is the total loss at iterate i (trace[0] is the initial loss);
    iterations counts the gradient steps actually taken. converged means the
    stop loss was reached; diverged means the loss rose for 10 consecutive
    iterations and the fit was abandoned.
    """

    maps: TargetMaps
    trace: tuple[float, ...]
    iterations: int
    converged: bool
    diverged: bool


@dataclass(frozen=True)
class SweepRow:
    """One stride's worth of sweep results."""

    stride: int
    composite_mean_error: float
    argmax_mean_error: float
    n_omega_mean: float
    plane_count: int


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, index))


def gen_dataset(
    seed: int, n_instances: int, k: int, grid: GridSpec
) -> list[PoseInstance]:
    """Deterministic synthetic poses, uniform over the covered grid area.

    Instances carry synthetic normalization metadata: an area between one
    quarter and the whole covered area, a square head box centered on the
    first keypoint, and (for K >= 2) torso endpoints (0, K-1). The same
    (seed, n, K, grid) always produces the identical dataset.
    """
    if n_instances < 1:
        raise ConfigError(f"n_instances must be >= 1, got {n_instances}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    cover_w = grid.grid_width * grid.stride
    cover_h = grid.grid_height * grid.stride
    head_side = 0.25 * min(cover_w, cover_h)
    instances = []
    for i in range(n_instances):
        rng = _instance_rng(seed, i)
        xs = rng.uniform(0.0, cover_w, size=k)
        ys = rng.uniform(0.0, cover_h, size=k)
        area = float(rng.uniform(0.25, 1.0) * cover_w * cover_h)
        keypoints = tuple(
            Keypoint(x=float(x), y=float(y), visibility=Visibility.VISIBLE)
            for x, y in zip(xs, ys)
        )
        head_box = (
            float(xs[0] - head_side / 2),
            float(ys[0] - head_side / 2),
            float(xs[0] + head_side / 2),
            float(ys[0] + head_side / 2),
        )
        meta = NormMeta(
            head_box=head_box,
            torso_endpoints=(0, k - 1) if k >= 2 else None,
            area=area,
        )
        instances.append(PoseInstance(keypoints=keypoints, norm_meta=meta))
    return instances


def perturb(maps: TargetMaps, noise: NoiseModel, *, salt: int = 0) -> TargetMaps:
    """Apply a noise model to a map stack, returning a new stack.

    gaussian-additive adds N(0, magnitude^2) to heatmap planes and clamps
    them at zero; offset-jitter adds the same noise to both offset stacks;
    activation-scaling multiplies heatmaps by (1 + magnitude * u) with u
    uniform on [-1, 1]. Planes not named by the kind pass through
    bit-exactly. ``salt`` splits the stream per instance inside sweeps.
    """
    if noise.magnitude == 0.0:
        return maps
    rng = np.random.default_rng((noise.seed, salt))
    shape = maps.heatmaps.shape
    if noise.kind is NoiseKind.GAUSSIAN_ADDITIVE:
        bumped = maps.heatmaps + rng.normal(0.0, noise.magnitude, size=shape)
        return maps.replace_planes(heatmaps=np.maximum(bumped, 0.0))
    if noise.kind is NoiseKind.ACTIVATION_SCALING:
        u = rng.uniform(-1.0, 1.0, size=shape)
        return maps.replace_planes(heatmaps=maps.heatmaps * (1.0 + noise.magnitude * u))
    jitter_y = rng.normal(0.0, noise.magnitude, size=shape)
    jitter_x = rng.normal(0.0, noise.magnitude, size=shape)
    return maps.replace_planes(
        y_offsets=maps.y_offsets + jitter_y,
        x_offsets=maps.x_offsets + jitter_x,
    )


def fit_maps(
    target: TargetMaps,
    loss_config: LossConfig | None = None,
    fit_config: FitConfig | None = None,
) -> FitResult:
    """Fit free map planes to a target by fixed-step gradient descent.

    The predicted planes are the optimization variables; each step applies
    step_size times the analytic composite-loss gradient. Stops when the
    loss drops below stop_loss, after max_iters steps, or after the loss has
    risen for 10 consecutive iterations (reported as diverged, never an
    exception). With the ground-truth region source the scored region is
    constant, so it is computed once up front.
    """
    loss_config = loss_config or LossConfig()
    fit_config = fit_config or FitConfig()

    if fit_config.init is FitInit.ZEROS:
        h = np.zeros_like(target.heatmaps)
        y = np.zeros_like(target.y_offsets)
        x = np.zeros_like(target.x_offsets)
    else:
        rng = np.random.default_rng(fit_config.init_seed)
        h = rng.normal(0.0, fit_config.init_scale, size=target.heatmaps.shape)
        y = rng.normal(0.0, fit_config.init_scale, size=target.y_offsets.shape)
        x = rng.normal(0.0, fit_config.init_scale, size=target.x_offsets.shape)

    fixed_region: RegionMask | None = None
    if loss_config.region_source is RegionSource.GROUND_TRUTH:
        fixed_region = region_mask(
            target, tau=loss_config.tau, region_source=loss_config.region_source
        )

    trace: list[float] = []
    rising = 0
    converged = diverged = False
    iterations = 0
    for it in range(fit_config.max_iters + 1):
        if fixed_region is not None:
            region = fixed_region
        else:
            current = target.replace_planes(heatmaps=h, y_offsets=y, x_offsets=x)
            region = region_mask(
                target, current, tau=loss_config.tau,
                region_source=loss_config.region_source,
            )
        want_grad = it < fit_config.max_iters
        _, _, _, total, _, grads = _composite_terms(
            target, h, y, x, region, loss_config, want_grad=want_grad
        )
        trace.append(total)
        if total < fit_config.stop_loss:
            converged = True
            break
        if len(trace) >= 2 and trace[-1] > trace[-2]:
            rising += 1
            if rising >= 10:
                diverged = True
                break
        else:
            rising = 0
        if not want_grad:
            break
        h = h - fit_config.step_size * grads.d_heatmaps
        y = y - fit_config.step_size * grads.d_y_offsets
        x = x - fit_config.step_size * grads.d_x_offsets
        iterations += 1

    fitted = target.replace_planes(heatmaps=h, y_offsets=y, x_offsets=x)
    return FitResult(
        maps=fitted,
        trace=tuple(trace),
        iterations=iterations,
        converged=converged,
        diverged=diverged,
    )


def stride_sweep(
    dataset: list[PoseInstance],
    width: int,
    height: int,
    strides: list[int],
    noise: NoiseModel | None = None,
    config: CodecConfig | None = None,
) -> list[SweepRow]:
    """Encode/decode the dataset at each stride and compare both decoders.

    For each stride the dataset is encoded, optionally perturbed, and
    decoded with both the composite decoder and the argmax baseline; mean
    Euclidean errors over labeled keypoints are reported together with the
    mean threshold-region size and the stack plane count.
    """
    noise = noise or NoiseModel()
    config = config or CodecConfig()
    rows = []
    for stride in strides:
        grid = derive_grid(width, height, stride)
        composite_errs: list[np.ndarray] = []
        argmax_errs: list[np.ndarray] = []
        n_omegas: list[np.ndarray] = []
        plane_count = 0
        for idx, pose in enumerate(dataset):
            maps = encode(pose, grid, config)
            plane_count = maps.plane_count
            noisy = perturb(maps, noise, salt=idx)
            gt_region = region_mask(maps, tau=config.tau)
            n_omegas.append(gt_region.n_omega)
            labeled = pose.labeled_mask()
            gt_coords = pose.coords_array()
            for decoded, bucket in (
                (decode(noisy, config), composite_errs),
                (argmax_decode(noisy), argmax_errs),
            ):
                err = np.linalg.norm(decoded.coords - gt_coords, axis=1)
                bucket.append(err[labeled])
        rows.append(
            SweepRow(
                stride=stride,
                composite_mean_error=float(np.concatenate(composite_errs).mean()),
                argmax_mean_error=float(np.concatenate(argmax_errs).mean()),
                n_omega_mean=float(np.concatenate(n_omegas).mean()),
                plane_count=plane_count,
            )
        )
    return rows
