"""Composite training loss, its analytic gradients, and comparison losses.

The composite loss combines a per-plane mean-squared heatmap term with a
smooth-L1 offset term that is only scored inside a threshold region around
each keypoint. Gradients are taken with respect to the predicted plane
values (there is no network here; optimization stops at the maps) and can
be verified against central finite differences with finite_diff_check.

Two alternative losses are provided for comparison experiments: a variant
that scores offsets only at the target heatmap's peak cell, and a
binary-classification variant that scores a disk of positive cells with
logistic heatmap predictions.

All functions are pure; gradient stacks are freshly allocated outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RegionSource, TargetMaps
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class LossConfig:
    """Weights and knobs of the composite loss."""

    omega_h: float = 0.5
    omega_o: float = 2.0
    beta: float = 1.0
    tau: float = 0.6
    region_source: RegionSource = RegionSource.GROUND_TRUTH

    def __post_init__(self):
        if self.omega_h < 0 or self.omega_o < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        object.__setattr__(self, "region_source", RegionSource(self.region_source))


@dataclass(frozen=True)
class RegionMask:
    """Per-keypoint boolean plane of offset-scored cells.

    n_omega is always the popcount of each keypoint's plane; it is derived,
    never supplied.
    """

    mask: np.ndarray
    n_omega: np.ndarray = field(init=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 3:
            raise ContractError(f"region mask must be (K, H', W'), got {mask.shape}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "n_omega", mask.sum(axis=(1, 2)).astype(np.int64))


@dataclass(frozen=True)
class GradientStack:
    """Partial derivatives of a loss with respect to every predicted value."""

    d_heatmaps: np.ndarray
    d_y_offsets: np.ndarray
    d_x_offsets: np.ndarray


@dataclass(frozen=True)
class LossReport:
    """Loss components plus per-keypoint region sizes.

    total is exactly omega_h * l_h + omega_o * (l_oy + l_ox).
    """

    l_h: float
    l_oy: float
    l_ox: float
    total: float
    n_omega: tuple[int, ...]
    gradients: GradientStack | None = None


def mse_plane(
    target: np.ndarray, predicted: np.ndarray, valid: np.ndarray | None = None
) -> float:
    """Mean squared difference between two planes or plane stacks.

    With a per-keypoint validity mask, only planes of valid keypoints enter
    the mean. Returns 0.0 when nothing is scored.
    """
    target = np.asarray(target, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if target.shape != predicted.shape:
        raise ContractError(
            f"plane shape mismatch: {target.shape} vs {predicted.shape}"
        )
    diff2 = (predicted - target) ** 2
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (target.shape[0],):
            raise ContractError(
                f"validity mask shape {valid.shape} does not match K={target.shape[0]}"
            )
        if not valid.any():
            return 0.0
        diff2 = diff2[valid]
    return float(diff2.mean())


def smooth_l1(residual, beta: float = 1.0):
    """Smooth L1: 0.5 r^2 / beta below the transition point, |r| - 0.5 beta above."""
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(residual, beta: float = 1.0):
    """Derivative of smooth_l1: r / beta inside the quadratic zone, else sign(r)."""
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    r = np.asarray(residual, dtype=np.float64)
    out = np.where(np.abs(r) < beta, r / beta, np.sign(r))
    return float(out) if out.ndim == 0 else out


def _check_compatible(target: TargetMaps, predicted: TargetMaps) -> None:
    if target.k != predicted.k:
        raise ContractError(f"K mismatch: target {target.k} vs predicted {predicted.k}")
    if target.heatmaps.shape != predicted.heatmaps.shape:
        raise ContractError(
            f"plane shape mismatch: {target.heatmaps.shape} vs "
            f"{predicted.heatmaps.shape}"
        )


def region_mask(
    target: TargetMaps,
    predicted: TargetMaps | None = None,
    *,
    tau: float = 0.6,
    region_source: RegionSource = RegionSource.GROUND_TRUTH,
) -> RegionMask:
    """Cells whose designated heatmap activation reaches tau, per keypoint.

    The designated heatmap is the target's (ground-truth source), the
    prediction's, or their elementwise max (union). Unlabeled keypoints get
    empty regions regardless of source. Empty regions are legal and simply
    recorded as n_omega = 0.
    """
    region_source = RegionSource(region_source)
    if region_source is RegionSource.GROUND_TRUTH:
        basis = target.heatmaps
    else:
        if predicted is None:
            raise ContractError(
                f"region source {region_source.value!r} needs predicted maps"
            )
        _check_compatible(target, predicted)
        if region_source is RegionSource.PREDICTED:
            basis = predicted.heatmaps
        else:
            basis = np.maximum(target.heatmaps, predicted.heatmaps)
    mask = (basis >= tau) & target.valid[:, None, None]
    return RegionMask(mask=mask)


def _region_for(
    target: TargetMaps, predicted: TargetMaps, config: LossConfig
) -> RegionMask:
    return region_mask(
        target, predicted, tau=config.tau, region_source=config.region_source
    )


def _composite_terms(
    target: TargetMaps,
    pred_h: np.ndarray,
    pred_y: np.ndarray,
    pred_x: np.ndarray,
    region: RegionMask,
    config: LossConfig,
    want_grad: bool,
):
    """Shared core for composite loss and gradient.

    The region mask is treated as a constant: no derivative flows through
    the thresholding that produced it.
    """
    valid = target.valid
    n_valid = int(valid.sum())
    cells = target.grid.cell_count

    res_h = pred_h - target.heatmaps
    l_h = float((res_h[valid] ** 2).mean()) if n_valid else 0.0

    mask = region.mask
    n_omega = region.n_omega
    scored = valid & (n_omega > 0)
    n_scored = int(scored.sum())
    denom = np.maximum(n_omega, 1).astype(np.float64)

    res_y = pred_y - target.y_offsets
    res_x = pred_x - target.x_offsets
    if n_scored:
        per_k_y = (smooth_l1(res_y, config.beta) * mask).sum(axis=(1, 2)) / denom
        per_k_x = (smooth_l1(res_x, config.beta) * mask).sum(axis=(1, 2)) / denom
        l_oy = float(per_k_y[scored].mean())
        l_ox = float(per_k_x[scored].mean())
    else:
        l_oy = l_ox = 0.0

    total = config.omega_h * l_h + config.omega_o * (l_oy + l_ox)
    grads = None
    if want_grad:
        d_h = np.zeros_like(res_h)
        if n_valid:
            d_h[valid] = (2.0 * config.omega_h / (n_valid * cells)) * res_h[valid]
        d_y = np.zeros_like(res_y)
        d_x = np.zeros_like(res_x)
        if n_scored:
            scale = (config.omega_o / n_scored) / denom
            d_y = np.where(
                mask, smooth_l1_grad(res_y, config.beta) * scale[:, None, None], 0.0
            )
            d_x = np.where(
                mask, smooth_l1_grad(res_x, config.beta) * scale[:, None, None], 0.0
            )
            not_scored = ~scored
            d_y[not_scored] = 0.0
            d_x[not_scored] = 0.0
        grads = GradientStack(d_heatmaps=d_h, d_y_offsets=d_y, d_x_offsets=d_x)
    return l_h, l_oy, l_ox, total, n_omega, grads


def composite_loss(
    target: TargetMaps,
    predicted: TargetMaps,
    config: LossConfig | None = None,
    *,
    region: RegionMask | None = None,
    with_gradients: bool = False,
) -> LossReport:
    """Composite loss: weighted heatmap MSE plus region-restricted smooth L1.

    The heatmap term averages plane MSE over labeled keypoints. The offset
    terms average smooth-L1 residuals over each keypoint's region, then over
    the keypoints whose region is nonempty; keypoints with an empty region
    contribute nothing. Pass a precomputed ``region`` to pin the scored
    cells (used by the finite-difference verifier and fit loops);
    ``with_gradients`` attaches the analytic gradient stack to the report.
    """
    config = config or LossConfig()
    _check_compatible(target, predicted)
    if region is None:
        region = _region_for(target, predicted, config)
    l_h, l_oy, l_ox, total, n_omega, grads = _composite_terms(
        target,
        predicted.heatmaps,
        predicted.y_offsets,
        predicted.x_offsets,
        region,
        config,
        want_grad=with_gradients,
    )
    return LossReport(
        l_h=l_h,
        l_oy=l_oy,
        l_ox=l_ox,
        total=total,
        n_omega=tuple(map(int, n_omega)),
        gradients=grads,
    )


def composite_loss_grad(
    target: TargetMaps,
    predicted: TargetMaps,
    config: LossConfig | None = None,
    *,
    region: RegionMask | None = None,
) -> GradientStack:
    """Analytic gradient of composite_loss w.r.t. every predicted plane value.

    Heatmap cells of labeled keypoints get 2 * omega_h * residual / (n_valid
    * cells); offset cells inside a scored region get omega_o * smooth-L1
    slope / (n_scored * n_omega); everything else is zero. The region mask
    is held constant during differentiation.
    """
    config = config or LossConfig()
    _check_compatible(target, predicted)
    if region is None:
        region = _region_for(target, predicted, config)
    *_rest, grads = _composite_terms(
        target,
        predicted.heatmaps,
        predicted.y_offsets,
        predicted.x_offsets,
        region,
        config,
        want_grad=True,
    )
    return grads


def finite_diff_check(
    target: TargetMaps,
    predicted: TargetMaps,
    config: LossConfig | None = None,
    step: float = 1e-5,
) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    Every predicted plane value is perturbed by +-step and the symmetric
    difference quotient compared against the analytic gradient, as
    |a - f| / max(1, |a|, |f|). Offset cells whose residual sits within
    10 * step of the smooth-L1 transition point are skipped (the slope is
    continuous there but its derivative is not, which poisons the
    quotient). The region mask is frozen before perturbing, matching the
    constant-mask convention of the gradient.
    """
    if step <= 0:
        raise ConfigError(f"step must be > 0, got {step}")
    config = config or LossConfig()
    _check_compatible(target, predicted)
    region = _region_for(target, predicted, config)
    grads = composite_loss_grad(target, predicted, config, region=region)

    def loss_of(h, y, x) -> float:
        return _composite_terms(target, h, y, x, region, config, want_grad=False)[3]

    pred_planes = {
        "h": predicted.heatmaps.copy(),
        "y": predicted.y_offsets.copy(),
        "x": predicted.x_offsets.copy(),
    }
    analytic = {
        "h": grads.d_heatmaps,
        "y": grads.d_y_offsets,
        "x": grads.d_x_offsets,
    }
    near_kink = {
        "h": np.zeros_like(region.mask),
        "y": np.abs(np.abs(predicted.y_offsets - target.y_offsets) - config.beta)
        <= 10 * step,
        "x": np.abs(np.abs(predicted.x_offsets - target.x_offsets) - config.beta)
        <= 10 * step,
    }

    worst = 0.0
    for name, plane in pred_planes.items():
        skip = near_kink[name]
        for idx in np.ndindex(plane.shape):
            if skip[idx]:
                continue
            original = plane[idx]
            plane[idx] = original + step
            hi = loss_of(pred_planes["h"], pred_planes["y"], pred_planes["x"])
            plane[idx] = original - step
            lo = loss_of(pred_planes["h"], pred_planes["y"], pred_planes["x"])
            plane[idx] = original
            fd = (hi - lo) / (2.0 * step)
            a = float(analytic[name][idx])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if err > worst:
                worst = err
    return worst


def peak_mse_loss(
    target: TargetMaps, predicted: TargetMaps, config: LossConfig | None = None
) -> LossReport:
    """Comparison loss: offsets scored with MSE at the target peak cell only.

    The heatmap term is identical to the composite loss; the offset terms
    are the squared offset residuals at the argmax cell of each keypoint's
    target heatmap (ties resolve to the smallest row-major index), averaged
    over labeled keypoints.
    """
    config = config or LossConfig()
    _check_compatible(target, predicted)
    valid = target.valid
    n_valid = int(valid.sum())
    l_h = mse_plane(target.heatmaps, predicted.heatmaps, valid)

    width = target.grid.grid_width
    sq_y = []
    sq_x = []
    n_omega = np.zeros(target.k, dtype=np.int64)
    for k in range(target.k):
        if not valid[k]:
            continue
        iy, ix = divmod(int(np.argmax(target.heatmaps[k])), width)
        n_omega[k] = 1
        sq_y.append((predicted.y_offsets[k, iy, ix] - target.y_offsets[k, iy, ix]) ** 2)
        sq_x.append((predicted.x_offsets[k, iy, ix] - target.x_offsets[k, iy, ix]) ** 2)
    l_oy = float(np.mean(sq_y)) if n_valid else 0.0
    l_ox = float(np.mean(sq_x)) if n_valid else 0.0
    total = config.omega_h * l_h + config.omega_o * (l_oy + l_ox)
    return LossReport(
        l_h=l_h, l_oy=l_oy, l_ox=l_ox, total=total, n_omega=tuple(map(int, n_omega))
    )


def _stable_bce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # max(z,0) - z*t + log(1 + exp(-|z|)) avoids overflow for large |z|
    return np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def grmi_loss(
    target: TargetMaps,
    predicted: TargetMaps,
    config: LossConfig | None = None,
    disk_radius: float | None = None,
) -> LossReport:
    """Comparison loss: disk classification heatmap plus per-positive offsets.

    Heatmap predictions are treated as logits and scored with binary
    cross-entropy against a disk indicator (a cell is positive when its
    center lies within disk_radius of the keypoint, recovered exactly from
    the target offsetmaps). Offsets are scored with smooth L1 at positive
    cells only. disk_radius defaults to one stride.
    """
    config = config or LossConfig()
    _check_compatible(target, predicted)
    grid = target.grid
    if disk_radius is None:
        disk_radius = float(grid.stride)
    if disk_radius <= 0:
        raise ConfigError(f"disk_radius must be > 0, got {disk_radius}")

    valid = target.valid
    n_valid = int(valid.sum())
    cx, cy = grid.cell_centers()
    width = grid.grid_width
    positives = np.zeros_like(target.heatmaps, dtype=bool)
    for k in range(target.k):
        if not valid[k]:
            continue
        iy, ix = divmod(int(np.argmax(target.heatmaps[k])), width)
        kp_x = cx[iy, ix] + target.x_offsets[k, iy, ix] * grid.stride
        kp_y = cy[iy, ix] + target.y_offsets[k, iy, ix] * grid.stride
        positives[k] = (cx - kp_x) ** 2 + (cy - kp_y) ** 2 <= disk_radius**2

    if n_valid:
        bce = _stable_bce(predicted.heatmaps, positives.astype(np.float64))
        l_h = float(bce[valid].mean())
    else:
        l_h = 0.0

    region = RegionMask(mask=positives)
    _, l_oy, l_ox, _, n_omega, _ = _composite_terms(
        target,
        predicted.heatmaps,
        predicted.y_offsets,
        predicted.x_offsets,
        region,
        config,
        want_grad=False,
    )
    total = config.omega_h * l_h + config.omega_o * (l_oy + l_ox)
    return LossReport(
        l_h=l_h, l_oy=l_oy, l_ox=l_ox, total=total, n_omega=tuple(map(int, n_omega))
    )
