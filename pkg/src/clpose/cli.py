"""Command-line interface.

Subcommands:

    encode        annotations -> one CLM1 map file per instance + manifest
    decode        map file -> keypoints JSON (simple-poses schema)
    roundtrip     encode + decode + error report
    loss          target/predicted map files -> loss report JSON
    gradcheck     analytic vs finite-difference gradients; nonzero exit on failure
    eval-pck      predictions + annotations -> PCK report
    eval-oks      predictions + annotations -> OKS AP/AR report
    synth         seeded synthetic dataset -> simple-poses JSON
    fit           annotations -> direct-map fit report (+ loss-trace figure)
    sweep-stride  annotations -> per-stride error CSV (+ comparison figure)

Reports go to stdout unless --out is given; file outputs are written
atomically and contain no timestamps, so identical inputs produce identical
bytes. sweep-stride and fit render a matplotlib figure next to their --out
file (same name, .png suffix) unless --no-plot is passed.

Exit codes: 0 success, 1 operational error (message on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codec import decode, encode
from .core import (
    CodecConfig,
    DecodedPose,
    Keypoint,
    NormMode,
    PoseInstance,
    RegionSource,
    derive_grid,
)
from .datasets import (
    AnnotationSet,
    ImageRecord,
    annotation_set_to_dict,
    ingest_coco,
    ingest_simple,
    load_profile,
    synthetic_profile,
    write_simple,
)
from .errors import ClposeError, DataError
from .loss import LossConfig, composite_loss, finite_diff_check, grmi_loss, peak_mse_loss
from .mapfile import read_maps_with_header, write_maps
from .metrics import (
    Detection,
    NormalizerKind,
    NormalizerSpec,
    OksConstants,
    oks_ap,
    pck,
    resolve_normalizer,
)
from .synthfit import (
    FitConfig,
    NoiseKind,
    NoiseModel,
    fit_maps,
    gen_dataset,
    stride_sweep,
)


def _json_ready(value):
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_json_ready(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _emit_json(out: str | None, payload: dict) -> None:
    text = json.dumps(_json_ready(payload), indent=2) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        _write_text_atomic(Path(out), text)


def _emit_csv(out: str | None, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_csv(v) for v in row))
    text = "\n".join(lines) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        _write_text_atomic(Path(out), text)


def _format_csv(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _codec_config(args) -> CodecConfig:
    return CodecConfig(
        sigma=args.sigma,
        tau=args.tau,
        norm_mode=NormMode(args.norm_mode),
        region_source=RegionSource(args.region_source),
    )


def _loss_config(args) -> LossConfig:
    return LossConfig(
        omega_h=args.omega_h,
        omega_o=args.omega_o,
        beta=args.beta,
        tau=args.tau,
        region_source=RegionSource(args.region_source),
    )


def _load_annotations(path: str, args) -> AnnotationSet:
    profile = load_profile(args.profile) if args.profile else None
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    fmt = args.format
    if fmt == "auto":
        fmt = "coco" if isinstance(raw, dict) and "annotations" in raw else "simple"
    if fmt == "coco":
        return ingest_coco(raw, profile)
    return ingest_simple(raw, profile)


def _iter_instances(annotations: AnnotationSet):
    for img_idx, image in enumerate(annotations.images):
        for inst_idx, pose in enumerate(image.instances):
            yield img_idx, image, inst_idx, pose


def _figure_path(out: str | None) -> Path | None:
    if out is None or out == "-":
        return None
    path = Path(out)
    figure = path.with_suffix(".png")
    if figure == path:  # report itself ends in .png
        figure = path.with_name(path.name + ".fig.png")
    return figure


# ---------------------------------------------------------------- commands


def _cmd_encode(args) -> int:
    annotations = _load_annotations(args.annotations, args)
    if args.out is None:
        raise DataError("encode requires --out DIRECTORY")
    config = _codec_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Build every payload before touching the filesystem so a failure in any
    # instance leaves no partial output behind.
    entries = []
    payloads = []
    for img_idx, image, inst_idx, pose in _iter_instances(annotations):
        grid = derive_grid(image.width, image.height, args.stride)
        maps = encode(pose, grid, config)
        name = f"maps_{img_idx:05d}_{inst_idx:03d}.clm"
        payloads.append((name, maps))
        entries.append(
            {
                "file": name,
                "image_index": img_idx,
                "image_id": image.image_id,
                "instance_index": inst_idx,
                "width": image.width,
                "height": image.height,
            }
        )
    for name, maps in payloads:
        write_maps(maps, out_dir / name, config.norm_mode)
    manifest = {
        "config": {
            "stride": args.stride,
            "sigma": args.sigma,
            "norm_mode": config.norm_mode.value,
        },
        "files": entries,
    }
    _write_text_atomic(
        out_dir / "manifest.json", json.dumps(_json_ready(manifest), indent=2) + "\n"
    )
    return 0


def _decoded_to_dict(decoded: DecodedPose) -> dict:
    return {
        "keypoints": [
            {"x": float(x), "y": float(y), "v": 2} for x, y in decoded.coords
        ],
        "score": decoded.score,
        "confidences": [float(c) for c in decoded.confidence],
        "n_cells": [int(n) for n in decoded.n_cells],
        "used_fallback": [bool(b) for b in decoded.used_fallback],
    }


def _cmd_decode(args) -> int:
    maps, header = read_maps_with_header(args.mapfile)
    config = _codec_config(args)
    decoded = decode(maps, config)
    payload = {
        "images": [
            {
                "width": maps.grid.width,
                "height": maps.grid.height,
                "instances": [_decoded_to_dict(decoded)],
            }
        ],
        "stride": header.stride,
        "tau": args.tau,
    }
    _emit_json(args.out, payload)
    return 0


def _cmd_roundtrip(args) -> int:
    annotations = _load_annotations(args.annotations, args)
    config = _codec_config(args)
    errors = []
    n_instances = 0
    for _, image, _, pose in _iter_instances(annotations):
        grid = derive_grid(image.width, image.height, args.stride)
        decoded = decode(encode(pose, grid, config), config)
        err = np.linalg.norm(decoded.coords - pose.coords_array(), axis=1)
        errors.append(err[pose.labeled_mask()])
        n_instances += 1
    if not errors:
        raise DataError("no instances to round-trip")
    all_err = np.concatenate(errors)
    payload = {
        "stride": args.stride,
        "sigma": args.sigma,
        "tau": args.tau,
        "norm_mode": args.norm_mode,
        "instances": n_instances,
        "keypoints": int(all_err.size),
        "mean_error_px": float(all_err.mean()) if all_err.size else 0.0,
        "max_error_px": float(all_err.max()) if all_err.size else 0.0,
    }
    _emit_json(args.out, payload)
    return 0


def _cmd_loss(args) -> int:
    target, t_header = read_maps_with_header(args.target)
    predicted, _ = read_maps_with_header(args.predicted)
    config = _loss_config(args)
    if args.loss == "composite":
        report = composite_loss(target, predicted, config)
    elif args.loss == "peak-mse":
        report = peak_mse_loss(target, predicted, config)
    else:
        radius = args.disk_radius if args.disk_radius is not None else t_header.stride
        report = grmi_loss(target, predicted, config, disk_radius=radius)
    payload = {
        "loss": args.loss,
        "l_h": report.l_h,
        "l_oy": report.l_oy,
        "l_ox": report.l_ox,
        "total": report.total,
        "n_omega": list(report.n_omega),
        "omega_h": config.omega_h,
        "omega_o": config.omega_o,
        "beta": config.beta,
        "tau": config.tau,
        "region_source": config.region_source.value,
    }
    if args.loss == "grmi":
        payload["disk_radius"] = (
            args.disk_radius if args.disk_radius is not None else t_header.stride
        )
    _emit_json(args.out, payload)
    return 0


def _random_pair(rng: np.random.Generator, args):
    grid = derive_grid(args.width, args.height, args.stride)
    coords = np.column_stack(
        [
            rng.uniform(0, grid.grid_width * grid.stride, size=args.k),
            rng.uniform(0, grid.grid_height * grid.stride, size=args.k),
        ]
    )
    pose = PoseInstance(
        keypoints=tuple(Keypoint(float(x), float(y)) for x, y in coords)
    )
    target = encode(pose, grid, _codec_config(args))
    predicted = target.replace_planes(
        heatmaps=target.heatmaps + rng.normal(0, 0.3, target.heatmaps.shape),
        y_offsets=target.y_offsets + rng.normal(0, 0.7, target.y_offsets.shape),
        x_offsets=target.x_offsets + rng.normal(0, 0.7, target.x_offsets.shape),
    )
    return target, predicted


def _cmd_gradcheck(args) -> int:
    config = _loss_config(args)
    worst = 0.0
    if args.target and args.predicted:
        target, _ = read_maps_with_header(args.target)
        predicted, _ = read_maps_with_header(args.predicted)
        worst = finite_diff_check(target, predicted, config, step=args.step)
        mode = "files"
        trials = 1
    elif args.target or args.predicted:
        raise DataError("gradcheck needs both --target and --predicted, or neither")
    else:
        rng = np.random.default_rng(args.seed)
        trials = args.trials
        for _ in range(trials):
            target, predicted = _random_pair(rng, args)
            worst = max(worst, finite_diff_check(target, predicted, config, step=args.step))
        mode = "random"
    passed = worst < args.tolerance
    payload = {
        "mode": mode,
        "trials": trials,
        "seed": args.seed,
        "step": args.step,
        "tolerance": args.tolerance,
        "max_relative_error": worst,
        "passed": passed,
    }
    _emit_json(args.out, payload)
    if not passed:
        print(
            f"gradcheck failed: {worst:.3e} >= tolerance {args.tolerance:.3e}",
            file=sys.stderr,
        )
        return 1
    return 0


def _paired_instances(annotations: AnnotationSet, predictions: AnnotationSet):
    if len(predictions.images) != len(annotations.images):
        raise DataError(
            f"predictions have {len(predictions.images)} images, "
            f"annotations have {len(annotations.images)}"
        )
    for gt_img, pred_img in zip(annotations.images, predictions.images):
        if (
            gt_img.image_id is not None
            and pred_img.image_id is not None
            and gt_img.image_id != pred_img.image_id
        ):
            raise DataError(
                f"image id mismatch: {gt_img.image_id} vs {pred_img.image_id}"
            )
        yield gt_img, pred_img


def _cmd_eval_pck(args) -> int:
    annotations = _load_annotations(args.annotations, args)
    predictions = _load_annotations(args.predictions, args)
    profile = annotations.profile
    if args.profile:
        profile = load_profile(args.profile)
    kind = NormalizerKind(args.norm)
    spec = NormalizerSpec(
        kind=kind,
        value=args.norm_value,
        torso_endpoints=profile.torso_endpoints if profile else None,
    )
    preds, gts, norms = [], [], []
    for gt_img, pred_img in _paired_instances(annotations, predictions):
        if len(gt_img.instances) != len(pred_img.instances):
            raise DataError(
                "eval-pck needs one prediction per ground-truth instance "
                f"(got {len(pred_img.instances)} vs {len(gt_img.instances)})"
            )
        for gt, pred in zip(gt_img.instances, pred_img.instances):
            gts.append(gt)
            preds.append(pred.coords_array())
            norms.append(resolve_normalizer(gt, spec))
    result = pck(preds, gts, norms, args.alpha)
    payload = {
        "alpha": args.alpha,
        "normalizer": kind.value,
        "instances": len(gts),
        "labeled_keypoints": result.n_labeled,
        "overall": result.overall,
        "per_keypoint": [None if np.isnan(v) else v for v in result.per_keypoint],
    }
    if profile is not None:
        payload["keypoint_names"] = list(profile.keypoint_names)
    _emit_json(args.out, payload)
    return 0


def _cmd_eval_oks(args) -> int:
    annotations = _load_annotations(args.annotations, args)
    predictions = _load_annotations(args.predictions, args)
    profile = annotations.profile or predictions.profile
    if args.profile:
        profile = load_profile(args.profile)
    if profile is None or profile.oks_kappas is None:
        raise DataError("eval-oks needs a profile with oks_kappas")
    constants = OksConstants(profile.oks_kappas)
    detections: list[list[Detection]] = []
    gts: list[list[PoseInstance]] = []
    for gt_img, pred_img in _paired_instances(annotations, predictions):
        gts.append(list(gt_img.instances))
        dets = []
        for pose, score in zip(pred_img.instances, pred_img.scores):
            decoded = DecodedPose(
                coords=pose.coords_array(),
                confidence=np.ones(pose.k),
                n_cells=np.ones(pose.k, dtype=np.int64),
                used_fallback=np.zeros(pose.k, dtype=bool),
            )
            dets.append(Detection(pose=decoded, score=1.0 if score is None else score))
        detections.append(dets)
    thresholds = (
        tuple(float(t) for t in args.thresholds.split(","))
        if args.thresholds
        else None
    )
    result = (
        oks_ap(detections, gts, constants, thresholds)
        if thresholds
        else oks_ap(detections, gts, constants)
    )
    payload = {
        "ap": result.ap,
        "ap50": result.ap50,
        "ap75": result.ap75,
        "ar": result.ar,
        "thresholds": list(result.thresholds),
        "per_threshold_ap": list(result.per_threshold_ap),
        "per_threshold_recall": list(result.per_threshold_recall),
    }
    _emit_json(args.out, payload)
    return 0


def _cmd_synth(args) -> int:
    grid = derive_grid(args.width, args.height, args.stride)
    dataset = gen_dataset(args.seed, args.count, args.k, grid)
    profile = synthetic_profile(args.k)
    images = tuple(
        ImageRecord(width=args.width, height=args.height, instances=(pose,))
        for pose in dataset
    )
    annotations = AnnotationSet(
        images=images, profile=profile, profile_ref=profile.to_dict()
    )
    if args.out is None or args.out == "-":
        _emit_json(None, annotation_set_to_dict(annotations))
    else:
        write_simple(annotations, args.out)
    return 0


def _cmd_fit(args) -> int:
    annotations = _load_annotations(args.annotations, args)
    codec_config = _codec_config(args)
    loss_config = _loss_config(args)
    fit_config = FitConfig(
        step_size=args.step_size,
        max_iters=args.max_iters,
        stop_loss=args.stop_loss,
        init=args.init,
        init_seed=args.seed,
    )
    rows = []
    traces = []
    decode_errors = []
    n_converged = 0
    for img_idx, image, inst_idx, pose in _iter_instances(annotations):
        grid = derive_grid(image.width, image.height, args.stride)
        target = encode(pose, grid, codec_config)
        result = fit_maps(target, loss_config, fit_config)
        decoded = decode(result.maps, codec_config)
        err = np.linalg.norm(decoded.coords - pose.coords_array(), axis=1)
        labeled = pose.labeled_mask()
        decode_err = float(err[labeled].max()) if labeled.any() else 0.0
        decode_errors.append(decode_err)
        n_converged += result.converged
        traces.append(result.trace)
        rows.append(
            {
                "image_index": img_idx,
                "instance_index": inst_idx,
                "converged": result.converged,
                "diverged": result.diverged,
                "iterations": result.iterations,
                "final_loss": result.trace[-1],
                "decode_error_px": decode_err,
            }
        )
    if not rows:
        raise DataError("no instances to fit")
    payload = {
        "step_size": args.step_size,
        "max_iters": args.max_iters,
        "stop_loss": args.stop_loss,
        "init": args.init,
        "instances": rows,
        "summary": {
            "converged_fraction": n_converged / len(rows),
            "max_decode_error_px": max(decode_errors),
        },
    }
    _emit_json(args.out, payload)
    fig_path = _figure_path(args.out)
    if fig_path is not None and not args.no_plot:
        from .plots import plot_loss_traces

        plot_loss_traces(traces, fig_path)
    return 0


def _cmd_sweep_stride(args) -> int:
    annotations = _load_annotations(args.annotations, args)
    strides = [int(s) for s in args.strides.split(",")]
    poses = [pose for _, _, _, pose in _iter_instances(annotations)]
    if not poses:
        raise DataError("no instances to sweep")
    widths = {img.width for img in annotations.images}
    heights = {img.height for img in annotations.images}
    if len(widths) != 1 or len(heights) != 1:
        raise DataError("sweep-stride needs uniform image dimensions")
    noise = NoiseModel(
        kind=NoiseKind(args.noise), magnitude=args.noise_magnitude, seed=args.seed
    )
    rows = stride_sweep(
        poses,
        widths.pop(),
        heights.pop(),
        strides,
        noise,
        _codec_config(args),
    )
    _emit_csv(
        args.out,
        ["stride", "composite_mean_error", "argmax_mean_error", "n_omega_mean", "plane_count"],
        [
            [r.stride, r.composite_mean_error, r.argmax_mean_error, r.n_omega_mean, r.plane_count]
            for r in rows
        ],
    )
    fig_path = _figure_path(args.out)
    if fig_path is not None and not args.no_plot:
        from .plots import plot_stride_sweep

        plot_stride_sweep(rows, fig_path)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--sigma", type=float, default=16.0, help="heatmap spread in pixels")
    shared.add_argument("--tau", type=float, default=0.6, help="activation threshold")
    shared.add_argument("--stride", type=int, default=16, help="pixels per grid cell")
    shared.add_argument(
        "--norm-mode",
        choices=[m.value for m in NormMode],
        default=NormMode.SQUARED_DISTANCE.value,
        help="heatmap kernel distance mode",
    )
    shared.add_argument(
        "--region-source",
        choices=[s.value for s in RegionSource],
        default=RegionSource.GROUND_TRUTH.value,
        help="which heatmap defines the offset-scored region",
    )
    shared.add_argument("--omega-h", type=float, default=0.5, help="heatmap loss weight")
    shared.add_argument("--omega-o", type=float, default=2.0, help="offset loss weight")
    shared.add_argument("--beta", type=float, default=1.0, help="smooth-L1 transition point")
    shared.add_argument("--seed", type=int, default=0, help="random seed")
    shared.add_argument("--profile", help="dataset profile: file path or bundled name")
    shared.add_argument("--out", help="output path ('-' or omitted = stdout)")
    shared.add_argument(
        "--format",
        choices=["auto", "simple", "coco"],
        default="auto",
        help="annotation file format",
    )

    parser = argparse.ArgumentParser(
        prog="clpose",
        description="Composite keypoint localization codec, losses, metrics, and experiments.",
    )
    parser.add_argument("--version", action="version", version=f"clpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[shared], help="annotations -> map files")
    p.add_argument("annotations")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", parents=[shared], help="map file -> keypoints JSON")
    p.add_argument("mapfile")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser(
        "roundtrip", parents=[shared], help="encode + decode + error report"
    )
    p.add_argument("annotations")
    p.set_defaults(func=_cmd_roundtrip)

    p = sub.add_parser("loss", parents=[shared], help="map files -> loss report")
    p.add_argument("--target", required=True, help="target map file")
    p.add_argument("--predicted", required=True, help="predicted map file")
    p.add_argument(
        "--loss",
        choices=["composite", "peak-mse", "grmi"],
        default="composite",
        help="loss variant",
    )
    p.add_argument(
        "--disk-radius",
        type=float,
        default=None,
        help="grmi positive-disk radius in pixels (default: one stride)",
    )
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser(
        "gradcheck", parents=[shared], help="verify analytic gradients"
    )
    p.add_argument("--target", help="target map file (random inputs if omitted)")
    p.add_argument("--predicted", help="predicted map file")
    p.add_argument("--trials", type=int, default=3, help="random pairs to check")
    p.add_argument("--k", type=int, default=3, help="keypoints per random pose")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("eval-pck", parents=[shared], help="PCK evaluation")
    p.add_argument("--annotations", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--alpha", type=float, default=0.2, help="threshold fraction")
    p.add_argument(
        "--norm",
        choices=[k.value for k in NormalizerKind],
        default=NormalizerKind.TORSO.value,
        help="normalizer kind",
    )
    p.add_argument("--norm-value", type=float, help="explicit normalizer in pixels")
    p.set_defaults(func=_cmd_eval_pck)

    p = sub.add_parser("eval-oks", parents=[shared], help="OKS AP/AR evaluation")
    p.add_argument("--annotations", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument(
        "--thresholds", help="comma-separated OKS thresholds (default 0.50:0.05:0.95)"
    )
    p.set_defaults(func=_cmd_eval_oks)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=10, help="instances to generate")
    p.add_argument("--k", type=int, default=3, help="keypoints per instance")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", parents=[shared], help="direct-map gradient-descent fit")
    p.add_argument("annotations")
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--stop-loss", type=float, default=1e-6)
    p.add_argument("--init", choices=["zeros", "noise"], default="zeros")
    p.add_argument("--no-plot", action="store_true", help="skip the trace figure")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser(
        "sweep-stride", parents=[shared], help="stride sweep error report"
    )
    p.add_argument("annotations")
    p.add_argument("--strides", default="4,8,16,32", help="comma-separated strides")
    p.add_argument(
        "--noise",
        choices=[k.value for k in NoiseKind],
        default=NoiseKind.GAUSSIAN_ADDITIVE.value,
        help="noise model applied after encoding",
    )
    p.add_argument("--noise-magnitude", type=float, default=0.0)
    p.add_argument("--no-plot", action="store_true", help="skip the comparison figure")
    p.set_defaults(func=_cmd_sweep_stride)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ClposeError as exc:
        print(f"clpose: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"clpose: error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"clpose: error: invalid JSON: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
