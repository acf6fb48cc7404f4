"""Composite keypoint localization: sparse heatmaps + short-distance offsetmaps.

A keypoint codec (encode poses to low-resolution heatmap/offset map stacks,
decode stacks to sub-stride coordinates), the composite training loss with
verified analytic gradients, PCK/PCKh and OKS-AP evaluation, and a
deterministic synthetic experiment harness, all tied together by the
``clpose`` command-line tool.
"""

from .codec import argmax_decode, decode, encode, encode_heatmaps, encode_offsetmaps
from .core import (
    CodecConfig,
    DecodedPose,
    GridSpec,
    Keypoint,
    NormMeta,
    NormMode,
    PoseInstance,
    RegionSource,
    TargetMaps,
    Visibility,
    derive_grid,
    patch_center,
)
from .datasets import (
    AnnotationSet,
    DatasetProfile,
    ImageRecord,
    annotation_set_to_dict,
    ingest_coco,
    ingest_simple,
    load_profile,
    synthetic_profile,
    write_simple,
)
from .errors import (
    BadMagicError,
    ClposeError,
    ConfigError,
    ContractError,
    DataError,
    IngestError,
    MapFormatError,
    PayloadSizeError,
    VersionMismatchError,
)
from .loss import (
    GradientStack,
    LossConfig,
    LossReport,
    RegionMask,
    composite_loss,
    composite_loss_grad,
    finite_diff_check,
    grmi_loss,
    mse_plane,
    peak_mse_loss,
    region_mask,
    smooth_l1,
    smooth_l1_grad,
)
from .mapfile import (
    MapFileHeader,
    maps_from_bytes,
    maps_to_bytes,
    read_maps,
    read_maps_with_header,
    write_maps,
)
from .metrics import (
    Detection,
    NormalizerKind,
    NormalizerSpec,
    OksApResult,
    OksConstants,
    PckResult,
    oks,
    oks_ap,
    pck,
    resolve_normalizer,
)
from .synthfit import (
    FitConfig,
    FitInit,
    FitResult,
    NoiseKind,
    NoiseModel,
    SweepRow,
    fit_maps,
    gen_dataset,
    perturb,
    stride_sweep,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
