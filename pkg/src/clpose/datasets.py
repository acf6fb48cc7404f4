"""Dataset profiles and annotation ingestion.

Two annotation formats are read: the COCO person-keypoints JSON (read-only)
and a flat "simple poses" JSON used for single-person data, synthetic dumps,
and prediction files. The simple format round-trips exactly through
ingest_simple / write_simple.

Simple poses schema::

    {
      "profile": "coco17" | {profile object},
      "images": [
        {"id": <optional>, "width": W, "height": H,
         "instances": [
            {"keypoints": [{"x": .., "y": .., "v": 0|1|2}, ...],
             "head_box": [x1, y1, x2, y2],   # optional
             "area": <pixels^2>,             # optional
             "score": <float>}               # optional, for predictions
         ]}
      ]
    }

Profile schema::

    {"name": .., "K": .., "keypoint_names": [..], "oks_kappas": [..],
     "torso_endpoints": [i, j], "flip_pairs": [[a, b], ..]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .core import Keypoint, NormMeta, PoseInstance, Visibility
from .errors import DataError, IngestError

BUILTIN_PROFILES = ("coco17", "lsp14")


@dataclass(frozen=True)
class DatasetProfile:
    """Keypoint vocabulary and evaluation constants for one dataset."""

    name: str
    k: int
    keypoint_names: tuple[str, ...]
    oks_kappas: tuple[float, ...] | None = None
    torso_endpoints: tuple[int, int] | None = None
    flip_pairs: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise DataError(f"profile {self.name!r}: K must be >= 1, got {self.k}")
        if len(self.keypoint_names) != self.k:
            raise DataError(
                f"profile {self.name!r}: {len(self.keypoint_names)} keypoint names "
                f"for K={self.k}"
            )
        if self.oks_kappas is not None:
            if len(self.oks_kappas) != self.k or any(v <= 0 for v in self.oks_kappas):
                raise DataError(
                    f"profile {self.name!r}: oks_kappas must be {self.k} positive values"
                )

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetProfile":
        try:
            return cls(
                name=str(data["name"]),
                k=int(data["K"]),
                keypoint_names=tuple(data["keypoint_names"]),
                oks_kappas=tuple(float(v) for v in data["oks_kappas"])
                if data.get("oks_kappas") is not None
                else None,
                torso_endpoints=tuple(data["torso_endpoints"])
                if data.get("torso_endpoints") is not None
                else None,
                flip_pairs=tuple(tuple(p) for p in data["flip_pairs"])
                if data.get("flip_pairs") is not None
                else None,
            )
        except KeyError as exc:
            raise IngestError(f"profile is missing required field {exc}") from exc

    def to_dict(self) -> dict:
        out: dict = {
            "name": self.name,
            "K": self.k,
            "keypoint_names": list(self.keypoint_names),
        }
        if self.oks_kappas is not None:
            out["oks_kappas"] = list(self.oks_kappas)
        if self.torso_endpoints is not None:
            out["torso_endpoints"] = list(self.torso_endpoints)
        if self.flip_pairs is not None:
            out["flip_pairs"] = [list(p) for p in self.flip_pairs]
        return out


def load_profile(name_or_path: str | Path) -> DatasetProfile:
    """Load a dataset profile from a file path or a bundled name."""
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"profile file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise IngestError(f"profile {path}: invalid JSON ({exc})") from exc
        return DatasetProfile.from_dict(data)
    name = str(name_or_path)
    if name in BUILTIN_PROFILES:
        text = resources.files("clpose.profiles").joinpath(f"{name}.json").read_text(
            encoding="utf-8"
        )
        return DatasetProfile.from_dict(json.loads(text))
    raise DataError(
        f"unknown profile {name!r}; expected a file path or one of {BUILTIN_PROFILES}"
    )


def synthetic_profile(k: int) -> DatasetProfile:
    """A self-contained profile for synthetic K-keypoint datasets."""
    return DatasetProfile(
        name=f"synthetic-{k}",
        k=k,
        keypoint_names=tuple(f"kp_{i:02d}" for i in range(k)),
        oks_kappas=(0.1,) * k,
        torso_endpoints=(0, k - 1) if k >= 2 else None,
    )


@dataclass(frozen=True)
class ImageRecord:
    """One image's dimensions and pose instances (plus optional scores)."""

    width: int
    height: int
    instances: tuple[PoseInstance, ...]
    scores: tuple[float | None, ...] = ()
    image_id: int | None = None

    def __post_init__(self):
        if not self.scores:
            object.__setattr__(self, "scores", (None,) * len(self.instances))
        if len(self.scores) != len(self.instances):
            raise DataError("scores and instances must align")


@dataclass(frozen=True)
class AnnotationSet:
    """Instances grouped per image, with the dataset profile reference."""

    images: tuple[ImageRecord, ...]
    profile: DatasetProfile | None = None
    profile_ref: str | dict | None = field(default=None, repr=False)

    @property
    def k(self) -> int | None:
        if self.profile is not None:
            return self.profile.k
        for image in self.images:
            if image.instances:
                return image.instances[0].k
        return None


_VISIBILITY = {0: Visibility.UNLABELED, 1: Visibility.OCCLUDED, 2: Visibility.VISIBLE}


def _require(data: dict, key: str, path: str):
    if key not in data:
        raise IngestError(f"missing {path}.{key}")
    return data[key]


def _parse_instance(raw: dict, path: str, k_expected: int | None) -> tuple[PoseInstance, float | None]:
    kps_raw = _require(raw, "keypoints", path)
    if not isinstance(kps_raw, list) or not kps_raw:
        raise IngestError(f"{path}.keypoints must be a non-empty list")
    if k_expected is not None and len(kps_raw) != k_expected:
        raise IngestError(
            f"{path}.keypoints has {len(kps_raw)} entries, profile K={k_expected}"
        )
    keypoints = []
    for j, kp in enumerate(kps_raw):
        kp_path = f"{path}.keypoints[{j}]"
        v = int(_require(kp, "v", kp_path))
        if v not in _VISIBILITY:
            raise IngestError(f"{kp_path}.v must be 0, 1, or 2, got {v}")
        keypoints.append(
            Keypoint(
                x=float(_require(kp, "x", kp_path)),
                y=float(_require(kp, "y", kp_path)),
                visibility=_VISIBILITY[v],
            )
        )
    head_box = raw.get("head_box")
    if head_box is not None:
        if len(head_box) != 4:
            raise IngestError(f"{path}.head_box must have 4 values")
        head_box = tuple(float(v) for v in head_box)
    area = raw.get("area")
    if area is not None:
        area = float(area)
        if area <= 0:
            raise IngestError(f"{path}.area must be positive, got {area}")
    score = raw.get("score")
    meta = NormMeta(head_box=head_box, area=area)
    return (
        PoseInstance(keypoints=tuple(keypoints), norm_meta=meta),
        float(score) if score is not None else None,
    )


def ingest_simple(
    source: str | Path | dict, profile: DatasetProfile | None = None
) -> AnnotationSet:
    """Read a simple-poses JSON file (or an already-parsed dict).

    The file's profile field may be an inline profile object or a bundled
    profile name; an explicit ``profile`` argument overrides either. Schema
    violations raise IngestError naming the offending path.
    """
    if isinstance(source, dict):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IngestError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise IngestError("top level must be an object")

    profile_ref = data.get("profile")
    resolved = profile
    if resolved is None and isinstance(profile_ref, dict):
        resolved = DatasetProfile.from_dict(profile_ref)
    if resolved is None and isinstance(profile_ref, str) and profile_ref in BUILTIN_PROFILES:
        resolved = load_profile(profile_ref)
    k_expected = resolved.k if resolved is not None else None

    images_raw = _require(data, "images", "$")
    if not isinstance(images_raw, list):
        raise IngestError("$.images must be a list")
    images = []
    for i, img in enumerate(images_raw):
        path = f"images[{i}]"
        width = _require(img, "width", path)
        height = _require(img, "height", path)
        instances = []
        scores = []
        for j, inst in enumerate(img.get("instances", [])):
            pose, score = _parse_instance(inst, f"{path}.instances[{j}]", k_expected)
            if k_expected is None:
                k_expected = pose.k
            elif pose.k != k_expected:
                raise IngestError(
                    f"{path}.instances[{j}] has K={pose.k}, expected {k_expected}"
                )
            instances.append(pose)
            scores.append(score)
        images.append(
            ImageRecord(
                width=int(width),
                height=int(height),
                instances=tuple(instances),
                scores=tuple(scores),
                image_id=img.get("id"),
            )
        )
    return AnnotationSet(images=tuple(images), profile=resolved, profile_ref=profile_ref)


def annotation_set_to_dict(annotations: AnnotationSet) -> dict:
    """The simple-poses JSON representation of an annotation set."""
    out: dict = {}
    if annotations.profile_ref is not None:
        out["profile"] = annotations.profile_ref
    elif annotations.profile is not None:
        out["profile"] = annotations.profile.to_dict()
    images = []
    for image in annotations.images:
        record: dict = {}
        if image.image_id is not None:
            record["id"] = image.image_id
        record["width"] = image.width
        record["height"] = image.height
        record["instances"] = []
        for pose, score in zip(image.instances, image.scores):
            inst: dict = {
                "keypoints": [
                    {"x": kp.x, "y": kp.y, "v": int(kp.visibility)}
                    for kp in pose.keypoints
                ]
            }
            if pose.norm_meta.head_box is not None:
                inst["head_box"] = list(pose.norm_meta.head_box)
            if pose.norm_meta.area is not None:
                inst["area"] = pose.norm_meta.area
            if score is not None:
                inst["score"] = score
            record["instances"].append(inst)
        images.append(record)
    out["images"] = images
    return out


def write_simple(annotations: AnnotationSet, destination: str | Path) -> None:
    """Write an annotation set as simple-poses JSON (exact ingest inverse)."""
    destination = Path(destination)
    text = json.dumps(annotation_set_to_dict(annotations), indent=2) + "\n"
    tmp = destination.with_name(destination.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(destination)


def ingest_coco(
    source: str | Path | dict, profile: DatasetProfile | None = None
) -> AnnotationSet:
    """Read a COCO person-keypoints JSON file.

    Keypoint triplets [x, y, v] map v 0/1/2 to unlabeled/occluded/visible;
    annotation area is carried into the instance metadata. Instances are
    grouped by image id, images in file order, annotations in ascending id
    order within an image. Only keypoint-task fields are read.
    """
    if isinstance(source, dict):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IngestError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict) or "images" not in data or "annotations" not in data:
        raise IngestError("not a COCO keypoints file: needs images and annotations")

    k_expected = profile.k if profile is not None else None
    by_image: dict[int, list] = {}
    for ann in sorted(data["annotations"], key=lambda a: a.get("id", 0)):
        ann_id = ann.get("id", "<missing id>")
        if "keypoints" not in ann:
            raise IngestError(f"annotation {ann_id}: missing keypoints array")
        flat = ann["keypoints"]
        if len(flat) % 3 != 0:
            raise IngestError(
                f"annotation {ann_id}: keypoints length {len(flat)} is not a "
                "multiple of 3"
            )
        k = len(flat) // 3
        if k_expected is not None and k != k_expected:
            raise IngestError(
                f"annotation {ann_id}: K={k} does not match profile K={k_expected}"
            )
        if k_expected is None:
            k_expected = k
        keypoints = []
        for j in range(k):
            x, y, v = flat[3 * j : 3 * j + 3]
            v = int(v)
            if v not in _VISIBILITY:
                raise IngestError(f"annotation {ann_id}: keypoint {j} has v={v}")
            keypoints.append(
                Keypoint(x=float(x), y=float(y), visibility=_VISIBILITY[v])
            )
        area = ann.get("area")
        meta = NormMeta(area=float(area) if area is not None else None)
        pose = PoseInstance(keypoints=tuple(keypoints), norm_meta=meta)
        by_image.setdefault(ann["image_id"], []).append(pose)

    images = []
    for img in data["images"]:
        img_id = img.get("id")
        if img_id is None:
            raise IngestError("image entry missing id")
        try:
            width, height = int(img["width"]), int(img["height"])
        except KeyError as exc:
            raise IngestError(f"image {img_id}: missing {exc}") from exc
        instances = tuple(by_image.pop(img_id, []))
        images.append(
            ImageRecord(
                width=width, height=height, instances=instances, image_id=img_id
            )
        )
    if by_image:
        raise IngestError(
            f"annotations reference unknown image ids: {sorted(by_image)[:5]}"
        )
    return AnnotationSet(
        images=tuple(images),
        profile=profile,
        profile_ref=profile.name if profile is not None else None,
    )
