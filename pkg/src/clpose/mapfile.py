"""Binary map-stack file format (CLM1).

Layout, all integers unsigned 32-bit little-endian:

    offset 0   magic        4 bytes, b"CLM1"
    offset 4   version      currently 1
    offset 8   K            keypoint count
    offset 12  grid_width
    offset 16  grid_height
    offset 20  stride
    offset 24  norm_mode    0 = squared-distance, 1 = literal-l2
    offset 28  payload      3K planes of float32 little-endian values

Plane order is K heatmaps, K y-offsetmaps, K x-offsetmaps; within a plane,
row-major with y as the outer axis. The payload length must match the
header exactly. Values are stored at float32 precision while in-memory
planes are float64, so writing quantizes once; re-reading and re-writing a
file is byte-stable. The keypoint validity mask is not persisted; read
stacks report every keypoint as valid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GridSpec, NormMode, TargetMaps
from .errors import BadMagicError, MapFormatError, PayloadSizeError, VersionMismatchError

MAGIC = b"CLM1"
VERSION = 1
HEADER_SIZE = 28
_HEADER = struct.Struct("<4sIIIIII")

_NORM_MODE_FLAGS = {NormMode.SQUARED_DISTANCE: 0, NormMode.LITERAL_L2: 1}
_FLAG_NORM_MODES = {v: k for k, v in _NORM_MODE_FLAGS.items()}


@dataclass(frozen=True)
class MapFileHeader:
    version: int
    k: int
    grid_width: int
    grid_height: int
    stride: int
    norm_mode: NormMode

    @property
    def payload_size(self) -> int:
        return 3 * self.k * self.grid_width * self.grid_height * 4


def maps_to_bytes(maps: TargetMaps, norm_mode: NormMode = NormMode.SQUARED_DISTANCE) -> bytes:
    """Serialize a map stack to CLM1 bytes."""
    grid = maps.grid
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        maps.k,
        grid.grid_width,
        grid.grid_height,
        grid.stride,
        _NORM_MODE_FLAGS[NormMode(norm_mode)],
    )
    payload = b"".join(
        np.ascontiguousarray(stack, dtype="<f4").tobytes()
        for stack in (maps.heatmaps, maps.y_offsets, maps.x_offsets)
    )
    return header + payload


def maps_from_bytes(blob: bytes) -> tuple[TargetMaps, MapFileHeader]:
    """Parse CLM1 bytes into a map stack plus its header."""
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(
            f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}"
        )
    if len(blob) < HEADER_SIZE:
        raise PayloadSizeError(
            f"file is {len(blob)} bytes, shorter than the {HEADER_SIZE}-byte header"
        )
    _, version, k, grid_w, grid_h, stride, mode_flag = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    if k < 1 or grid_w < 1 or grid_h < 1 or stride < 1:
        raise MapFormatError(
            f"invalid header fields: K={k}, grid={grid_w}x{grid_h}, stride={stride}"
        )
    if mode_flag not in _FLAG_NORM_MODES:
        raise MapFormatError(f"unknown norm_mode flag {mode_flag}")
    header = MapFileHeader(
        version=version,
        k=k,
        grid_width=grid_w,
        grid_height=grid_h,
        stride=stride,
        norm_mode=_FLAG_NORM_MODES[mode_flag],
    )
    expected = header.payload_size
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise PayloadSizeError(
            f"payload is {actual} bytes but the header declares {expected}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE)
    planes = flat.reshape(3 * k, grid_h, grid_w).astype(np.float64)
    grid = GridSpec(width=grid_w * stride, height=grid_h * stride, stride=stride)
    maps = TargetMaps(
        grid=grid,
        heatmaps=planes[:k],
        y_offsets=planes[k : 2 * k],
        x_offsets=planes[2 * k :],
        valid=np.ones(k, dtype=bool),
    )
    return maps, header


def write_maps(
    maps: TargetMaps,
    destination: str | Path,
    norm_mode: NormMode = NormMode.SQUARED_DISTANCE,
) -> None:
    """Write a map stack to a CLM1 file (atomically: temp file then rename)."""
    destination = Path(destination)
    blob = maps_to_bytes(maps, norm_mode)
    tmp = destination.with_name(destination.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(destination)


def read_maps(source: str | Path) -> TargetMaps:
    """Read a CLM1 file into a map stack."""
    maps, _ = maps_from_bytes(Path(source).read_bytes())
    return maps


def read_maps_with_header(source: str | Path) -> tuple[TargetMaps, MapFileHeader]:
    return maps_from_bytes(Path(source).read_bytes())
