"""Binary volume file format and seeded synthetic-volume generation.

Files are little-endian and padding-free so they are byte-portable:

    bytes 0..3    magic "VXSG"
    bytes 4..7    version (u32, currently 1)
    bytes 8..27   dims M, C, D, H, W (u32 each)
    remainder     M*C*D*H*W float32 values, canonical layout (W fastest)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    TruncatedFileError,
    UnsupportedVersionError,
    VolumeFormatError,
)
from .tensor import DTYPE, as_tensor5, require_finite

MAGIC = b"VXSG"
VERSION = 1
_HEADER = struct.Struct("<4sI5I")


def write(path, t: np.ndarray) -> None:
    """Serialize a rank-5 tensor; read(write(t)) is bit-exact."""
    t = as_tensor5(t)
    require_finite(t, "volume payload")
    header = _HEADER.pack(MAGIC, VERSION, *t.shape)
    Path(path).write_bytes(header + t.astype("<f4").tobytes())


def read(path) -> np.ndarray:
    """Parse a volume file back into a rank-5 float32 array."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, m, c, d, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version} unsupported (expected {VERSION})")
    count = m * c * d * h * w
    expected = _HEADER.size + 4 * count
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: payload needs {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise VolumeFormatError(f"{path}: {len(blob) - expected} trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size, count=count)
    return np.ascontiguousarray(data.astype(DTYPE).reshape(m, c, d, h, w))


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic PET/CT-like phantom generator."""

    extent: tuple[int, int, int] = (96, 96, 96)
    modalities: int = 2
    blob_count: int = 3
    blob_radius: float = 6.0
    blob_intensity: float = 4.0
    noise_sigma: float = 0.1


def gen_synthetic(spec: SyntheticSpec, seed: int):
    """Deterministic phantom volumes plus a blob label mask.

    Modality 1 carries smooth structure plus noise with faint blob contrast;
    modality 2 (when present) carries high-intensity blobs on a dim noisy
    background, mimicking metabolic hotspots.  The label marks exactly the
    voxels within a blob radius of some blob center.  Returns
    (volumes [M, 1, D, H, W], label [1, 1, D, H, W]).
    """
    d, h, w = (int(e) for e in spec.extent)
    for axis, e in zip(("depth", "height", "width"), (d, h, w)):
        if e <= 0 or e % 32 != 0:
            raise ConfigError(f"{axis} extent {e} must be a positive multiple of 32")
    if spec.modalities < 1:
        raise ConfigError(f"modalities must be >= 1, got {spec.modalities}")
    rng = np.random.default_rng(seed)

    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    label = np.zeros((d, h, w), dtype=bool)
    blob_field = np.zeros((d, h, w), dtype=np.float64)
    margin = spec.blob_radius
    for _ in range(spec.blob_count):
        center = rng.uniform([margin, margin, margin], [d - margin, h - margin, w - margin])
        dist2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
        label |= dist2 <= spec.blob_radius**2
        blob_field += np.exp(-dist2 / (2.0 * (spec.blob_radius / 2.0) ** 2))

    gradient = (zz / max(d - 1, 1) + yy / max(h - 1, 1) + xx / max(w - 1, 1)) / 3.0
    volumes = np.empty((spec.modalities, 1, d, h, w), dtype=DTYPE)
    structure = gradient + 0.5 * blob_field + rng.normal(0.0, spec.noise_sigma, size=(d, h, w))
    volumes[0, 0] = structure.astype(DTYPE)
    for m in range(1, spec.modalities):
        hot = spec.blob_intensity * blob_field + rng.normal(0.0, spec.noise_sigma, size=(d, h, w))
        volumes[m, 0] = hot.astype(DTYPE)

    return volumes, label[None, None].astype(DTYPE)
