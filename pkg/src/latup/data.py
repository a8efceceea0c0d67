"""Volume ingestion and preparation: a minimal uncompressed NIfTI-1 reader,
the native "LTPV" raw volume format, intensity normalization, center
cropping, one-hot label encoding, synthetic phantom generation, and fold
splitting.

LTPV layout (all multi-byte fields little-endian):

    magic   4 bytes  b"LTPV"
    version u16      currently 1
    dims    3 x u32  (D, H, W)
    channels u32
    dtype   u16      1 = float32, 2 = uint8, 3 = int16
    payload row-major (C order), channel-fastest

so the header is 24 bytes and the payload length must equal
D*H*W*channels*itemsize exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TruncatedError, UnsupportedDtypeError

MODALITY_ORDER = ("t1ce", "t2", "flair")
VALID_LABELS = (0, 1, 2, 4)

LTPV_MAGIC = b"LTPV"
LTPV_VERSION = 1
_LTPV_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i2")}
_LTPV_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("int16"): 3}


@dataclass
class LabeledVolume:
    """Multi-modal intensities plus the matching label volume.

    modalities: (D,H,W,3) float32 ordered (T1ce, T2, FLAIR);
    labels: (D,H,W) uint8 over {0,1,2,4}.
    """

    modalities: np.ndarray
    labels: np.ndarray
    sample_id: str
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.modalities.ndim != 4 or self.modalities.shape[-1] != len(MODALITY_ORDER):
            raise ShapeError(
                f"LabeledVolume: modalities must be (D,H,W,3), got {self.modalities.shape}")
        if self.labels.shape != self.modalities.shape[:3]:
            raise ShapeError(
                f"LabeledVolume: labels {self.labels.shape} do not match "
                f"modalities {self.modalities.shape[:3]}")
        if not np.isfinite(self.modalities).all():
            raise ValueError("LabeledVolume: non-finite intensities")


# ---------------------------------------------------------------------------
# NIfTI-1 (uncompressed, read-only)

_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}
_NIFTI_HEADER_SIZE = 348


def read_nifti1(data: bytes) -> tuple[np.ndarray, dict]:
    """Parse an uncompressed NIfTI-1 byte string.

    Endianness is inferred from the header-size field; supported voxel
    types are uint8, int16 and float32; dim[0] must be 3 or 4.  The array
    comes back in file order (first dimension fastest) with the intensity
    scaling ``x*scl_slope + scl_inter`` applied when the slope is nonzero.
    """
    if len(data) < _NIFTI_HEADER_SIZE:
        raise TruncatedError(
            f"nifti: {len(data)} bytes is shorter than the 348-byte header")
    byte_order = None
    for candidate in ("<", ">"):
        if struct.unpack_from(candidate + "i", data, 0)[0] == _NIFTI_HEADER_SIZE:
            byte_order = candidate
            break
    if byte_order is None:
        raise FormatError("nifti: header size field is not 348 in either byte order")

    dim = struct.unpack_from(byte_order + "8h", data, 40)
    datatype, _bitpix = struct.unpack_from(byte_order + "2h", data, 70)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(byte_order + "3f", data, 108)

    ndim = dim[0]
    if ndim not in (3, 4):
        raise FormatError(f"nifti: dim[0] must be 3 or 4, got {ndim}")
    dims = tuple(int(d) for d in dim[1:1 + ndim])
    if any(d < 1 for d in dims):
        raise FormatError(f"nifti: non-positive dimension in {dims}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtypeError(f"nifti: unsupported datatype code {datatype}")

    dtype = np.dtype(byte_order + _NIFTI_DTYPES[datatype])
    offset = int(vox_offset)
    if offset < _NIFTI_HEADER_SIZE:
        raise FormatError(f"nifti: vox_offset {offset} points inside the header")
    count = int(np.prod(dims))
    need = count * dtype.itemsize
    if len(data) - offset < need:
        raise TruncatedError(
            f"nifti: payload needs {need} bytes, file has {len(data) - offset}")

    flat = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    volume = flat.reshape(dims, order="F")
    if scl_slope != 0.0:
        volume = volume.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)
    meta = {
        "dims": dims,
        "datatype": datatype,
        "byte_order": byte_order,
        "scaled": scl_slope != 0.0,
        "vox_offset": offset,
    }
    return volume, meta


def read_nifti1_file(path) -> tuple[np.ndarray, dict]:
    return read_nifti1(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# LTPV raw volumes


def encode_raw(array: np.ndarray) -> bytes:
    """Serialize a (D,H,W) or (D,H,W,C) array into LTPV bytes."""
    array = np.asarray(array)
    if array.ndim == 3:
        dims, channels = array.shape, 1
    elif array.ndim == 4:
        dims, channels = array.shape[:3], array.shape[3]
    else:
        raise ShapeError(f"encode_raw: expected 3-d or 4-d array, got {array.shape}")
    if any(d < 1 for d in dims) or channels < 1:
        raise ShapeError(f"encode_raw: empty dims {array.shape}")
    code = _LTPV_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise UnsupportedDtypeError(
            f"encode_raw: dtype {array.dtype} not one of float32/uint8/int16")
    header = LTPV_MAGIC + struct.pack(
        "<H3IIH", LTPV_VERSION, dims[0], dims[1], dims[2], channels, code)
    payload = np.ascontiguousarray(array).astype(
        _LTPV_DTYPES[code], copy=False).tobytes(order="C")
    return header + payload


def decode_raw(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_raw`; bit-exact round trip."""
    header_size = 4 + struct.calcsize("<H3IIH")
    if len(data) < header_size:
        raise TruncatedError(f"ltpv: {len(data)} bytes is shorter than the header")
    if data[:4] != LTPV_MAGIC:
        raise FormatError(f"ltpv: bad magic {data[:4]!r}")
    version, d, h, w, channels, code = struct.unpack_from("<H3IIH", data, 4)
    if version != LTPV_VERSION:
        raise FormatError(f"ltpv: unsupported version {version}")
    if min(d, h, w, channels) < 1:
        raise FormatError(f"ltpv: empty dims {(d, h, w, channels)}")
    dtype = _LTPV_DTYPES.get(code)
    if dtype is None:
        raise UnsupportedDtypeError(f"ltpv: unknown dtype code {code}")
    need = d * h * w * channels * dtype.itemsize
    have = len(data) - header_size
    if have != need:
        raise TruncatedError(f"ltpv: payload is {have} bytes, header promises {need}")
    flat = np.frombuffer(data, dtype=dtype, count=d * h * w * channels,
                         offset=header_size)
    array = flat.reshape((d, h, w) if channels == 1 else (d, h, w, channels))
    return array.astype(dtype.newbyteorder("="), copy=False)


def write_raw(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_raw(array))


def read_raw(path) -> np.ndarray:
    return decode_raw(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Preprocessing


def minmax_normalize(volume: np.ndarray) -> np.ndarray:
    """Rescale to [0,1] per modality channel; constant channels map to 0."""
    volume = np.asarray(volume, dtype=np.float32)
    if not np.isfinite(volume).all():
        raise ValueError("minmax_normalize: non-finite values")
    if volume.ndim == 3:
        channels = volume[..., None]
    elif volume.ndim == 4:
        channels = volume
    else:
        raise ShapeError(f"minmax_normalize: expected 3-d or 4-d, got {volume.shape}")
    lo = channels.min(axis=(0, 1, 2), keepdims=True)
    hi = channels.max(axis=(0, 1, 2), keepdims=True)
    span = hi - lo
    span[span == 0] = 1.0
    out = (channels - lo) / span
    return out[..., 0] if volume.ndim == 3 else out


def center_crop(volume: np.ndarray, target=(128, 128, 128)) -> np.ndarray:
    """Crop the leading three axes to ``target``, centered (low side floors)."""
    volume = np.asarray(volume)
    if volume.ndim < 3:
        raise ShapeError(f"center_crop: expected at least 3 axes, got {volume.shape}")
    target = tuple(int(t) for t in target)
    src = volume.shape[:3]
    if any(s < t for s, t in zip(src, target)):
        raise ShapeError(f"center_crop: source {src} smaller than target {target}")
    starts = [(s - t) // 2 for s, t in zip(src, target)]
    sl = tuple(slice(a, a + t) for a, t in zip(starts, target))
    return volume[sl]


def crop_labeled(volume: LabeledVolume, target=(128, 128, 128)) -> LabeledVolume:
    """Center-crop modalities and labels with identical indices."""
    return LabeledVolume(
        modalities=center_crop(volume.modalities, target),
        labels=center_crop(volume.labels, target),
        sample_id=volume.sample_id,
        voxel_size=volume.voxel_size,
    )


def one_hot_labels(labels: np.ndarray) -> np.ndarray:
    """(D,H,W) labels over {0,1,2,4} -> (D,H,W,4) float32 one-hot channels."""
    labels = np.asarray(labels)
    bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
    if bad.size:
        raise ValueError(f"one_hot_labels: unknown label values {bad.tolist()}")
    lut = np.zeros(5, dtype=np.int64)
    lut[[0, 1, 2, 4]] = [0, 1, 2, 3]
    return np.eye(4, dtype=np.float32)[lut[labels]]


# ---------------------------------------------------------------------------
# Phantoms

# Class-conditional mean intensity per (class index, modality); distinct
# rows so every tumor class is separable in at least one channel.
_PHANTOM_MEANS = np.array([
    [0.15, 0.20, 0.10],  # background
    [0.65, 0.35, 0.55],  # NCR/NET (label 1)
    [0.45, 0.75, 0.80],  # ED (label 2)
    [0.85, 0.55, 0.35],  # ET (label 4)
], dtype=np.float64)

_PHANTOM_NOISE_SIGMA = 0.05  # of the unit dynamic range
_MIN_CLASS_VOXELS = 32


def generate_phantom(size, seed: int) -> LabeledVolume:
    """Deterministic nested-ellipsoid phantom.

    Outer ellipsoid = edema shell (label 2), middle = enhancing rind
    (label 4), core = necrotic center (label 1), so the derived region
    masks nest (ET within TC within WT).  Three modality channels get
    class-conditional means plus seeded Gaussian noise, then min-max
    normalization.  Every tumor class is guaranteed at least 32 voxels.
    """
    if isinstance(size, int):
        size = (size, size, size)
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ConfigError(f"generate_phantom: size must be >= 16 per axis, got {size}")
    rng = np.random.Generator(np.random.PCG64(seed))

    extent = np.array(size, dtype=np.float64)
    center = extent / 2.0 + rng.uniform(-extent / 16.0, extent / 16.0)
    r_outer = extent * 0.32 * rng.uniform(0.96, 1.04, size=3)
    r_mid = r_outer * 0.72
    r_inner = r_outer * 0.50

    grids = np.indices(size, dtype=np.float64)

    def inside(radii):
        q = sum(((grids[i] - center[i]) / radii[i]) ** 2 for i in range(3))
        return q <= 1.0

    labels = np.zeros(size, dtype=np.uint8)
    labels[inside(r_outer)] = 2
    labels[inside(r_mid)] = 4
    labels[inside(r_inner)] = 1

    for value in (1, 2, 4):
        count = int((labels == value).sum())
        if count < _MIN_CLASS_VOXELS:
            raise ConfigError(
                f"generate_phantom: class {value} has only {count} voxels; "
                f"size {size} too small for the ellipsoids")

    lut = np.zeros(5, dtype=np.int64)
    lut[[0, 1, 2, 4]] = [0, 1, 2, 3]
    means = _PHANTOM_MEANS[lut[labels]]
    noisy = means + rng.normal(0.0, _PHANTOM_NOISE_SIGMA, size=means.shape)
    modalities = minmax_normalize(noisy.astype(np.float32))
    return LabeledVolume(modalities=modalities, labels=labels,
                         sample_id=f"phantom-{seed:05d}")


def split_folds(sample_ids: list[str], k: int = 5, seed: int = 0) -> list[list[str]]:
    """Seeded shuffle then near-equal partition into k disjoint folds."""
    ids = list(sample_ids)
    if k < 1 or k > len(ids):
        raise ConfigError(f"split_folds: k={k} invalid for {len(ids)} samples")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [list(part) for part in np.array_split(np.array(shuffled, dtype=object), k)]


# ---------------------------------------------------------------------------
# Dataset directories (manifest + one LTPV pair per sample)


def save_dataset(directory, volumes: list[LabeledVolume], extra_meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "latup-dataset",
        "samples": [v.sample_id for v in volumes],
    }
    if extra_meta:
        manifest.update(extra_meta)
    for v in volumes:
        write_raw(directory / f"{v.sample_id}_mod.ltpv", v.modalities)
        write_raw(directory / f"{v.sample_id}_lab.ltpv", v.labels)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_dataset(directory) -> list[LabeledVolume]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"load_dataset: no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    volumes = []
    for sample_id in manifest["samples"]:
        modalities = read_raw(directory / f"{sample_id}_mod.ltpv")
        labels = read_raw(directory / f"{sample_id}_lab.ltpv")
        volumes.append(LabeledVolume(
            modalities=np.asarray(modalities, dtype=np.float32),
            labels=np.asarray(labels, dtype=np.uint8),
            sample_id=sample_id))
    return volumes


def save_folds(path, folds: list[list[str]], seed: int, k: int) -> None:
    Path(path).write_text(json.dumps(
        {"k": k, "seed": seed, "folds": folds}, sort_keys=True, indent=2) + "\n")


def load_folds(path) -> dict[str, int]:
    """Map sample id -> fold index."""
    payload = json.loads(Path(path).read_text())
    assignment: dict[str, int] = {}
    for fold_idx, ids in enumerate(payload["folds"]):
        for sid in ids:
            assignment[sid] = fold_idx
    return assignment
