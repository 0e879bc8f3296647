"""Volume I/O and the CT preprocessing chain.

A :class:`Volume` is a 3D float32 grid ordered (depth, height, width)
with per-axis physical spacing in millimetres.  Volumes are stored on
disk as RVOL pairs: ``<name>.json`` holding the header and ``<name>.raw``
holding depth-major little-endian float32 voxels.

The preprocessing chain applies, in order: intensity clip, resample to a
target spacing, crop to the lung volume of interest, resize to a fixed
shape, and tumor bounding-box generation.  Masks follow the image
through the identical geometric transforms with nearest interpolation.

Interpolation uses the voxel-center convention: output index ``i`` maps
to input coordinate ``(i + 0.5) * scale - 0.5`` with clamp-to-edge
sampling at the borders.  The lung extractor is threshold-based (below
-400 HU, border air removed, two largest components kept); externally
supplied lung masks are accepted everywhere a lung mask is consumed.
The VOI crop uses the combined lung bounding box with a configurable
margin (default 0 mm).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, FormatError, RadpipeError, ValidationError

LUNG_THRESHOLD_HU = -400.0

_INTERP_ORDERS = {"nearest": 0, "linear": 1, "bspline": 3}


@dataclass
class Volume:
    """3D scalar grid with physical spacing and origin, all in (d, h, w) order."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValidationError(f"volume dimensions must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive values, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValidationError(f"origin must have 3 components, got {self.origin}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def is_binary(self) -> bool:
        return bool(np.isin(np.unique(self.data), (0.0, 1.0)).all())

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, self.origin)


@dataclass
class BBox3:
    """Inclusive voxel-index bounding box."""

    min_index: tuple[int, int, int]
    max_index: tuple[int, int, int]

    def __post_init__(self):
        self.min_index = tuple(int(i) for i in self.min_index)
        self.max_index = tuple(int(i) for i in self.max_index)
        if any(lo > hi for lo, hi in zip(self.min_index, self.max_index)):
            raise ValidationError(f"bbox min {self.min_index} exceeds max {self.max_index}")
        if any(lo < 0 for lo in self.min_index):
            raise ValidationError(f"bbox indices must be non-negative, got {self.min_index}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.min_index, self.max_index))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.min_index, self.max_index))

    def to_dict(self) -> dict:
        return {"min_index": list(self.min_index), "max_index": list(self.max_index)}


@dataclass
class PreprocessConfig:
    clip_low: float = -200.0
    clip_high: float = 250.0
    target_spacing: tuple[float, float, float] = (1.5, 1.0, 1.0)
    target_shape: tuple[int, int, int] = (256, 256, 256)
    image_interp: str = "bspline"
    mask_interp: str = "nearest"
    voi_margin_mm: float = 0.0

    def validate(self) -> "PreprocessConfig":
        if not self.clip_low < self.clip_high:
            raise ValidationError(
                f"clip_low must be < clip_high, got ({self.clip_low}, {self.clip_high})"
            )
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ValidationError(f"target_spacing must be 3 positive values, got {self.target_spacing}")
        if len(self.target_shape) != 3 or any(n < 8 for n in self.target_shape):
            raise ValidationError(f"target_shape must be >= 8 per axis, got {self.target_shape}")
        for name in ("image_interp", "mask_interp"):
            if getattr(self, name) not in _INTERP_ORDERS:
                raise ValidationError(f"{name} must be one of {sorted(_INTERP_ORDERS)}")
        if self.voi_margin_mm < 0:
            raise ValidationError(f"voi_margin_mm must be >= 0, got {self.voi_margin_mm}")
        return self


@dataclass
class PreprocessedSample:
    """Output of the preprocessing chain, ready for the network.

    ``fill_value`` records the clip floor so that downstream geometric
    augmentation can fill out-of-field voxels consistently.
    """

    image: Volume
    tumor_mask: Optional[Volume] = None
    bbox_volume: Optional[Volume] = None
    lung_mask: Optional[Volume] = None
    crop_box: Optional[BBox3] = None
    fill_value: float = 0.0
    sample_id: str = ""
    label: Optional[int] = None


# ---------------------------------------------------------------------------
# RVOL on-disk format
# ---------------------------------------------------------------------------

def _rvol_paths(path: str | os.PathLike) -> tuple[str, str]:
    base = str(path)
    for suffix in (".json", ".raw"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base + ".json", base + ".raw"


def write_volume(vol: Volume, path: str | os.PathLike) -> None:
    """Write ``vol`` as an RVOL pair at ``path`` (extension optional)."""
    if not np.isfinite(vol.data).all():
        raise FormatError("volume contains non-finite voxels, refusing to write")
    header_path, raw_path = _rvol_paths(path)
    header = {
        "shape": list(vol.shape),
        "spacing_mm": [float(s) for s in vol.spacing],
        "origin_mm": [float(o) for o in vol.origin],
        "dtype": "f32",
        "byte_order": "little",
    }
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    with open(header_path, "w") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
    with open(raw_path, "wb") as f:
        f.write(payload)


def read_volume(path: str | os.PathLike) -> Volume:
    """Read an RVOL pair written by :func:`write_volume`."""
    header_path, raw_path = _rvol_paths(path)
    for p in (header_path, raw_path):
        if not os.path.exists(p):
            raise FormatError(f"missing RVOL file: {p}")
    with open(header_path) as f:
        try:
            header = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid RVOL header {header_path}: {e}") from e
    try:
        shape = tuple(int(n) for n in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header["origin_mm"])
        dtype = header["dtype"]
        byte_order = header["byte_order"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"incomplete RVOL header {header_path}: {e}") from e
    if dtype != "f32" or byte_order != "little":
        raise FormatError(f"unsupported RVOL encoding {dtype}/{byte_order} in {header_path}")
    if len(shape) != 3:
        raise FormatError(f"RVOL shape must be 3D, got {shape}")
    raw = np.fromfile(raw_path, dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise FormatError(
            f"{raw_path}: payload has {raw.size} voxels, header shape {shape} needs {expected}"
        )
    data = raw.reshape(shape)
    if not np.isfinite(data).all():
        raise FormatError(f"{raw_path}: payload contains non-finite voxels")
    return Volume(data, spacing, origin)


# ---------------------------------------------------------------------------
# Intensity and geometry operations
# ---------------------------------------------------------------------------

def clip_intensity(vol: Volume, lo: float, hi: float) -> Volume:
    """Clamp voxel intensities to [lo, hi]; geometry unchanged."""
    if not lo < hi:
        raise ValidationError(f"clip bounds must satisfy lo < hi, got ({lo}, {hi})")
    return Volume(np.clip(vol.data, lo, hi), vol.spacing, vol.origin)


def _interp_order(interp: str) -> int:
    if interp not in _INTERP_ORDERS:
        raise ValidationError(f"interp must be one of {sorted(_INTERP_ORDERS)}, got {interp!r}")
    return _INTERP_ORDERS[interp]


def _sample_to_shape(data: np.ndarray, out_shape: tuple[int, int, int], order: int) -> np.ndarray:
    """Resample ``data`` onto ``out_shape`` with the voxel-center convention."""
    if tuple(data.shape) == tuple(out_shape):
        return data.astype(np.float32).copy()
    coords_1d = []
    for n_in, n_out in zip(data.shape, out_shape):
        scale = n_in / n_out
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
        coords_1d.append(c)
    grid = np.meshgrid(*coords_1d, indexing="ij")
    if order == 0:
        idx = [np.clip(np.rint(g).astype(np.int64), 0, n - 1) for g, n in zip(grid, data.shape)]
        return data[tuple(idx)].astype(np.float32)
    out = ndimage.map_coordinates(
        data.astype(np.float64), np.stack(grid), order=order, mode="nearest", prefilter=order > 1
    )
    return out.astype(np.float32)


def resample(vol: Volume, target_spacing, interp: str = "linear") -> Volume:
    """Resample onto ``target_spacing``; physical extent preserved within one voxel."""
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ValidationError(f"target_spacing must be 3 positive values, got {target_spacing}")
    order = _interp_order(interp)
    out_shape = tuple(
        max(1, int(round(n * s / t)))
        for n, s, t in zip(vol.shape, vol.spacing, target_spacing)
    )
    data = _sample_to_shape(vol.data, out_shape, order)
    return Volume(data, target_spacing, vol.origin)


def resize(vol: Volume, target_shape, interp: str = "bspline") -> Volume:
    """Resize to an exact voxel shape; spacing rescaled to keep physical extent."""
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or any(n < 1 for n in target_shape):
        raise ValidationError(f"target_shape must be 3 values >= 1, got {target_shape}")
    order = _interp_order(interp)
    data = _sample_to_shape(vol.data, target_shape, order)
    new_spacing = tuple(
        s * n_in / n_out for s, n_in, n_out in zip(vol.spacing, vol.shape, target_shape)
    )
    return Volume(data, new_spacing, vol.origin)


def threshold_lung_mask(vol: Volume) -> Volume:
    """Extract a lung mask by thresholding below -400 HU.

    The air component touching the volume border is discarded, then the
    two largest remaining components are kept.
    """
    low = vol.data < LUNG_THRESHOLD_HU
    labels, n = ndimage.label(low)
    if n == 0:
        raise EmptyMaskError("no voxels below the lung threshold")
    border = np.zeros(vol.shape, dtype=bool)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    border_labels = np.unique(labels[border & low])
    interior = np.isin(labels, border_labels, invert=True) & low
    labels2, n2 = ndimage.label(interior)
    if n2 == 0:
        raise EmptyMaskError("no interior low-intensity component (lungs not found)")
    sizes = ndimage.sum_labels(np.ones_like(labels2), labels2, index=np.arange(1, n2 + 1))
    keep = np.argsort(sizes)[::-1][:2] + 1
    mask = np.isin(labels2, keep).astype(np.float32)
    return Volume(mask, vol.spacing, vol.origin)


def bbox_from_mask(mask: Volume) -> BBox3:
    """Tight inclusive bounding box of the nonzero voxels."""
    if not mask.is_binary():
        raise ValidationError("bbox_from_mask requires a binary mask")
    nz = np.nonzero(mask.data)
    if nz[0].size == 0:
        raise EmptyMaskError("cannot compute bounding box of an empty mask")
    mins = tuple(int(a.min()) for a in nz)
    maxs = tuple(int(a.max()) for a in nz)
    return BBox3(mins, maxs)


def rasterize_bbox(bbox: BBox3, shape, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Render a bbox as a binary volume: 1 inside (inclusive), 0 outside."""
    shape = tuple(int(n) for n in shape)
    if any(hi >= n for hi, n in zip(bbox.max_index, shape)):
        raise ValidationError(f"bbox {bbox.max_index} exceeds volume shape {shape}")
    data = np.zeros(shape, dtype=np.float32)
    data[bbox.slices()] = 1.0
    return Volume(data, spacing)


def crop_volume(vol: Volume, box: BBox3) -> Volume:
    """Crop to an inclusive box, shifting the origin accordingly."""
    if any(hi >= n for hi, n in zip(box.max_index, vol.shape)):
        raise ValidationError(f"crop box {box.max_index} exceeds volume shape {vol.shape}")
    data = vol.data[box.slices()].copy()
    origin = tuple(o + lo * s for o, lo, s in zip(vol.origin, box.min_index, vol.spacing))
    return Volume(data, vol.spacing, origin)


def crop_to_voi(vol: Volume, lung_mask: Volume, margin_mm: float = 0.0) -> tuple[Volume, BBox3]:
    """Crop to the lung-mask bounding box dilated by ``margin_mm`` (clamped)."""
    if vol.shape != lung_mask.shape:
        raise ValidationError(f"volume shape {vol.shape} != lung mask shape {lung_mask.shape}")
    box = bbox_from_mask(lung_mask)
    margins = tuple(int(np.ceil(margin_mm / s)) for s in vol.spacing)
    lo = tuple(max(0, m - d) for m, d in zip(box.min_index, margins))
    hi = tuple(min(n - 1, m + d) for m, d, n in zip(box.max_index, margins, vol.shape))
    box = BBox3(lo, hi)
    return crop_volume(vol, box), box


def preprocess(
    image: Volume,
    tumor_mask: Optional[Volume] = None,
    lung_mask: Optional[Volume] = None,
    cfg: Optional[PreprocessConfig] = None,
    sample_id: str = "",
    label: Optional[int] = None,
) -> PreprocessedSample:
    """Run the full chain: clip, resample, VOI crop, resize, bbox.

    The lung mask is computed with :func:`threshold_lung_mask` on the
    original (pre-clip) intensities when not supplied, since clipping to
    soft-tissue range destroys the air/lung contrast the threshold needs.
    Masks are carried through every geometric stage with nearest
    interpolation.  Errors are tagged with the stage that raised them.
    """
    cfg = (cfg or PreprocessConfig()).validate()

    def _stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RadpipeError as e:
            raise type(e)(f"[{name}] {e}") from e

    for name, m in (("tumor_mask", tumor_mask), ("lung_mask", lung_mask)):
        if m is not None and m.shape != image.shape:
            raise ValidationError(f"{name} shape {m.shape} != image shape {image.shape}")
        if m is not None and not m.is_binary():
            raise ValidationError(f"{name} must be binary")

    if lung_mask is None:
        lung_mask = _stage("lung_extraction", threshold_lung_mask, image)

    img = _stage("clip", clip_intensity, image, cfg.clip_low, cfg.clip_high)

    img = _stage("resample", resample, img, cfg.target_spacing, cfg.image_interp)
    lung = _stage("resample", resample, lung_mask, cfg.target_spacing, "nearest")
    tumor = None
    if tumor_mask is not None:
        tumor = _stage("resample", resample, tumor_mask, cfg.target_spacing, "nearest")

    img, crop_box = _stage("voi_crop", crop_to_voi, img, lung, cfg.voi_margin_mm)
    lung = crop_volume(lung, crop_box)
    if tumor is not None:
        tumor = crop_volume(tumor, crop_box)

    img = _stage("resize", resize, img, cfg.target_shape, cfg.image_interp)
    lung = _stage("resize", resize, lung, cfg.target_shape, cfg.mask_interp)
    bbox_vol = None
    if tumor is not None:
        tumor = _stage("resize", resize, tumor, cfg.target_shape, cfg.mask_interp)
        if tumor.data.sum() == 0:
            raise EmptyMaskError("[bbox] tumor mask vanished during preprocessing")
        box = _stage("bbox", bbox_from_mask, tumor)
        bbox_vol = rasterize_bbox(box, cfg.target_shape, tumor.spacing)

    return PreprocessedSample(
        image=img,
        tumor_mask=tumor,
        bbox_volume=bbox_vol,
        lung_mask=lung,
        crop_box=crop_box,
        fill_value=float(cfg.clip_low),
        sample_id=sample_id,
        label=label,
    )
