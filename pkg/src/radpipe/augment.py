"""Stochastic geometric augmentation of preprocessed samples.

One fused affine map (flip, then rotation, then shear, then depth
scaling, composed about the volume center in physical mm space) is
applied to the image with linear interpolation and to every mask volume
with nearest interpolation, so image and masks see the same geometry and
masks stay binary.  Out-of-field image voxels are filled with the
sample's clip floor.

Axis convention: "vertical" flips the height axis, "horizontal" flips
the width axis.  Rotation composes about depth, height, width in that
order; shear composes three elementary shears (h into d, w into h, d
into w).  Depth scaling is geometric, about the center.

Parameter draws are deterministic given (config seed, epoch, sample
index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import volio
from .errors import ValidationError
from .rng import make_rng


@dataclass
class AugmentConfig:
    p_vflip: float = 0.5
    p_hflip: float = 0.5
    rot_deg: float = 10.0
    shear_deg: float = 10.0
    depth_scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def validate(self) -> "AugmentConfig":
        for name in ("p_vflip", "p_hflip"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.rot_deg < 0 or self.shear_deg < 0:
            raise ValidationError(
                f"rotation/shear ranges must be >= 0, got ({self.rot_deg}, {self.shear_deg})"
            )
        lo, hi = self.depth_scale_range
        if not 0 < lo <= hi:
            raise ValidationError(f"depth_scale_range must satisfy 0 < low <= high, got ({lo}, {hi})")
        return self

    def to_dict(self) -> dict:
        return {
            "p_vflip": self.p_vflip,
            "p_hflip": self.p_hflip,
            "rot_deg": self.rot_deg,
            "shear_deg": self.shear_deg,
            "depth_scale_range": list(self.depth_scale_range),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        cfg = cls(
            p_vflip=float(d.get("p_vflip", 0.5)),
            p_hflip=float(d.get("p_hflip", 0.5)),
            rot_deg=float(d.get("rot_deg", 10.0)),
            shear_deg=float(d.get("shear_deg", 10.0)),
            depth_scale_range=tuple(d.get("depth_scale_range", (0.9, 1.1))),
            seed=int(d.get("seed", 0)),
        )
        return cfg.validate()


@dataclass
class AugmentParams:
    flip_v: bool = False
    flip_h: bool = False
    rot_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    shear_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    depth_scale: float = 1.0

    def is_identity(self) -> bool:
        return (
            not self.flip_v
            and not self.flip_h
            and all(a == 0 for a in self.rot_deg)
            and all(a == 0 for a in self.shear_deg)
            and self.depth_scale == 1.0
        )


def sample_params(cfg: AugmentConfig, sample_index: int, epoch: int = 0) -> AugmentParams:
    """Draw one parameter set; identical (seed, index, epoch) gives identical draws."""
    cfg.validate()
    rng = make_rng(cfg.seed, int(epoch), int(sample_index), 0xA46)
    flip_v = bool(rng.random() < cfg.p_vflip)
    flip_h = bool(rng.random() < cfg.p_hflip)
    rot = tuple(float(rng.uniform(-cfg.rot_deg, cfg.rot_deg)) for _ in range(3))
    shear = tuple(float(rng.uniform(-cfg.shear_deg, cfg.shear_deg)) for _ in range(3))
    scale = float(rng.uniform(*cfg.depth_scale_range))
    return AugmentParams(flip_v=flip_v, flip_h=flip_h, rot_deg=rot, shear_deg=shear,
                         depth_scale=scale)


def _rot_about_axis(axis: int, deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    others = [i for i in range(3) if i != axis]
    m = np.eye(3)
    m[others[0], others[0]] = c
    m[others[0], others[1]] = -s
    m[others[1], others[0]] = s
    m[others[1], others[1]] = c
    return m


def _transform_matrix(params: AugmentParams) -> np.ndarray:
    """Forward map T on physical (mm) coordinates relative to the center."""
    flip = np.diag(
        [1.0, -1.0 if params.flip_v else 1.0, -1.0 if params.flip_h else 1.0]
    )
    rot = np.eye(3)
    for axis in range(3):
        rot = rot @ _rot_about_axis(axis, params.rot_deg[axis])
    shear = np.eye(3)
    pairs = ((0, 1), (1, 2), (2, 0))  # h into d, w into h, d into w
    for (dst, src), deg in zip(pairs, params.shear_deg):
        m = np.eye(3)
        m[dst, src] = np.tan(np.deg2rad(deg))
        shear = shear @ m
    scale = np.diag([params.depth_scale, 1.0, 1.0])
    return flip @ rot @ shear @ scale


def _apply_to_array(
    data: np.ndarray,
    spacing: tuple[float, float, float],
    params: AugmentParams,
    order: int,
    cval: float,
) -> np.ndarray:
    if params.is_identity():
        return data.copy()
    t = _transform_matrix(params)
    s = np.diag(spacing)
    s_inv = np.diag([1.0 / v for v in spacing])
    m = s_inv @ np.linalg.inv(t) @ s  # output voxel coords -> input voxel coords
    center = (np.asarray(data.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - m @ center
    out = ndimage.affine_transform(
        data.astype(np.float64), m, offset=offset, order=order, mode="constant", cval=cval
    )
    return out.astype(np.float32)


def apply(
    sample: volio.PreprocessedSample,
    params: AugmentParams,
    recompute_bbox: bool = False,
) -> volio.PreprocessedSample:
    """Apply one fused affine transform to image, masks and bbox volume.

    ``recompute_bbox=True`` re-derives the bbox volume from the
    transformed tumor mask instead of warping the original box.
    """
    img = sample.image
    if params.is_identity() and not recompute_bbox:
        return replace(
            sample,
            image=img.copy(),
            tumor_mask=sample.tumor_mask.copy() if sample.tumor_mask else None,
            bbox_volume=sample.bbox_volume.copy() if sample.bbox_volume else None,
            lung_mask=sample.lung_mask.copy() if sample.lung_mask else None,
        )

    def warp_mask(vol):
        if vol is None:
            return None
        if vol.shape != img.shape:
            raise ValidationError(f"mask shape {vol.shape} != image shape {img.shape}")
        data = _apply_to_array(vol.data, img.spacing, params, order=0, cval=0.0)
        return volio.Volume(data, vol.spacing, vol.origin)

    new_image = volio.Volume(
        _apply_to_array(img.data, img.spacing, params, order=1, cval=sample.fill_value),
        img.spacing,
        img.origin,
    )
    new_tumor = warp_mask(sample.tumor_mask)
    new_lung = warp_mask(sample.lung_mask)
    if recompute_bbox and new_tumor is not None and new_tumor.data.sum() > 0:
        box = volio.bbox_from_mask(new_tumor)
        new_bbox = volio.rasterize_bbox(box, new_tumor.shape, new_tumor.spacing)
    else:
        new_bbox = warp_mask(sample.bbox_volume)
    return replace(
        sample, image=new_image, tumor_mask=new_tumor, bbox_volume=new_bbox, lung_mask=new_lung
    )
