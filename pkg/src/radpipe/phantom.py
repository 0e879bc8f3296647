"""Synthetic CT-like phantoms with ground-truth masks and mutation labels.

Each phantom is a body ellipsoid of soft tissue (~40 HU) in air
(~-1000 HU) containing two mirrored lung ellipsoids, one of which hosts
a single ellipsoidal nodule.  Nodule voxels carry a sinusoidal texture
along the depth axis; the texture's spatial frequency (cycles/mm)
encodes the binary mutation label via ``label = 1 iff freq >
label_rule_threshold``.  Frequency rather than amplitude carries the
signal, so pooled deep features must capture spatial pattern to
classify.

All randomness comes from PCG64 (see :mod:`radpipe.rng`), so a cohort is
reproducible bit-for-bit from (spec, n, seed).  Cohort samples use
per-sample seeds ``seed + index``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import volio
from .errors import ValidationError
from .rng import make_rng

AIR_HU = -1000.0
TISSUE_HU = 40.0
TEXTURE_AMPLITUDE_HU = 180.0

# lung/body layout as fractions of the physical volume extent
BODY_RADII_FRAC = (0.47, 0.47, 0.47)
LUNG_RADII_FRAC = (0.33, 0.25, 0.18)
LUNG_CENTER_OFFSET_FRAC = 0.22  # lateral (width) offset of each lung center
# stratified cohort draws keep this relative margin away from the label
# threshold so desk-scale cohorts stay learnable
FREQ_MARGIN_FRAC = 0.15


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    lung_intensity_range: tuple[float, float] = (-900.0, -700.0)
    nodule_radius_range_mm: tuple[float, float] = (6.0, 10.0)
    nodule_texture_freq_range: tuple[float, float] = (0.04, 0.20)
    label_rule_threshold: float = 0.12
    noise_sigma: float = 25.0

    def validate(self) -> "PhantomSpec":
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.shape) != 3 or any(n < 16 for n in self.shape):
            raise ValidationError(f"shape: components must be >= 16, got {self.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing: components must be > 0, got {self.spacing}")
        for name in ("lung_intensity_range", "nodule_radius_range_mm", "nodule_texture_freq_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValidationError(f"{name}: low must be <= high, got ({lo}, {hi})")
        if self.nodule_radius_range_mm[0] <= 0:
            raise ValidationError(
                f"nodule_radius_range_mm: radii must be positive, got {self.nodule_radius_range_mm}"
            )
        if self.nodule_texture_freq_range[0] < 0:
            raise ValidationError(
                f"nodule_texture_freq_range: frequencies must be >= 0, "
                f"got {self.nodule_texture_freq_range}"
            )
        f_lo, f_hi = self.nodule_texture_freq_range
        if not f_lo <= self.label_rule_threshold <= f_hi:
            raise ValidationError(
                f"label_rule_threshold: {self.label_rule_threshold} outside "
                f"nodule_texture_freq_range ({f_lo}, {f_hi})"
            )
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma: must be >= 0, got {self.noise_sigma}")
        extent = tuple(n * s for n, s in zip(self.shape, self.spacing))
        min_lung_radius = min(f * e for f, e in zip(LUNG_RADII_FRAC, extent))
        if self.nodule_radius_range_mm[1] > 0.6 * min_lung_radius:
            raise ValidationError(
                f"nodule_radius_range_mm: max radius {self.nodule_radius_range_mm[1]} mm is too "
                f"large for the lung geometry (min lung radius {min_lung_radius:.1f} mm)"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "lung_intensity_range": list(self.lung_intensity_range),
            "nodule_radius_range_mm": list(self.nodule_radius_range_mm),
            "nodule_texture_freq_range": list(self.nodule_texture_freq_range),
            "label_rule_threshold": self.label_rule_threshold,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        spec = cls(
            shape=tuple(d["shape"]),
            spacing=tuple(d["spacing"]),
            lung_intensity_range=tuple(d["lung_intensity_range"]),
            nodule_radius_range_mm=tuple(d["nodule_radius_range_mm"]),
            nodule_texture_freq_range=tuple(d["nodule_texture_freq_range"]),
            label_rule_threshold=float(d["label_rule_threshold"]),
            noise_sigma=float(d["noise_sigma"]),
        )
        return spec.validate()


@dataclass
class PhantomSample:
    image: volio.Volume
    tumor_mask: volio.Volume
    lung_mask: volio.Volume
    label: int
    seed: int
    texture_freq: float
    nodule_radii_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class CohortEntry:
    sample_id: str
    image: str
    tumor_mask: str
    lung_mask: str
    label: int
    seed: int
    texture_freq: float


@dataclass
class CohortManifest:
    spec: PhantomSpec
    entries: list[CohortEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "entries": [vars(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortManifest":
        return cls(
            spec=PhantomSpec.from_dict(d["spec"]),
            entries=[CohortEntry(**e) for e in d["entries"]],
        )


def label_rule(freq: float, spec: PhantomSpec) -> int:
    return int(freq > spec.label_rule_threshold)


def _voxel_centers_mm(shape, spacing):
    axes = [(np.arange(n, dtype=np.float64) + 0.5) * s for n, s in zip(shape, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(coords, center, radii) -> np.ndarray:
    q = np.zeros_like(coords[0])
    for c, mu, r in zip(coords, center, radii):
        q += ((c - mu) / r) ** 2
    return q <= 1.0


def _draw_texture_freq(spec: PhantomSpec, rng: np.random.Generator,
                       target_label: Optional[int]) -> float:
    f_lo, f_hi = spec.nodule_texture_freq_range
    thr = spec.label_rule_threshold
    if target_label is None or f_lo == f_hi:
        return float(rng.uniform(f_lo, f_hi))
    margin = FREQ_MARGIN_FRAC * (f_hi - f_lo)
    if target_label == 1:
        lo, hi = min(thr + margin, f_hi), f_hi
    else:
        lo, hi = f_lo, max(thr - margin, f_lo)
    if hi <= lo:
        # degenerate interval (threshold at a range edge): fall back to the
        # full range and let the rule decide
        return float(rng.uniform(f_lo, f_hi))
    return float(rng.uniform(lo, hi))


def generate_phantom(spec: PhantomSpec, seed: int,
                     _target_label: Optional[int] = None) -> PhantomSample:
    """Generate one phantom; deterministic for fixed (spec, seed)."""
    spec.validate()
    rng = make_rng(seed)
    shape, spacing = spec.shape, spec.spacing
    extent = tuple(n * s for n, s in zip(shape, spacing))
    center = tuple(e / 2 for e in extent)
    coords = _voxel_centers_mm(shape, spacing)

    body_radii = tuple(f * e for f, e in zip(BODY_RADII_FRAC, extent))
    lung_radii = tuple(f * e for f, e in zip(LUNG_RADII_FRAC, extent))
    offset = LUNG_CENTER_OFFSET_FRAC * extent[2]
    lung_centers = [
        (center[0], center[1], center[2] - offset),
        (center[0], center[1], center[2] + offset),
    ]

    body = _ellipsoid(coords, center, body_radii)
    lungs = [_ellipsoid(coords, c, lung_radii) for c in lung_centers]
    lung_mask = (lungs[0] | lungs[1]) & body

    # draw sample parameters in a fixed order so streams stay stable
    lung_hu = float(rng.uniform(*spec.lung_intensity_range))
    freq = _draw_texture_freq(spec, rng, _target_label)
    radii = tuple(float(rng.uniform(*spec.nodule_radius_range_mm)) for _ in range(3))
    host = int(rng.integers(0, 2))

    # rejection-sample a nodule center whose bounding corners stay inside
    # the host lung (conservative containment test)
    lc, lr = lung_centers[host], lung_radii
    nodule_center = None
    for _ in range(1000):
        cand = tuple(rng.uniform(c - r, c + r) for c, r in zip(lc, lr))
        q = sum(((abs(c - m) + rr) / r) ** 2 for c, m, rr, r in zip(cand, lc, radii, lr))
        if q <= 1.0:
            nodule_center = cand
            break
    if nodule_center is None:
        raise ValidationError(
            "nodule_radius_range_mm: could not place a nodule inside the lung; "
            "reduce the nodule radius range"
        )
    tumor_mask = _ellipsoid(coords, nodule_center, radii)

    image = np.full(shape, AIR_HU, dtype=np.float64)
    image[body] = TISSUE_HU
    image[lung_mask] = lung_hu
    # sinusoidal texture along depth on a soft-tissue nodule
    phase = float(rng.uniform(0, 2 * np.pi))
    texture = TISSUE_HU + TEXTURE_AMPLITUDE_HU * np.sin(
        2 * np.pi * freq * coords[0][tumor_mask] + phase
    )
    image[tumor_mask] = texture
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=shape)

    label = label_rule(freq, spec)
    return PhantomSample(
        image=volio.Volume(image.astype(np.float32), spacing),
        tumor_mask=volio.Volume(tumor_mask.astype(np.float32), spacing),
        lung_mask=volio.Volume(lung_mask.astype(np.float32), spacing),
        label=label,
        seed=int(seed),
        texture_freq=freq,
        nodule_radii_mm=radii,
    )


def _cohort_target_labels(n: int) -> list[int]:
    # alternate 0/1 so any prefix is balanced within one sample
    return [i % 2 for i in range(n)]


def generate_cohort(spec: PhantomSpec, n: int, seed: int, out_dir: str | os.PathLike) -> CohortManifest:
    """Generate ``n`` phantoms on disk plus ``manifest.json``.

    Labels are stratified (balance within one of n/2) by drawing texture
    frequencies from the sub-range on the requested side of the label
    threshold.
    """
    spec.validate()
    if n < 2:
        raise ValidationError(f"cohort size must be >= 2, got {n}")
    out_dir = str(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create cohort directory {out_dir}: {e}") from e

    targets = _cohort_target_labels(n)
    entries = []
    for i in range(n):
        sample_seed = int(seed) + i
        sample = generate_phantom(spec, sample_seed, _target_label=targets[i])
        sid = f"sample_{i:04d}"
        paths = {}
        for part, vol in (
            ("image", sample.image),
            ("tumor", sample.tumor_mask),
            ("lung", sample.lung_mask),
        ):
            rel = f"{sid}_{part}"
            volio.write_volume(vol, os.path.join(out_dir, rel))
            paths[part] = rel
        entries.append(
            CohortEntry(
                sample_id=sid,
                image=paths["image"],
                tumor_mask=paths["tumor"],
                lung_mask=paths["lung"],
                label=sample.label,
                seed=sample_seed,
                texture_freq=sample.texture_freq,
            )
        )

    manifest = CohortManifest(spec=spec, entries=entries)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def write_manifest(manifest: CohortManifest, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: str | os.PathLike) -> CohortManifest:
    if not os.path.exists(path):
        raise OSError(f"manifest not found: {path}")
    with open(path) as f:
        d = json.load(f)
    manifest = CohortManifest.from_dict(d)
    seeds = [e.seed for e in manifest.entries]
    if len(set(seeds)) != len(seeds):
        raise ValidationError("manifest entry seeds must be unique")
    for e in manifest.entries:
        if e.label not in (0, 1):
            raise ValidationError(f"manifest label must be 0 or 1, got {e.label}")
    return manifest


def manifest_hash(manifest: CohortManifest) -> str:
    blob = json.dumps(manifest.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
