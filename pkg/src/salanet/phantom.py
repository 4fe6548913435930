"""Synthetic two-view cardiac phantoms with ground truth.

The heart is a set of analytic shapes in a heart-local frame whose long axis is
parallel to the SA slice axis:

* LV blood pool: ellipsoid;
* LV myocardium: shell of constant thickness around the pool;
* RV blood pool: ellipsoid displaced laterally from the LV, with the LV
  epicardium (plus a septal gap) carved out, giving a crescent.

The label at any physical point is computed in closed form, so the SA stack and
the LA image are two samplings of one and the same 3D field: SA slices are
planes perpendicular to the long axis, the LA image is the plane containing the
long axis and the LV-RV direction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .dataio import PHASES, CardiacStudy, LabelMap, PhaseData, StudyEntry, VolumeGrid, save_volume, write_manifest
from .exceptions import ValidationError

logger = logging.getLogger(__name__)

PATHOLOGIES = (
    "Normal subjects",
    "Dilated Left Ventricle",
    "Hypertrophic Cardiomyopathy",
    "Congenital Arrhythmogenesis",
    "Tetralogy of Fallot",
    "Interatrial Communication",
    "Dilated Right Ventricle",
    "Tricuspidal Regurgitation",
)
VENDORS = ("Siemens", "Philips", "General Electric")

BG, LV_POOL, LV_MYO, RV = 0, 1, 2, 3


@dataclass
class PhantomParams:
    sa_shape: Tuple[int, int, int] = (10, 288, 288)
    sa_spacing: Tuple[float, float, float] = (10.0, 1.0, 1.0)
    la_shape: Tuple[int, int] = (352, 352)
    la_spacing: Tuple[float, float] = (1.0, 1.0)
    la_thickness: float = 8.0
    # heart placement, world mm (slice, row, col) relative to the SA field-of-view centre
    lv_center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    lv_radii: Tuple[float, float, float] = (36.0, 22.0, 22.0)
    myo_thickness: float = 8.0
    rv_offset: float = 36.0
    rv_radii: Tuple[float, float, float] = (34.0, 34.0, 22.0)
    septal_gap: float = 1.5
    contraction: Tuple[float, float] = (1.0, 0.8)  # ED, ES
    body_radius: float = 120.0
    intensity: dict = field(default_factory=lambda: {"bg": 0.05, "body": 0.35, "blood": 0.9, "myo": 0.15})
    noise_sigma: float = 0.05
    # jitter ranges: uniform in [-t, t] mm, [-r, r] deg, [1-s, 1+s]
    jitter_translation: float = 8.0
    jitter_rotation: float = 20.0
    jitter_scale: float = 0.1
    seed: int = 0

    def validate(self):
        if min(self.lv_radii) <= 0 or min(self.rv_radii) <= 0 or self.myo_thickness <= 0:
            raise ValidationError("phantom radii and myocardial thickness must be positive")
        ed, es = self.contraction
        if not (0 < es < ed <= 1):
            raise ValidationError(f"contraction factors must satisfy 0 < ES < ED <= 1, got {self.contraction}")
        if min(self.sa_spacing) <= 0 or min(self.la_spacing) <= 0:
            raise ValidationError("phantom spacing must be positive")


@dataclass
class HeartPose:
    center: np.ndarray  # world mm (slice, row, col)
    angle: float  # in-plane rotation, radians
    scale: float

    @property
    def lateral(self) -> np.ndarray:
        """Unit in-plane direction from LV towards RV, as (row, col)."""
        return np.array([np.sin(self.angle), np.cos(self.angle)])


def sample_pose(params: PhantomParams, rng: np.random.Generator) -> HeartPose:
    t, r, s = params.jitter_translation, params.jitter_rotation, params.jitter_scale
    shift = rng.uniform(-t, t, size=3) if t > 0 else np.zeros(3)
    shift[0] = 0.0  # keep the heart centred along the long axis
    angle = np.deg2rad(rng.uniform(-r, r)) if r > 0 else 0.0
    scale = rng.uniform(1 - s, 1 + s) if s > 0 else 1.0
    return HeartPose(np.asarray(params.lv_center, float) + shift, float(angle), float(scale))


def _inside(coords, radii):
    q = sum((c / r) ** 2 for c, r in zip(coords, radii))
    return q <= 1.0


def label_at(z, y, x, params: PhantomParams, pose: HeartPose, phase: str) -> np.ndarray:
    """Challenge-convention label at world points (arrays broadcast together)."""
    k = params.contraction[PHASES.index(phase)] * pose.scale
    dz, dy, dx = z - pose.center[0], y - pose.center[1], x - pose.center[2]
    # heart frame: a along LV->RV, b perpendicular in-plane
    ca, sa = np.cos(pose.angle), np.sin(pose.angle)
    a = dx * ca + dy * sa
    b = -dx * sa + dy * ca

    lz, lr, _ = (r * k for r in params.lv_radii)
    lr_b = params.lv_radii[2] * k
    th = params.myo_thickness * pose.scale
    pool = _inside((dz, b, a), (lz, lr, lr_b))
    epi = _inside((dz, b, a), (lz + th, lr + th, lr_b + th))
    gap = params.septal_gap
    carve = _inside((dz, b, a), (lz + th + gap, lr + th + gap, lr_b + th + gap))
    rz, rb, ra = (r * k for r in params.rv_radii)
    rv_shape = _inside((dz, b, a - params.rv_offset * pose.scale), (rz, rb, ra))

    out = np.zeros(np.broadcast(z, y, x).shape, dtype=np.uint8)
    out[rv_shape & ~carve] = RV
    out[epi] = LV_MYO
    out[pool] = LV_POOL
    return out


def _sa_points(params: PhantomParams):
    n, h, w = params.sa_shape
    sz, sy, sx = params.sa_spacing
    z = (np.arange(n) - (n - 1) / 2) * sz
    y = (np.arange(h) - (h - 1) / 2) * sy
    x = (np.arange(w) - (w - 1) / 2) * sx
    return z[:, None, None], y[None, :, None], x[None, None, :]


def la_plane_points(params: PhantomParams, pose: HeartPose):
    """World coordinates of the LA pixel centres.

    Rows run along the long axis, columns along the LV->RV direction, and the
    plane passes through the LV centre.
    """
    h, w = params.la_shape
    sr, sc = params.la_spacing
    u = (np.arange(h) - (h - 1) / 2) * sr
    v = (np.arange(w) - (w - 1) / 2) * sc
    z = pose.center[0] + u[:, None] + 0 * v[None, :]
    ly, lx = pose.lateral
    y = pose.center[1] + v[None, :] * ly + 0 * u[:, None]
    x = pose.center[2] + v[None, :] * lx + 0 * u[:, None]
    return z, y, x


def _heart_extent(params: PhantomParams, pose: HeartPose) -> Tuple[float, float]:
    """Conservative (long-axis, in-plane) half-extents of the heart around its centre."""
    k = max(params.contraction) * pose.scale
    th = params.myo_thickness * pose.scale
    long_half = max(params.lv_radii[0] * k + th, params.rv_radii[0] * k)
    inplane = max(max(params.lv_radii[1:]) * k + th,
                  params.rv_offset * pose.scale + max(params.rv_radii[1:]) * k)
    return long_half, inplane


def _check_fits(params: PhantomParams, pose: HeartPose):
    long_half, inplane = _heart_extent(params, pose)
    n, h, w = params.sa_shape
    sz, sy, sx = params.sa_spacing
    c = pose.center
    if abs(c[0]) + long_half > n * sz / 2:
        raise ValidationError("phantom heart exceeds the SA grid along the slice axis")
    if abs(c[1]) + inplane > h * sy / 2 or abs(c[2]) + inplane > w * sx / 2:
        raise ValidationError("phantom heart exceeds the SA grid in-plane")
    if long_half > params.la_shape[0] * params.la_spacing[0] / 2 or inplane > params.la_shape[1] * params.la_spacing[1] / 2:
        raise ValidationError("phantom heart exceeds the LA grid")


def _render(labels: np.ndarray, inplane_radius: np.ndarray, params: PhantomParams, rng) -> np.ndarray:
    it = params.intensity
    img = np.where(inplane_radius <= params.body_radius, it["body"], it["bg"]).astype(np.float64)
    img = np.broadcast_to(img, labels.shape).copy()
    img[(labels == LV_POOL) | (labels == RV)] = it["blood"]
    img[labels == LV_MYO] = it["myo"]
    if params.noise_sigma > 0:
        img += rng.normal(0.0, params.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def generate_phantom(params: Optional[PhantomParams] = None, subject_id: str = "phantom",
                     pathology: str = PATHOLOGIES[0], vendor: str = VENDORS[0]) -> CardiacStudy:
    """Render one study (ED + ES, SA + LA, images and challenge-convention labels)."""
    params = params or PhantomParams()
    params.validate()
    rng = np.random.default_rng(params.seed)
    pose = sample_pose(params, rng)
    _check_fits(params, pose)

    z, y, x = _sa_points(params)
    sa_radius = np.hypot(y, x)
    lz, ly, lx = la_plane_points(params, pose)
    la_radius = np.abs((np.arange(params.la_shape[1]) - (params.la_shape[1] - 1) / 2) * params.la_spacing[1])[None, :]
    la_spacing = (params.la_thickness,) + tuple(params.la_spacing)

    phases = {}
    for phase in PHASES:
        sa_lab = label_at(z, y, x, params, pose, phase)
        la_lab = label_at(lz, ly, lx, params, pose, phase)[None]
        sa_img = _render(sa_lab, sa_radius, params, rng)
        la_img = _render(la_lab, la_radius[None], params, rng)
        phases[phase] = PhaseData(
            sa_image=VolumeGrid(sa_img, params.sa_spacing),
            la_image=VolumeGrid(la_img, la_spacing),
            sa_labels=LabelMap(sa_lab, params.sa_spacing),
            la_labels=LabelMap(la_lab, la_spacing),
        )
    return CardiacStudy(subject_id, phases, pathology=pathology, vendor=vendor)


def phantom_pose(params: PhantomParams) -> HeartPose:
    """The pose :func:`generate_phantom` draws for ``params`` (same RNG stream)."""
    return sample_pose(params, np.random.default_rng(params.seed))


def generate_dataset(n: int, seed: int, out_dir, params: Optional[PhantomParams] = None,
                     cohort: str = "training", prefix: str = "P") -> Path:
    """Write ``n`` phantom studies plus ``manifest.csv`` into ``out_dir``.

    Subject ``i`` uses seed ``seed + i``; pathology and vendor tags cycle.
    """
    if int(n) < 1:
        raise ValidationError(f"subject count must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = params or PhantomParams()
    entries = []
    for i in range(int(n)):
        sid = f"{prefix}{i:03d}"
        pathology = PATHOLOGIES[i % len(PATHOLOGIES)]
        vendor = VENDORS[i % len(VENDORS)]
        study = generate_phantom(replace(base, seed=int(seed) + i), sid, pathology, vendor)
        sdir = out_dir / sid
        sdir.mkdir(exist_ok=True)
        paths = {}
        for phase, pd in study.phases.items():
            for view, img, lab in (("SA", pd.sa_image, pd.sa_labels), ("LA", pd.la_image, pd.la_labels)):
                key = f"{view.lower()}_{phase.lower()}"
                paths[key] = sdir / f"{sid}_{view}_{phase}.nii.gz"
                paths[key + "_gt"] = sdir / f"{sid}_{view}_{phase}_gt.nii.gz"
                save_volume(img, paths[key])
                save_volume(lab, paths[key + "_gt"])
        entries.append(StudyEntry(sid, vendor, pathology, cohort, **paths))
        logger.debug("wrote phantom %s", sid)
    return write_manifest(entries, out_dir / "manifest.csv")
