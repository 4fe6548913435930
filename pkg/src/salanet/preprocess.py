"""Bring raw studies onto the fixed 1.25 mm, 256x256 in-plane training grid.

Images are interpolated linearly, label maps by nearest neighbour.  The slice
axis is never resampled.  Every geometric step is recorded in a
:class:`GeometryRecord` so predictions can be mapped back onto the original
acquisition grid with :func:`invert_geometry`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .dataio import (
    CHALLENGE_LABELS, INTERNAL_LABELS, PHASES, CardiacStudy, LabelMap, VolumeGrid,
    check_labels, load_volume, save_volume,
)
from .exceptions import DegenerateInput, FormatError, NotFound, ValidationError

logger = logging.getLogger(__name__)

TARGET_SPACING = (1.25, 1.25)
TARGET_SIZE = 256

# challenge label -> internal label: LV pool and myocardium merge, RV becomes 2
_REMAP_LUT = np.array([0, 1, 1, 2], dtype=np.uint8)


@dataclass
class GeometryRecord:
    original_shape: Tuple[int, int]
    original_spacing: Tuple[float, float]
    resampled_shape: Tuple[int, int]
    pad: Tuple[Tuple[int, int], Tuple[int, int]]
    crop: Tuple[Tuple[int, int], Tuple[int, int]]
    target_spacing: Tuple[float, float] = TARGET_SPACING
    target_size: int = TARGET_SIZE

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeometryRecord":
        d = json.loads(text)
        return cls(
            original_shape=tuple(d["original_shape"]),
            original_spacing=tuple(d["original_spacing"]),
            resampled_shape=tuple(d["resampled_shape"]),
            pad=tuple(tuple(p) for p in d["pad"]),
            crop=tuple(tuple(c) for c in d["crop"]),
            target_spacing=tuple(d["target_spacing"]),
            target_size=int(d["target_size"]),
        )

    def forward_shape(self) -> Tuple[int, int]:
        """In-plane shape produced by replaying the recorded steps."""
        out = []
        for ax in range(2):
            n = self.resampled_shape[ax] + sum(self.pad[ax]) - sum(self.crop[ax])
            out.append(n)
        return tuple(out)


def _resampled_shape(shape, spacing, target):
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target))


def _rescale(data, out_inplane, scale, order):
    """Axis-aligned in-plane rescale with voxel centres aligned at the borders.

    Output voxel ``i`` samples input coordinate ``(i + 0.5) * scale - 0.5``.
    """
    matrix = np.diag([1.0, scale[0], scale[1]])
    offset = np.array([0.0, 0.5 * scale[0] - 0.5, 0.5 * scale[1] - 0.5])
    out_shape = (data.shape[0],) + tuple(out_inplane)
    return ndimage.affine_transform(
        data, matrix, offset=offset, output_shape=out_shape, order=order, mode="nearest", prefilter=False)


def resample_inplane(grid: VolumeGrid, target_spacing=TARGET_SPACING, mode: str = "linear") -> VolumeGrid:
    """Resample rows/cols to ``target_spacing``; the slice axis is left alone."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 2 or not all(t > 0 for t in target_spacing):
        raise ValidationError(f"target spacing must be two positive values, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    is_label = isinstance(grid, LabelMap)
    if is_label and mode != "nearest":
        raise ValidationError("label maps must be resampled with mode='nearest'")

    in_sp = grid.spacing[1:]
    out_inplane = _resampled_shape(grid.shape[1:], in_sp, target_spacing)
    spacing = (grid.spacing[0],) + target_spacing
    if out_inplane == grid.shape[1:] and np.allclose(in_sp, target_spacing, rtol=0, atol=1e-9):
        return grid.with_data(grid.data.copy(), spacing=spacing)

    scale = (target_spacing[0] / in_sp[0], target_spacing[1] / in_sp[1])
    if mode == "nearest":
        data = _rescale(grid.data, out_inplane, scale, order=0).astype(grid.data.dtype)
    else:
        src = grid.data if np.issubdtype(grid.data.dtype, np.floating) else grid.data.astype(np.float32)
        data = _rescale(src, out_inplane, scale, order=1)
    return grid.with_data(data, spacing=spacing)


def _split(n):
    return n // 2, n - n // 2


def crop_or_pad(grid: VolumeGrid, target: int = TARGET_SIZE, original: Optional[VolumeGrid] = None):
    """Centre-crop or zero-pad rows/cols to ``target`` x ``target``.

    Odd remainders put the extra voxel on the high side.  ``original`` is the
    pre-resampling grid, used only to fill the geometry record; it defaults to
    ``grid`` itself.
    """
    data = grid.data
    pads, crops = [], []
    for n in data.shape[1:]:
        if n < target:
            pads.append(_split(target - n))
            crops.append((0, 0))
        else:
            pads.append((0, 0))
            crops.append(_split(n - target))
    (cr0, cr1), (cc0, cc1) = crops
    data = data[:, cr0:data.shape[1] - cr1, cc0:data.shape[2] - cc1]
    if any(sum(p) for p in pads):
        data = np.pad(data, ((0, 0), pads[0], pads[1]), mode="constant")
    else:
        data = data.copy()

    oz, oy, ox = grid.origin
    _, sy, sx = grid.spacing
    origin = (oz, oy + (crops[0][0] - pads[0][0]) * sy, ox + (crops[1][0] - pads[1][0]) * sx)
    src = original if original is not None else grid
    rec = GeometryRecord(
        original_shape=tuple(src.shape[1:]),
        original_spacing=tuple(src.spacing[1:]),
        resampled_shape=tuple(grid.shape[1:]),
        pad=tuple(tuple(p) for p in pads),
        crop=tuple(tuple(c) for c in crops),
        target_spacing=tuple(grid.spacing[1:]),
        target_size=target,
    )
    return grid.with_data(data, origin=origin), rec


def zscore(grid: VolumeGrid) -> VolumeGrid:
    """Normalise the whole volume to zero mean and unit (population) variance."""
    x = grid.data.astype(np.float64)
    if x.size < 2:
        raise DegenerateInput("z-score needs at least two voxels")
    mu = x.mean()
    sigma = x.std()
    if not np.isfinite(sigma) or sigma <= 0:
        raise DegenerateInput("constant volume has zero variance")
    out = (x - mu) / sigma
    if grid.data.dtype == np.float32:
        out = out.astype(np.float32)
    return grid.with_data(out)


def replicate_la(la: VolumeGrid, n_slices: int, slice_spacing: Optional[float] = None) -> VolumeGrid:
    """Stack ``n_slices`` copies of the single LA slice.

    ``slice_spacing`` (the SA slice spacing) is only recorded in the output
    geometry, the LA image has no physical extent along that axis.
    """
    if la.n_slices != 1:
        raise ValidationError(f"LA input must have exactly one slice, got {la.n_slices}")
    if int(n_slices) < 1:
        raise ValidationError(f"n_slices must be >= 1, got {n_slices}")
    data = np.repeat(la.data, int(n_slices), axis=0)
    spacing = la.spacing if slice_spacing is None else (float(slice_spacing),) + la.spacing[1:]
    return la.with_data(data, spacing=spacing)


def remap_labels(labels: LabelMap) -> LabelMap:
    """Challenge labels {0,1,2,3} -> internal labels {0,1,2} (0->0, 1->1, 2->1, 3->2)."""
    data = np.asarray(labels.data)
    if data.size and (data.min() < 0 or data.max() > 3):
        check_labels(data, CHALLENGE_LABELS)
    out = _REMAP_LUT[data.astype(np.intp)]
    return LabelMap(out, labels.spacing, labels.origin, header=labels.header, label_set=INTERNAL_LABELS)


def invert_geometry(labels: LabelMap, rec: GeometryRecord) -> LabelMap:
    """Map a label map on the 256x256 grid back onto the original in-plane grid.

    Voxels that were cropped away on the way in come back as background.
    """
    data = np.asarray(labels.data)
    if data.ndim != 3 or tuple(data.shape[1:]) != tuple(rec.forward_shape()):
        raise ValidationError(
            f"label shape {data.shape} inconsistent with geometry record (expects in-plane {rec.forward_shape()})")
    (pr0, pr1), (pc0, pc1) = rec.pad
    (cr0, cr1), (cc0, cc1) = rec.crop
    inner = data[:, pr0:data.shape[1] - pr1, pc0:data.shape[2] - pc1]
    resampled = np.zeros((data.shape[0],) + tuple(rec.resampled_shape), dtype=data.dtype)
    resampled[:, cr0:rec.resampled_shape[0] - cr1, cc0:rec.resampled_shape[1] - cc1] = inner

    orig_shape = tuple(rec.original_shape)
    if orig_shape == tuple(rec.resampled_shape) and np.allclose(rec.original_spacing, rec.target_spacing):
        out = resampled
    else:
        scale = (rec.original_spacing[0] / rec.target_spacing[0], rec.original_spacing[1] / rec.target_spacing[1])
        out = _rescale(resampled, orig_shape, scale, order=0).astype(data.dtype)
    spacing = (labels.spacing[0],) + tuple(rec.original_spacing)
    return LabelMap(out, spacing, labels.origin, header=labels.header, label_set=labels.label_set)


# --------------------------------------------------------------------------- studies


@dataclass
class PreprocessedPhase:
    sa_image: VolumeGrid
    la_image: VolumeGrid
    sa_geometry: GeometryRecord
    la_geometry: GeometryRecord
    sa_labels: Optional[LabelMap] = None
    la_labels: Optional[LabelMap] = None


@dataclass
class PreprocessedStudy:
    subject_id: str
    phases: Dict[str, PreprocessedPhase]
    pathology: str = ""
    vendor: str = ""
    # original (pre-preprocessing) geometry, needed to write predictions
    source: Dict[str, Dict[str, VolumeGrid]] = field(default_factory=dict, repr=False)

    @property
    def n_slices(self) -> int:
        return self.phases[PHASES[0]].sa_image.n_slices

    @property
    def has_labels(self) -> bool:
        return all(p.sa_labels is not None and p.la_labels is not None for p in self.phases.values())


def _safe_zscore(grid: VolumeGrid, what: str) -> VolumeGrid:
    try:
        return zscore(grid)
    except DegenerateInput:
        logger.warning("%s is constant; mapping to zeros", what)
        return grid.with_data(np.zeros(grid.shape, dtype=np.float32))


def _image_geometry(image: VolumeGrid):
    img = image.with_data(image.data.astype(np.float32))
    res = resample_inplane(img, TARGET_SPACING, "linear")
    return crop_or_pad(res, TARGET_SIZE, original=image)


def _label_geometry(labels: LabelMap) -> LabelMap:
    res = resample_inplane(labels, TARGET_SPACING, "nearest")
    cropped, _ = crop_or_pad(res, TARGET_SIZE)
    return remap_labels(cropped)


def preprocess_study(study: CardiacStudy) -> PreprocessedStudy:
    """resample -> crop/pad -> z-score for images; nearest resample -> crop/pad -> remap for labels.

    The LA slice is replicated to the SA slice count after the geometric steps.
    """
    phases = {}
    source = {}
    for phase, pd in study.phases.items():
        sa, sa_rec = _image_geometry(pd.sa_image)
        sa = _safe_zscore(sa, f"{study.subject_id} SA-{phase}")
        n = sa.n_slices

        la, la_rec = _image_geometry(pd.la_image)
        la = replicate_la(la, n, slice_spacing=sa.spacing[0])
        la = _safe_zscore(la, f"{study.subject_id} LA-{phase}")

        sa_lab = _label_geometry(pd.sa_labels) if pd.sa_labels is not None else None
        la_lab = None
        if pd.la_labels is not None:
            la_lab = replicate_la(_label_geometry(pd.la_labels), n, slice_spacing=sa.spacing[0])
        phases[phase] = PreprocessedPhase(sa, la, sa_rec, la_rec, sa_lab, la_lab)
        source[phase] = {"SA": pd.sa_image, "LA": pd.la_image}
    return PreprocessedStudy(study.subject_id, phases, pathology=study.pathology, vendor=study.vendor,
                             source=source)


# --------------------------------------------------------------------------- cache


def save_preprocessed(pstudy: PreprocessedStudy, directory) -> Path:
    """Cache a preprocessed study as NIfTI plus JSON geometry sidecars.

    The LA volume is stored as its single distinct slice and re-replicated on load.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"subject_id": pstudy.subject_id, "pathology": pstudy.pathology, "vendor": pstudy.vendor,
            "n_slices": pstudy.n_slices, "has_labels": pstudy.has_labels, "format_version": 1,
            "source": {phase: {view: {"shape": list(g.shape), "spacing": list(g.spacing), "origin": list(g.origin)}
                               for view, g in views.items()} for phase, views in pstudy.source.items()}}
    (directory / "study.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for phase, pp in pstudy.phases.items():
        p = phase.lower()
        save_volume(pp.sa_image, directory / f"sa_{p}.nii.gz")
        save_volume(pp.la_image.with_data(pp.la_image.data[:1]), directory / f"la_{p}.nii.gz")
        (directory / f"sa_{p}_geometry.json").write_text(pp.sa_geometry.to_json() + "\n")
        (directory / f"la_{p}_geometry.json").write_text(pp.la_geometry.to_json() + "\n")
        if pp.sa_labels is not None:
            save_volume(pp.sa_labels, directory / f"sa_{p}_gt.nii.gz")
        if pp.la_labels is not None:
            save_volume(pp.la_labels.with_data(pp.la_labels.data[:1]), directory / f"la_{p}_gt.nii.gz")
    return directory


def load_preprocessed(directory) -> PreprocessedStudy:
    directory = Path(directory)
    meta_path = directory / "study.json"
    if not meta_path.is_file():
        raise NotFound(f"no preprocessed study in {directory}")
    meta = json.loads(meta_path.read_text())
    n = int(meta["n_slices"])
    phases = {}
    for phase in PHASES:
        p = phase.lower()
        sa = load_volume(directory / f"sa_{p}.nii.gz")
        la1 = load_volume(directory / f"la_{p}.nii.gz")
        la = la1.with_data(np.repeat(la1.data, n, axis=0))
        sa_rec = GeometryRecord.from_json((directory / f"sa_{p}_geometry.json").read_text())
        la_rec = GeometryRecord.from_json((directory / f"la_{p}_geometry.json").read_text())
        sa_lab = la_lab = None
        if (directory / f"sa_{p}_gt.nii.gz").is_file():
            g = load_volume(directory / f"sa_{p}_gt.nii.gz")
            sa_lab = LabelMap(g.data, g.spacing, g.origin, header=g.header, label_set=INTERNAL_LABELS)
        if (directory / f"la_{p}_gt.nii.gz").is_file():
            g = load_volume(directory / f"la_{p}_gt.nii.gz")
            la_lab = LabelMap(np.repeat(g.data, n, axis=0), g.spacing, g.origin, header=g.header,
                              label_set=INTERNAL_LABELS)
        if sa.n_slices != n:
            raise FormatError(f"{directory}: SA slice count {sa.n_slices} != recorded {n}")
        phases[phase] = PreprocessedPhase(sa, la, sa_rec, la_rec, sa_lab, la_lab)
    # original grids are restored as geometry only (a read-only zero view of the right shape)
    source = {phase: {view: VolumeGrid(np.broadcast_to(np.float32(0), tuple(g["shape"])), g["spacing"], g["origin"])
                      for view, g in views.items()} for phase, views in meta.get("source", {}).items()}
    return PreprocessedStudy(meta["subject_id"], phases, pathology=meta.get("pathology", ""),
                             vendor=meta.get("vendor", ""), source=source)
