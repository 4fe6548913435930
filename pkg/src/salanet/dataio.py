"""Volume containers, NIfTI-1 I/O, the dataset manifest and study assembly.

Arrays are always held in ``(slice, row, col)`` order and ``spacing`` /
``origin`` follow that same order, in millimetres.  On disk the NIfTI axes are
``(col, row, slice)``, i.e. the usual ``(x, y, z)`` with ``x`` varying fastest,
so the C-ordered in-memory buffer and the Fortran-ordered file buffer coincide.
"""
from __future__ import annotations

import csv
import gzip
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np

from .exceptions import FormatError, NotFound, ValidationError

logger = logging.getLogger(__name__)

CHALLENGE_LABELS = frozenset({0, 1, 2, 3})  # bg, LV pool, LV myocardium, RV
INTERNAL_LABELS = frozenset({0, 1, 2})  # bg, LV (pool + myocardium), RV
RV_LABEL = 2

PHASES = ("ED", "ES")
VIEWS = ("SA", "LA")
COHORTS = ("training", "validation", "challenge")

IMAGE_COLUMNS = ("sa_ed", "sa_es", "la_ed", "la_es")
LABEL_COLUMNS = ("sa_ed_gt", "sa_es_gt", "la_ed_gt", "la_es_gt")
MANIFEST_COLUMNS = ("subject_id", "vendor", "pathology", "cohort") + IMAGE_COLUMNS + LABEL_COLUMNS

Triple = Tuple[float, float, float]


@dataclass(eq=False)
class VolumeGrid:
    """A 3D scalar field with physical spacing and origin.

    ``header`` is the NIfTI header the grid was read from, if any.  It is
    carried along untouched so orientation information survives a round trip.
    """

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    header: Optional[nib.Nifti1Header] = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValidationError(f"volume dimensions must all be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValidationError("spacing and origin must have three components")
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValidationError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    def with_data(self, data, spacing=None, origin=None):
        """Copy of this grid with new data (and optionally new geometry)."""
        return replace(
            self,
            data=data,
            spacing=self.spacing if spacing is None else spacing,
            origin=self.origin if origin is None else origin,
        )

    def same_geometry(self, other: "VolumeGrid", atol: float = 1e-4) -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing, atol=atol)


@dataclass(eq=False)
class LabelMap(VolumeGrid):
    """Integer-valued grid.  ``label_set`` (if given) is enforced on construction."""

    label_set: Optional[frozenset] = None

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.integer):
            if np.issubdtype(self.data.dtype, np.bool_):
                self.data = self.data.astype(np.uint8)
            else:
                rounded = np.rint(self.data)
                if not np.array_equal(rounded, self.data):
                    raise ValidationError("label maps must hold integer values")
                self.data = rounded.astype(np.int16)
        if self.label_set is not None:
            check_labels(self.data, self.label_set)


def check_labels(data: np.ndarray, allowed) -> None:
    present = set(np.unique(data).tolist())
    extra = present - set(allowed)
    if extra:
        raise ValidationError(f"unexpected label values {sorted(extra)}; allowed {sorted(allowed)}")


# --------------------------------------------------------------------------- NIfTI


def _is_gzip(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) == b"\x1f\x8b"


def load_volume(path) -> Union[VolumeGrid, LabelMap]:
    """Read a NIfTI-1 file (optionally gzip-compressed).

    Integer voxel types without intensity scaling come back as :class:`LabelMap`.
    """
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such file: {path}")
    try:
        img = nib.load(str(path))
        if not isinstance(img, nib.Nifti1Image):
            raise FormatError(f"{path}: not a NIfTI-1 container")
        raw = np.asanyarray(img.dataobj)
        # nibabel silently repairs zero pixdims on load, so check the bytes on disk
        with nib.openers.ImageOpener(str(path)) as fh:
            stored = nib.Nifti1Header.from_fileobj(fh, check=False)["pixdim"][1:4]
    except FormatError:
        raise
    except (nib.filebasedimages.ImageFileError, EOFError, OSError, ValueError, zlib.error, gzip.BadGzipFile) as exc:
        raise FormatError(f"{path}: unreadable NIfTI ({exc})") from exc

    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.ndim == 4 and raw.shape[3] == 1:
        raw = raw[..., 0]
    if raw.ndim != 3:
        raise FormatError(f"{path}: expected a 3D volume, got shape {raw.shape}")

    hdr = img.header.copy()
    zooms = [float(z) for z in hdr.get_zooms()[:3]]
    zooms += [1.0] * (3 - len(zooms))
    if not all(z > 0 for z in zooms) or not np.all(np.abs(stored[:min(int(hdr["dim"][0]), 3)]) > 0):
        raise FormatError(f"{path}: non-positive voxel spacing {tuple(zooms)}")

    data = np.ascontiguousarray(np.transpose(raw, (2, 1, 0)))
    spacing = (zooms[2], zooms[1], zooms[0])
    tx, ty, tz = (float(v) for v in img.affine[:3, 3])
    origin = (tz, ty, tx)
    if np.issubdtype(data.dtype, np.integer):
        return LabelMap(data, spacing, origin, header=hdr)
    return VolumeGrid(data, spacing, origin, header=hdr)


def _affine_for(grid: VolumeGrid) -> np.ndarray:
    sz, sy, sx = grid.spacing
    oz, oy, ox = grid.origin
    affine = np.eye(4)
    if grid.header is not None:
        # keep the stored direction cosines, replace the scale
        stored = grid.header.get_best_affine()[:3, :3]
        norms = np.linalg.norm(stored, axis=0)
        if np.all(norms > 0):
            affine[:3, :3] = stored / norms
    affine[:3, :3] = affine[:3, :3] * np.array([sx, sy, sz])
    affine[:3, 3] = (ox, oy, oz)
    return affine


def save_volume(grid: VolumeGrid, path) -> None:
    """Write ``grid`` as NIfTI-1; ``.gz`` suffix selects compression.

    Label maps are written with an integer voxel type.  Compressed output is
    byte-reproducible (gzip timestamp pinned to zero).
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"parent directory does not exist: {path.parent}")
    data = grid.data
    if isinstance(grid, LabelMap):
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        dtype = np.uint8 if lo >= 0 and hi <= 255 else np.int16 if -32768 <= lo and hi <= 32767 else np.int32
        data = data.astype(dtype, copy=False)
    elif data.dtype not in (np.float32, np.float64):
        data = data.astype(np.float32)

    disk = np.transpose(data, (2, 1, 0))
    header = grid.header.copy() if grid.header is not None else None
    affine = _affine_for(grid)
    img = nib.Nifti1Image(disk, affine, header=header)
    img.header.set_data_dtype(disk.dtype)
    img.header.set_zooms(tuple(reversed(grid.spacing)))
    img.header.set_qform(affine, code=1)
    img.header.set_sform(affine, code=1)
    img.header["scl_slope"] = np.nan
    img.header["scl_inter"] = np.nan

    payload = img.to_bytes()
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as raw_fh, gzip.GzipFile(fileobj=raw_fh, mode="wb", mtime=0, filename="") as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------- manifest


@dataclass
class StudyEntry:
    subject_id: str
    vendor: str
    pathology: str
    cohort: str
    sa_ed: Path
    sa_es: Path
    la_ed: Path
    la_es: Path
    sa_ed_gt: Optional[Path] = None
    sa_es_gt: Optional[Path] = None
    la_ed_gt: Optional[Path] = None
    la_es_gt: Optional[Path] = None

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValidationError(f"{self.subject_id}: unknown cohort {self.cohort!r}")
        for col in IMAGE_COLUMNS:
            if not getattr(self, col):
                raise ValidationError(f"{self.subject_id}: missing image path {col}")
        present = [getattr(self, col) is not None for col in LABEL_COLUMNS]
        if any(present) and not all(present):
            raise ValidationError(f"{self.subject_id}: label paths must be all present or all absent")

    @property
    def has_labels(self) -> bool:
        return self.sa_ed_gt is not None

    def image_path(self, view: str, phase: str) -> Path:
        return getattr(self, f"{view.lower()}_{phase.lower()}")

    def label_path(self, view: str, phase: str) -> Optional[Path]:
        return getattr(self, f"{view.lower()}_{phase.lower()}_gt")


def load_manifest(path) -> List[StudyEntry]:
    """Parse a manifest CSV.  Relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such manifest: {path}")
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing manifest columns {missing}")
        entries, seen = [], set()
        for row in reader:
            sid = row["subject_id"].strip()
            if sid in seen:
                raise ValidationError(f"{path}: duplicate subject_id {sid!r}")
            seen.add(sid)

            def resolve(value):
                value = (value or "").strip()
                if not value:
                    return None
                p = Path(value)
                return p if p.is_absolute() else base / p

            kwargs = {c: resolve(row[c]) for c in IMAGE_COLUMNS + LABEL_COLUMNS}
            entries.append(StudyEntry(
                subject_id=sid,
                vendor=row["vendor"].strip(),
                pathology=row["pathology"].strip(),
                cohort=row["cohort"].strip(),
                **kwargs,
            ))
    return entries


def write_manifest(entries: Sequence[StudyEntry], path) -> Path:
    """Write entries as manifest CSV, storing paths relative to the manifest when possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return ""
        p = Path(p)
        try:
            return p.resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow([e.subject_id, e.vendor, e.pathology, e.cohort]
                            + [rel(getattr(e, c)) for c in IMAGE_COLUMNS + LABEL_COLUMNS])
    return path


# --------------------------------------------------------------------------- studies


@dataclass
class PhaseData:
    sa_image: VolumeGrid
    la_image: VolumeGrid
    sa_labels: Optional[LabelMap] = None
    la_labels: Optional[LabelMap] = None


@dataclass
class CardiacStudy:
    """One subject's SA volume and single-slice LA image for each phase."""

    subject_id: str
    phases: Dict[str, PhaseData]
    pathology: str = ""
    vendor: str = ""

    def __post_init__(self):
        validate_study(self)

    @property
    def has_labels(self) -> bool:
        return all(p.sa_labels is not None for p in self.phases.values())


def validate_study(study: CardiacStudy) -> None:
    if set(study.phases) != set(PHASES):
        raise ValidationError(f"{study.subject_id}: expected phases {PHASES}, got {sorted(study.phases)}")
    for phase, pd in study.phases.items():
        if pd.la_image.n_slices != 1:
            raise ValidationError(
                f"{study.subject_id} {phase}: LA image must have exactly one slice, got {pd.la_image.n_slices}")
        for img, lab, view in ((pd.sa_image, pd.sa_labels, "SA"), (pd.la_image, pd.la_labels, "LA")):
            if lab is not None and not img.same_geometry(lab):
                raise ValidationError(
                    f"{study.subject_id} {view}-{phase}: label geometry {lab.shape}@{lab.spacing} "
                    f"does not match image {img.shape}@{img.spacing}")


def _load_labels(path) -> LabelMap:
    grid = load_volume(path)
    if not isinstance(grid, LabelMap):
        grid = LabelMap(grid.data, grid.spacing, grid.origin, header=grid.header)
    return grid


def assemble_study(entry: StudyEntry) -> CardiacStudy:
    """Load every file referenced by ``entry`` and check the study invariants."""
    phases = {}
    for phase in PHASES:
        sa = load_volume(entry.image_path("SA", phase))
        la = load_volume(entry.image_path("LA", phase))
        sa_gt = la_gt = None
        if entry.has_labels:
            sa_gt = _load_labels(entry.label_path("SA", phase))
            la_gt = _load_labels(entry.label_path("LA", phase))
        phases[phase] = PhaseData(sa, la, sa_gt, la_gt)
    return CardiacStudy(entry.subject_id, phases, pathology=entry.pathology, vendor=entry.vendor)
