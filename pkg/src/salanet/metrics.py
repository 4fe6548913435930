"""Dice, HD-95, phase averaging, the weighted challenge score and pathology tables.

Conventions for empty masks (none of these are observable on well-formed
predictions, but they keep aggregates finite):

* Dice: both empty -> 1, exactly one empty -> 0.
* HD-95: both empty -> 0 mm, exactly one empty -> the image diagonal in mm.

A boundary voxel is a foreground voxel with at least one face-neighbour in the
background; voxels outside the array count as background.  Volumes with a
single slice (LA) are measured in 2D.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .dataio import PHASES, RV_LABEL, LabelMap, VIEWS
from .exceptions import ValidationError

ArrayOrMap = Union[np.ndarray, LabelMap]


def _unwrap(pred: ArrayOrMap, gt: ArrayOrMap) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, LabelMap) and isinstance(gt, LabelMap) and not pred.same_geometry(gt):
        raise ValidationError(f"geometry mismatch: {pred.shape}@{pred.spacing} vs {gt.shape}@{gt.spacing}")
    p = np.asarray(pred.data if isinstance(pred, LabelMap) else pred)
    g = np.asarray(gt.data if isinstance(gt, LabelMap) else gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dsc(pred: ArrayOrMap, gt: ArrayOrMap, class_id: int = RV_LABEL) -> float:
    p, g = _unwrap(pred, gt)
    a = p == class_id
    b = g == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _squeeze_single_slice(a, b, spacing):
    if a.ndim == 3 and a.shape[0] == 1:
        return a[0], b[0], tuple(spacing[1:])
    return a, b, tuple(spacing)


def hd95(pred: ArrayOrMap, gt: ArrayOrMap, class_id: int = RV_LABEL, spacing: Optional[Sequence[float]] = None) -> float:
    """95th-percentile symmetric Hausdorff distance between class boundaries, in mm.

    The result is the larger of the two directed 95th percentiles (linear
    interpolation between order statistics).
    """
    p, g = _unwrap(pred, gt)
    if spacing is None:
        spacing = pred.spacing if isinstance(pred, LabelMap) else (1.0,) * p.ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != p.ndim:
        raise ValidationError(f"spacing {spacing} does not match {p.ndim}D data")
    a, b, spacing = _squeeze_single_slice(p == class_id, g == class_id, spacing)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(a.shape, spacing))))
    ba, bb = boundary(a), boundary(b)
    to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    d_ab = to_b[ba]
    d_ba = to_a[bb]
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def phase_average(ed_value: float, es_value: float) -> float:
    return 0.5 * (ed_value + es_value)


def normalize_hd(values: Sequence[float]) -> List[float]:
    """Min-max reversed normalisation: the smallest HD maps to 1, the largest to 0."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValidationError("normalize_hd needs at least one value")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return [1.0] * v.size
    return list(np.clip(1.0 - (v - lo) / (hi - lo), 0.0, 1.0))


@dataclass
class ScoreInput:
    dsc_sa: float
    dsc_la: float
    hd_sa: float  # normalised, higher is better
    hd_la: float


def challenge_score(s: ScoreInput) -> float:
    """``[0.75 (DSC_SA + HD_SA) + 0.25 (DSC_LA + HD_LA)] / 2`` on normalised HD."""
    for name in ("dsc_sa", "dsc_la", "hd_sa", "hd_la"):
        v = getattr(s, name)
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name}={v} outside [0, 1]")
    return (0.75 * (s.dsc_sa + s.hd_sa) + 0.25 * (s.dsc_la + s.hd_la)) / 2.0


# --------------------------------------------------------------------------- records


@dataclass
class MetricsRecord:
    subject_id: str
    pathology: str
    dsc: Dict[Tuple[str, str], float] = field(default_factory=dict)  # (view, phase) -> value
    hd: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def dsc_view(self, view: str) -> float:
        return phase_average(self.dsc[(view, "ED")], self.dsc[(view, "ES")])

    def hd_view(self, view: str) -> float:
        return phase_average(self.hd[(view, "ED")], self.hd[(view, "ES")])

    def row(self) -> Dict[str, object]:
        out = {"subject_id": self.subject_id, "pathology": self.pathology}
        for metric, table in (("dsc", self.dsc), ("hd", self.hd)):
            for view in VIEWS:
                for phase in PHASES:
                    out[f"{metric}_{view.lower()}_{phase.lower()}"] = table[(view, phase)]
        for metric, getter in (("dsc", self.dsc_view), ("hd", self.hd_view)):
            for view in VIEWS:
                out[f"{metric}_{view.lower()}"] = getter(view)
        return out


METRIC_COLUMNS = ["subject_id", "pathology"] + [
    f"{m}_{v}_{p}" for m in ("dsc", "hd") for v in ("sa", "la") for p in ("ed", "es")
] + ["dsc_sa", "dsc_la", "hd_sa", "hd_la"]

REPORT_COLUMNS = ["pathology", "n_subjects",
                  "dsc_sa_mean", "dsc_sa_std", "dsc_la_mean", "dsc_la_std",
                  "hd_sa_mean", "hd_sa_std", "hd_la_mean", "hd_la_std"]


def evaluate_subject(subject_id: str, pathology: str, preds: Dict[str, Dict[str, LabelMap]],
                     gts: Dict[str, Dict[str, LabelMap]], class_id: int = RV_LABEL) -> MetricsRecord:
    """``preds[phase][view]`` against ``gts[phase][view]`` (internal labels, same geometry)."""
    rec = MetricsRecord(subject_id, pathology)
    for phase in PHASES:
        for view in VIEWS:
            p, g = preds[phase][view], gts[phase][view]
            rec.dsc[(view, phase)] = dsc(p, g, class_id)
            rec.hd[(view, phase)] = hd95(p, g, class_id, g.spacing)
    return rec


def pathology_report(records: Iterable[MetricsRecord]) -> List[Dict[str, object]]:
    """Per-pathology subject count and mean / population std of the view-level metrics."""
    groups: Dict[str, List[MetricsRecord]] = {}
    for r in records:
        groups.setdefault(r.pathology, []).append(r)
    rows = []
    for pathology, recs in groups.items():
        row = {"pathology": pathology, "n_subjects": len(recs)}
        for key, getter in (("dsc_sa", lambda r: r.dsc_view("SA")), ("dsc_la", lambda r: r.dsc_view("LA")),
                            ("hd_sa", lambda r: r.hd_view("SA")), ("hd_la", lambda r: r.hd_view("LA"))):
            vals = np.array([getter(r) for r in recs], dtype=float)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        rows.append(row)
    return rows


def _write_rows(path, columns, rows):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    return path


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> Path:
    return _write_rows(path, METRIC_COLUMNS, [r.row() for r in records])


def write_report_csv(rows: Sequence[Dict[str, object]], path) -> Path:
    return _write_rows(path, REPORT_COLUMNS, rows)


def read_metrics_csv(path) -> List[Dict[str, object]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in METRIC_COLUMNS[2:]:
            row[k] = float(row[k])
    return rows
