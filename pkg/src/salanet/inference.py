"""Fold-ensemble prediction, cluster thresholding and export in original geometry."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .dataio import INTERNAL_LABELS, PHASES, LabelMap, save_volume
from .exceptions import NotFound, ValidationError
from .network import SALANet, forward
from .preprocess import PreprocessedStudy, invert_geometry
from .training import load_checkpoint

logger = logging.getLogger(__name__)

ProbabilityMaps = Dict[str, Dict[str, np.ndarray]]  # phase -> view -> C x N x H x W


def find_checkpoints(models_dir, name: str = "best.ckpt") -> List[Path]:
    """``fold_*/best.ckpt`` below ``models_dir``, in fold order."""
    models_dir = Path(models_dir)
    if not models_dir.is_dir():
        raise NotFound(f"no such model directory: {models_dir}")
    fold_dirs = sorted(models_dir.glob("fold_*"), key=lambda p: int(p.name.split("_")[1]))
    if not fold_dirs:
        raise NotFound(f"no fold_* directories in {models_dir}")
    paths = []
    for d in fold_dirs:
        ckpt = d / name
        if not ckpt.is_file():
            raise NotFound(f"missing checkpoint {ckpt}")
        paths.append(ckpt)
    return paths


def load_models(paths: Sequence) -> List[SALANet]:
    models = [load_checkpoint(p)[0] for p in paths]
    if not models:
        raise ValidationError("no checkpoints given")
    ref = models[0].config.to_dict()
    for p, m in zip(paths, models):
        if m.config.to_dict() != ref:
            raise ValidationError(f"checkpoint {p} has a network config different from {paths[0]}")
    return models


def _softmax_stack(net: SALANet, sa: np.ndarray, la: np.ndarray, batch_size: int):
    """Eval-mode class probabilities for every slice pair; returns (C x N x H x W) x 2."""
    sa_out, la_out = [], []
    with torch.no_grad():
        for start in range(0, sa.shape[0], batch_size):
            s = torch.from_numpy(np.ascontiguousarray(sa[start:start + batch_size], dtype=np.float32))[:, None]
            l = torch.from_numpy(np.ascontiguousarray(la[start:start + batch_size], dtype=np.float32))[:, None]
            s = s.contiguous(memory_format=torch.channels_last)
            l = l.contiguous(memory_format=torch.channels_last)
            out = forward(net, s, l, "eval")
            sa_out.append(torch.softmax(out.sa.main.double(), dim=1).numpy())
            la_out.append(torch.softmax(out.la.main.double(), dim=1).numpy())
    to_cn = lambda chunks: np.ascontiguousarray(np.concatenate(chunks, axis=0).transpose(1, 0, 2, 3))
    return to_cn(sa_out), to_cn(la_out)


def predict_single(net: SALANet, study: PreprocessedStudy, batch_size: int = 8,
                   la_reduction: str = "mean") -> ProbabilityMaps:
    """Per-phase SA (C x N x H x W) and LA (C x 1 x H x W) probabilities of one model.

    Every SA slice is paired with the (replicated) LA slice.  With bottleneck
    fusion the LA output depends on which SA slice it was paired with, so the N
    LA predictions are reduced to one: ``'mean'`` averages them, ``'first'``
    keeps the pairing with SA slice 0.
    """
    if la_reduction not in ("mean", "first"):
        raise ValidationError(f"la_reduction must be 'mean' or 'first', got {la_reduction!r}")
    maps: ProbabilityMaps = {}
    for phase in PHASES:
        pp = study.phases[phase]
        sa_p, la_p = _softmax_stack(net, pp.sa_image.data, pp.la_image.data, batch_size)
        la_p = la_p.mean(axis=1, keepdims=True) if la_reduction == "mean" else la_p[:, :1].copy()
        maps[phase] = {"SA": sa_p, "LA": la_p}
    return maps


def ensemble_average(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Voxel-wise arithmetic mean of probability maps."""
    maps = list(maps)
    if not maps:
        raise ValidationError("cannot average an empty list of probability maps")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValidationError("probability maps must share one shape")
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        acc += m
    return acc / len(maps)


def predict_study(models: Sequence[SALANet], study: PreprocessedStudy, batch_size: int = 8,
                  la_reduction: str = "mean") -> ProbabilityMaps:
    """Fold-ensemble probabilities: each model's softmax maps, averaged."""
    if not models:
        raise ValidationError("no models given")
    ref = models[0].config.to_dict()
    if any(m.config.to_dict() != ref for m in models[1:]):
        raise ValidationError("ensemble members have different network configs")
    per_model = [predict_single(m, study, batch_size, la_reduction) for m in models]
    return {phase: {view: ensemble_average([pm[phase][view] for pm in per_model]) for view in ("SA", "LA")}
            for phase in PHASES}


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Class index of the largest probability; ties resolve to the lowest index."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def cluster_threshold(labels, ratio: float = 0.1, connectivity: Optional[int] = None):
    """Drop connected components smaller than ``ratio`` x the largest one, per class.

    ``connectivity`` follows :func:`scipy.ndimage.generate_binary_structure`;
    the default (full) is 26-connectivity in 3D and 8-connectivity in 2D.  A
    volume with a single slice is treated as 2D.
    """
    as_map = isinstance(labels, LabelMap)
    data = np.asarray(labels.data if as_map else labels)
    work = data[0] if data.ndim == 3 and data.shape[0] == 1 else data
    structure = ndimage.generate_binary_structure(work.ndim, connectivity or work.ndim)
    out = work.copy()
    for cls in np.unique(work):
        if cls == 0:
            continue
        comp, n = ndimage.label(work == cls, structure=structure)
        if n <= 1:
            continue
        sizes = np.bincount(comp.ravel())
        sizes[0] = 0
        keep = sizes >= ratio * sizes.max()
        keep[0] = False
        out[(comp > 0) & ~keep[comp]] = 0
    out = out.reshape(data.shape)
    if as_map:
        return labels.with_data(out)
    return out


def segment_study(models: Sequence[SALANet], study: PreprocessedStudy, ratio: float = 0.1,
                  batch_size: int = 8, la_reduction: str = "mean") -> Dict[str, Dict[str, LabelMap]]:
    """Final internal-label maps ``[phase][view]`` on the original acquisition grids."""
    probs = predict_study(models, study, batch_size, la_reduction)
    result: Dict[str, Dict[str, LabelMap]] = {}
    for phase in PHASES:
        pp = study.phases[phase]
        result[phase] = {}
        for view, rec, ref in (("SA", pp.sa_geometry, pp.sa_image), ("LA", pp.la_geometry, pp.la_image)):
            lab = cluster_threshold(argmax_labels(probs[phase][view]), ratio)
            src = study.source.get(phase, {}).get(view)
            spacing = (src.spacing[0] if src is not None else ref.spacing[0],) + ref.spacing[1:]
            grid = LabelMap(lab, spacing, label_set=INTERNAL_LABELS)
            out = invert_geometry(grid, rec)
            if src is not None:
                out = LabelMap(out.data, src.spacing, src.origin, header=src.header, label_set=INTERNAL_LABELS)
            result[phase][view] = out
    return result


def prediction_path(out_dir, subject_id: str, view: str, phase: str) -> Path:
    return Path(out_dir) / f"{subject_id}_{view}_{phase}_pred.nii.gz"


def write_predictions(preds: Dict[str, Dict[str, LabelMap]], subject_id: str, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for phase, views in preds.items():
        for view, lab in views.items():
            p = prediction_path(out_dir, subject_id, view, phase)
            save_volume(lab, p)
            paths.append(p)
    return paths
