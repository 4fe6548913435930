"""scikit-learn style wrappers around the preprocessing and fold-ensemble model.

``X`` is always a list of studies: :class:`~salanet.dataio.CardiacStudy` for
:class:`StudyPreprocessor`, :class:`~salanet.preprocess.PreprocessedStudy` for
:class:`SALASegmenter`.  Both estimators expose ``get_params``/``set_params``
so they compose with :class:`sklearn.pipeline.Pipeline` and ``clone``.
"""
from __future__ import annotations

import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentPolicy
from .dataio import PHASES, RV_LABEL, CardiacStudy
from .exceptions import ValidationError
from .inference import argmax_labels, cluster_threshold, load_models, predict_study, segment_study
from .metrics import dsc
from .network import NetworkConfig
from .preprocess import TARGET_SIZE, TARGET_SPACING, PreprocessedStudy, preprocess_study
from .training import TrainConfig, train_all_folds


def check_studies(X, kind, name="X") -> list:
    """Coerce ``X`` to a non-empty list of ``kind`` instances."""
    if isinstance(X, (kind, str, bytes)) or not hasattr(X, "__iter__"):
        raise ValidationError(f"{name} must be a sequence of {kind.__name__}")
    X = list(X)
    if not X:
        raise ValidationError(f"{name} is empty")
    bad = [type(s).__name__ for s in X if not isinstance(s, kind)]
    if bad:
        raise ValidationError(f"{name} must contain only {kind.__name__}, found {sorted(set(bad))}")
    ids = [s.subject_id for s in X]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{name} contains duplicate subject ids")
    return X


class StudyPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer: raw studies -> fixed-geometry, normalised studies."""

    def __init__(self, target_spacing=TARGET_SPACING, target_size=TARGET_SIZE):
        self.target_spacing = target_spacing
        self.target_size = target_size

    def fit(self, X, y=None):
        check_studies(X, CardiacStudy)
        if tuple(self.target_spacing) != tuple(TARGET_SPACING) or int(self.target_size) != TARGET_SIZE:
            raise ValidationError(f"only the {TARGET_SPACING} mm / {TARGET_SIZE}px training grid is supported")
        self.n_studies_seen_ = len(X)
        return self

    def transform(self, X) -> List[PreprocessedStudy]:
        check_is_fitted(self, "n_studies_seen_")
        return [preprocess_study(s) for s in check_studies(X, CardiacStudy)]


class SALASegmenter(BaseEstimator):
    """Dual-view segmenter trained as a k-fold ensemble.

    ``fit`` trains one network per fold and keeps each fold's best checkpoint;
    prediction averages the fold models' class probabilities, takes the
    arg-max and removes small connected components.
    """

    def __init__(self, filters=(32, 64, 128, 256, 512), fusion=True, shared_branches=False,
                 deep_supervision=3, epochs=150, lr=1e-4, batch_size=8, folds=5, seed=0,
                 augment: Optional[AugmentPolicy] = None, cluster_ratio=0.1, la_reduction="mean",
                 out_dir=None):
        self.filters = filters
        self.fusion = fusion
        self.shared_branches = shared_branches
        self.deep_supervision = deep_supervision
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.folds = folds
        self.seed = seed
        self.augment = augment
        self.cluster_ratio = cluster_ratio
        self.la_reduction = la_reduction
        self.out_dir = out_dir

    def _train_config(self, out_dir) -> TrainConfig:
        net = NetworkConfig(levels=len(self.filters), filters=tuple(self.filters), fusion=self.fusion,
                            shared_branches=self.shared_branches, deep_supervision=self.deep_supervision)
        return TrainConfig(folds=self.folds, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           seed=self.seed, augment=self.augment or AugmentPolicy(seed=self.seed),
                           network=net, out_dir=str(out_dir)).validate()

    def fit(self, X, y=None):
        X = check_studies(X, PreprocessedStudy)
        if not all(s.has_labels for s in X):
            raise ValidationError("every training study needs SA and LA labels")
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="salanet-")
        config = self._train_config(out_dir)
        self.fold_results_ = train_all_folds(config, X)
        self.models_ = load_models([r.checkpoint for r in self.fold_results_])
        self.checkpoints_ = [Path(r.checkpoint) for r in self.fold_results_]
        return self

    @classmethod
    def from_checkpoints(cls, paths: Sequence, **params) -> "SALASegmenter":
        """A fitted estimator from existing fold checkpoints."""
        est = cls(**params)
        est.models_ = load_models(list(paths))
        est.checkpoints_ = [Path(p) for p in paths]
        cfg = est.models_[0].config
        est.set_params(filters=cfg.filters, fusion=cfg.fusion, shared_branches=cfg.shared_branches,
                       deep_supervision=cfg.deep_supervision, folds=len(est.models_))
        return est

    def predict_proba(self, X):
        """Ensemble probabilities ``[phase][view]`` (C x N x 256 x 256) per study."""
        check_is_fitted(self, "models_")
        return [predict_study(self.models_, s, la_reduction=self.la_reduction)
                for s in check_studies(X, PreprocessedStudy)]

    def predict(self, X):
        """Internal-label maps ``[phase][view]`` per study, on the original grids."""
        check_is_fitted(self, "models_")
        return [segment_study(self.models_, s, ratio=self.cluster_ratio, la_reduction=self.la_reduction)
                for s in check_studies(X, PreprocessedStudy)]

    def score(self, X, y=None) -> float:
        """Mean RV Dice over studies, phases and views, measured on the preprocessed grid."""
        X = check_studies(X, PreprocessedStudy)
        scores = []
        for s, probs in zip(X, self.predict_proba(X)):
            for phase in PHASES:
                pp = s.phases[phase]
                for view, gt in (("SA", pp.sa_labels.data), ("LA", pp.la_labels.data[:1])):
                    lab = cluster_threshold(argmax_labels(probs[phase][view]), self.cluster_ratio)
                    scores.append(dsc(lab, gt, RV_LABEL))
        return float(np.mean(scores))
