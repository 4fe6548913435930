"""K-fold training of the dual-view network on preprocessed studies.

Folds are drawn over subjects.  Each epoch is one shuffled pass over every
(subject, phase, SA slice) triple of the training subjects; a triple becomes a
pair (SA slice, LA slice of the same phase).  The checkpoint with the lowest
validation loss is kept as ``best.ckpt`` next to ``last.ckpt``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentPolicy, augment_pair
from .exceptions import NotFound, NumericalError, ValidationError, FormatError
from .losses import total_loss
from .network import NetworkConfig, SALANet, build_network, forward, init_he_normal
from .preprocess import PreprocessedStudy

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "salanet-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "fold", "train_loss", "val_loss", "val_sa_dice", "val_sa_ce", "val_la_dice", "val_la_ce")


@dataclass
class TrainConfig:
    folds: int = 5
    epochs: int = 150
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    out_dir: str = "runs"
    data_dir: Optional[str] = None
    val_batch_size: int = 16
    channels_last: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)

    def validate(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        self.network.validate()
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["augment"] = self.augment.to_dict()
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d).validate()


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such config file: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return TrainConfig.from_dict(d)


def save_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class FoldResult:
    fold: int
    train_loss: List[float]
    val_loss: List[float]
    selected_epoch: int
    checkpoint: Path
    val_subjects: List[str] = field(default_factory=list)


def split_folds(subject_ids: Sequence[str], k: int = 5, seed: int = 0) -> List[List[str]]:
    """Shuffle subjects with ``seed`` and cut them into ``k`` near-equal folds."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("subject ids must be unique")
    if k < 2 or len(ids) < k:
        raise ValidationError(f"need at least k={k} subjects (and k >= 2), got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in part] for part in np.array_split(order, k)]


def select_checkpoint(history: Sequence[float]) -> int:
    """Index of the minimum validation loss; ties go to the earliest epoch."""
    if len(history) == 0:
        raise ValidationError("empty validation history")
    best, best_i = math.inf, None
    for i, v in enumerate(history):
        if v < best or best_i is None:
            best, best_i = v, i
    return best_i


# --------------------------------------------------------------------------- data


class SlicePairs:
    """Flat view over the matched (SA slice, LA slice) pairs of some studies."""

    def __init__(self, studies: Sequence[PreprocessedStudy]):
        self.subjects = [s.subject_id for s in studies]
        self.sa_img, self.sa_lab, self.la_img, self.la_lab = [], [], [], []
        self.index: List[Tuple[int, int]] = []  # (volume index, slice index)
        self.owner: List[str] = []
        for s in studies:
            if not s.has_labels:
                raise ValidationError(f"{s.subject_id}: training needs SA and LA labels")
            for phase in sorted(s.phases):
                pp = s.phases[phase]
                v = len(self.sa_img)
                self.sa_img.append(np.asarray(pp.sa_image.data, dtype=np.float32))
                self.sa_lab.append(np.asarray(pp.sa_labels.data, dtype=np.int64))
                self.la_img.append(np.asarray(pp.la_image.data[0], dtype=np.float32))
                self.la_lab.append(np.asarray(pp.la_labels.data[0], dtype=np.int64))
                self.owner.append(s.subject_id)
                self.index.extend((v, z) for z in range(pp.sa_image.n_slices))

    def __len__(self):
        return len(self.index)

    def subject_of(self, i: int) -> str:
        return self.owner[self.index[i][0]]

    def get(self, i: int):
        v, z = self.index[i]
        return self.sa_img[v][z], self.sa_lab[v][z], self.la_img[v], self.la_lab[v]

    def batch(self, idx: Sequence[int], policy: Optional[AugmentPolicy] = None, rng=None):
        items = [self.get(i) for i in idx]
        if policy is not None:
            items = [augment_pair(*it, policy, rng) for it in items]
        sa = torch.from_numpy(np.stack([it[0] for it in items]))[:, None]
        sl = torch.from_numpy(np.stack([it[1] for it in items]))
        la = torch.from_numpy(np.stack([it[2] for it in items]))[:, None]
        ll = torch.from_numpy(np.stack([it[3] for it in items]))
        return sa, sl, la, ll


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(net: SALANet, path, **meta) -> Path:
    """Versioned checkpoint: network config, state dict and free-form metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "state_dict": {k: v.detach().cpu().contiguous() for k, v in net.state_dict().items()},
        "meta": meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=torch.float32) -> Tuple[SALANet, dict]:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: not a version-{CHECKPOINT_VERSION} salanet checkpoint")
    net = build_network(NetworkConfig.from_dict(payload["config"])).to(dtype)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload.get("meta", {})


# --------------------------------------------------------------------------- training


def _new_network(config: TrainConfig, seed: int) -> SALANet:
    net = init_he_normal(build_network(config.network), seed)
    if config.channels_last:
        net = net.to(memory_format=torch.channels_last)
    return net


def _to_input(x: torch.Tensor, channels_last: bool) -> torch.Tensor:
    return x.contiguous(memory_format=torch.channels_last) if channels_last else x


def evaluate_loss(net: SALANet, pairs: SlicePairs, batch_size: int = 16, channels_last: bool = True) -> Dict[str, float]:
    """Slice-weighted mean of the training objective, eval mode, no augmentation."""
    sums: Dict[str, float] = {}
    n = len(pairs)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = list(range(start, min(n, start + batch_size)))
            sa, sl, la, ll = pairs.batch(idx)
            out = forward(net, _to_input(sa, channels_last), _to_input(la, channels_last), "eval")
            parts = total_loss(out, sl, ll).as_floats()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
    return {k: v / n for k, v in sums.items()}


def train_steps(net: SALANet, optimizer, sa, sl, la, ll, channels_last: bool = True) -> float:
    """One optimizer update on a prepared batch; returns the loss value."""
    out = forward(net, _to_input(sa, channels_last), _to_input(la, channels_last), "train")
    loss = total_loss(out, sl, ll).total
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def make_optimizer(net: SALANet, config: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps)


def train_fold(config: TrainConfig, fold_index: int, dataset: Sequence[PreprocessedStudy],
               folds: Optional[List[List[str]]] = None,
               batch_hook: Optional[Callable[[int, List[str]], None]] = None) -> FoldResult:
    """Train on all folds but ``fold_index`` and validate on that one.

    ``batch_hook(epoch, subject_ids)`` is called for every training batch (used
    to audit that no held-out subject leaks into training).
    """
    config.validate()
    ids = [s.subject_id for s in dataset]
    folds = folds or split_folds(ids, config.folds, config.seed)
    if not 0 <= fold_index < len(folds):
        raise ValidationError(f"fold index {fold_index} out of range [0, {len(folds)})")
    held_out = set(folds[fold_index])
    train_pairs = SlicePairs([s for s in dataset if s.subject_id not in held_out])
    val_pairs = SlicePairs([s for s in dataset if s.subject_id in held_out])
    if len(train_pairs) == 0 or len(val_pairs) == 0:
        raise ValidationError(f"fold {fold_index}: empty training or validation set")

    fold_dir = Path(config.out_dir) / f"fold_{fold_index}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed + fold_index)
    rng = np.random.default_rng([config.seed, fold_index])
    net = _new_network(config, config.seed + fold_index)
    opt = make_optimizer(net, config)
    cl = config.channels_last

    train_hist, val_hist = [], []
    best = math.inf
    log_path = fold_dir / "training_log.csv"
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_pairs))
        step_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size].tolist()
            if batch_hook is not None:
                batch_hook(epoch, [train_pairs.subject_of(i) for i in idx])
            batch = train_pairs.batch(idx, config.augment, rng)
            try:
                step_losses.append(train_steps(net, opt, *batch, channels_last=cl))
            except NumericalError:
                logger.error("fold %d epoch %d: non-finite loss, keeping last good checkpoint", fold_index, epoch)
                raise
        val = evaluate_loss(net, val_pairs, config.val_batch_size, cl)
        train_hist.append(float(np.mean(step_losses)))
        val_hist.append(val["total"])
        meta = dict(fold=fold_index, epoch=epoch, seed=config.seed, val_loss=val["total"])
        save_checkpoint(net, fold_dir / "last.ckpt", **meta)
        if val["total"] < best:
            best = val["total"]
            save_checkpoint(net, fold_dir / "best.ckpt", **meta)
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([
                epoch, fold_index, f"{train_hist[-1]:.8g}", f"{val['total']:.8g}",
                f"{val['sa_dice']:.8g}", f"{val['sa_ce']:.8g}", f"{val['la_dice']:.8g}", f"{val['la_ce']:.8g}"])
        logger.info("fold %d epoch %d: train %.4f val %.4f", fold_index, epoch, train_hist[-1], val["total"])

    result = FoldResult(fold_index, train_hist, val_hist, select_checkpoint(val_hist),
                        fold_dir / "best.ckpt", sorted(held_out))
    (fold_dir / "result.json").write_text(json.dumps({
        "fold": fold_index, "train_loss": train_hist, "val_loss": val_hist,
        "selected_epoch": result.selected_epoch, "val_subjects": result.val_subjects}, indent=2) + "\n")
    return result


def train_all_folds(config: TrainConfig, dataset: Sequence[PreprocessedStudy]) -> List[FoldResult]:
    folds = split_folds([s.subject_id for s in dataset], config.folds, config.seed)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(config.out_dir) / "folds.json").write_text(json.dumps(folds, indent=2) + "\n")
    return [train_fold(config, k, dataset, folds) for k in range(config.folds)]
