import dataclasses
import json

import numpy as np
import pytest
import torch

from salanet.augment import AugmentPolicy
from salanet.exceptions import FormatError, NotFound, ValidationError
from salanet.training import (
    LOG_COLUMNS, SlicePairs, TrainConfig, load_checkpoint, load_config, make_optimizer, save_checkpoint,
    save_config, select_checkpoint, split_folds, train_all_folds, train_fold, train_steps, _new_network,
)


def _config(tmp_path, tiny_config, **kw):
    base = dict(folds=2, epochs=1, batch_size=8, seed=0, network=tiny_config, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return TrainConfig(**base)


class TestFolds:
    def test_160_into_five(self):
        folds = split_folds([f"s{i}" for i in range(160)], 5, 0)
        assert [len(f) for f in folds] == [32] * 5
        assert sorted(sum(folds, [])) == sorted(f"s{i}" for i in range(160))

    def test_pigeonhole(self):
        assert [len(f) for f in split_folds(list("abcdefg"), 5, 1)] == [2, 2, 1, 1, 1]

    def test_deterministic(self):
        ids = [f"s{i}" for i in range(23)]
        assert split_folds(ids, 5, 9) == split_folds(ids, 5, 9)
        assert split_folds(ids, 5, 9) != split_folds(ids, 5, 10)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            split_folds(["a", "b"], 5)
        with pytest.raises(ValidationError):
            split_folds(["a", "a", "b"], 2)


class TestSelect:
    def test_argmin(self):
        assert select_checkpoint([0.5, 0.3, 0.4]) == 1

    def test_tie_goes_early(self):
        assert select_checkpoint([0.3, 0.3]) == 0

    def test_random_vs_scan(self, rng):
        for _ in range(200):
            h = rng.integers(0, 5, size=rng.integers(1, 12)).astype(float).tolist()
            best = 0
            for i in range(len(h)):
                if h[i] < h[best]:
                    best = i
            assert select_checkpoint(h) == best

    def test_empty(self):
        with pytest.raises(ValidationError):
            select_checkpoint([])


class TestConfig:
    def test_round_trip(self, tmp_path, tiny_config):
        cfg = _config(tmp_path, tiny_config, augment=AugmentPolicy(p_hflip=0.25))
        save_config(cfg, tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert back.to_dict() == cfg.to_dict()

    def test_errors(self, tmp_path):
        with pytest.raises(NotFound):
            load_config(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_config(tmp_path / "bad.json")
        (tmp_path / "unknown.json").write_text(json.dumps({"epochs": 1, "colour": "red"}))
        with pytest.raises(ValidationError):
            load_config(tmp_path / "unknown.json")
        with pytest.raises(ValidationError):
            TrainConfig(epochs=0).validate()


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_config):
        net = _new_network(TrainConfig(network=tiny_config), 3)
        save_checkpoint(net, tmp_path / "x.ckpt", epoch=4)
        back, meta = load_checkpoint(tmp_path / "x.ckpt")
        assert meta["epoch"] == 4 and back.config == tiny_config and not back.training
        for (k, a), (_, b) in zip(net.state_dict().items(), back.state_dict().items()):
            assert torch.equal(a, b), k

    def test_bad_files(self, tmp_path):
        with pytest.raises(NotFound):
            load_checkpoint(tmp_path / "none.ckpt")
        (tmp_path / "junk.ckpt").write_bytes(b"junk")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "junk.ckpt")
        torch.save({"format": "other"}, tmp_path / "other.ckpt")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "other.ckpt")


class TestTrainFold:
    def test_one_epoch_smoke(self, tmp_path, tiny_config, preprocessed_pair):
        cfg = _config(tmp_path, tiny_config)
        res = train_fold(cfg, 0, preprocessed_pair)
        assert len(res.train_loss) == 1 and len(res.val_loss) == 1 and res.selected_epoch == 0
        fold_dir = tmp_path / "run" / "fold_0"
        assert (fold_dir / "best.ckpt").is_file() and (fold_dir / "last.ckpt").is_file()
        net, meta = load_checkpoint(res.checkpoint)
        assert meta["fold"] == 0
        log = (fold_dir / "training_log.csv").read_text().splitlines()
        assert log[0].split(",") == list(LOG_COLUMNS) and len(log) == 2
        assert json.loads((fold_dir / "result.json").read_text())["selected_epoch"] == 0

    def test_no_leakage(self, tmp_path, tiny_config, preprocessed_pair):
        cfg = _config(tmp_path, tiny_config, epochs=2)
        folds = split_folds([s.subject_id for s in preprocessed_pair], 2, cfg.seed)
        for k in range(2):
            seen = []
            train_fold(cfg, k, preprocessed_pair, folds, batch_hook=lambda e, ids: seen.extend(ids))
            assert seen and not set(seen) & set(folds[k])

    def test_deterministic_history(self, tmp_path, tiny_config, preprocessed_pair):
        a = train_fold(_config(tmp_path / "a", tiny_config, epochs=2), 1, preprocessed_pair)
        b = train_fold(_config(tmp_path / "b", tiny_config, epochs=2), 1, preprocessed_pair)
        assert a.train_loss == b.train_loss and a.val_loss == b.val_loss

    def test_all_folds(self, tmp_path, tiny_config, preprocessed_pair):
        results = train_all_folds(_config(tmp_path, tiny_config), preprocessed_pair)
        assert [r.fold for r in results] == [0, 1]
        assert json.loads((tmp_path / "run" / "folds.json").read_text())

    def test_bad_fold_index(self, tmp_path, tiny_config, preprocessed_pair):
        with pytest.raises(ValidationError):
            train_fold(_config(tmp_path, tiny_config), 2, preprocessed_pair)

    def test_unlabelled_rejected(self, preprocessed_pair):
        s = dataclasses.replace(preprocessed_pair[0])
        s.phases = {p: dataclasses.replace(pp, la_labels=None) for p, pp in s.phases.items()}
        with pytest.raises(ValidationError):
            SlicePairs([s])


def test_small_problem_overfits(preprocessed_pair, tiny_config):
    """A fast optimisation sanity check on a 64x64 crop (the full-size probe lives in the acceptance suite)."""
    pairs = SlicePairs(preprocessed_pair[:1])
    sa, sl, la, ll = pairs.batch([4, 5])
    crop = (slice(None), slice(None), slice(96, 160), slice(64, 128))
    sa, la = sa[crop], la[crop]
    sl, ll = sl[:, 96:160, 64:128], ll[:, 96:160, 64:128]
    cfg = TrainConfig(network=dataclasses.replace(tiny_config, filters=(8, 16, 32)), lr=1e-2)
    torch.manual_seed(0)
    net = _new_network(cfg, 0)
    opt = make_optimizer(net, cfg)
    losses = [train_steps(net, opt, sa, sl, la, ll) for _ in range(150)]
    assert losses[-1] < 0.25 * losses[0]
    assert np.isfinite(losses).all()
