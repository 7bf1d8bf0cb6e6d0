import math

import numpy as np
import pytest
import torch

from hotlesion.errors import EmptyTrainSet
from hotlesion.losses import LossConfig
from hotlesion.model import LabelMaps, ModelConfig
from hotlesion.training import (
    ImageStore,
    TrainConfig,
    make_epoch_batches,
    train,
)

MICRO_MODEL = ModelConfig(
    image_size=32, feature_dim=16, encoder_layers=1, decoder_layers=1,
    attention_heads=2, ffn_dim=32, variant="hierarchical_mpl", level_sizes=(2, 4, 12),
)


def micro_train_cfg(**kw):
    defaults = dict(batch_size=32, initial_lr=3e-4, epochs=2, strategy="MX5", seed=5)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def micro(micro_dataset):
    return micro_dataset


class TestMakeEpochBatches:
    def test_batch_count(self, micro):
        recs = [r for r in micro["records"] if r.split == "train"]
        store = ImageStore(micro["root"])
        cfg = micro_train_cfg()
        rng = np.random.default_rng(0)
        batches = list(
            make_epoch_batches(recs, micro["partition"], cfg, store, "clinical", rng)
        )
        assert len(batches) == math.ceil(len(recs) / cfg.batch_size)
        assert sum(b.size + len(b.mixups) for b in batches) == len(recs)

    def test_strategy_none_has_no_mixups(self, micro):
        recs = [r for r in micro["records"] if r.split == "train"]
        store = ImageStore(micro["root"])
        cfg = micro_train_cfg(strategy="none")
        rng = np.random.default_rng(0)
        for batch in make_epoch_batches(recs, micro["partition"], cfg, store, "clinical", rng):
            assert batch.mixups == []

    def test_mx5_audit_over_epochs(self, micro):
        recs = [r for r in micro["records"] if r.split == "train"]
        store = ImageStore(micro["root"])
        part = micro["partition"]
        cfg = micro_train_cfg()
        rng = np.random.default_rng(1)
        seen_pairs = 0
        for _ in range(20):
            for batch in make_epoch_batches(recs, part, cfg, store, "clinical", rng):
                for m in batch.mixups:
                    sides = {part.subset_of(m.labels_i.l3), part.subset_of(m.labels_j.l3)}
                    assert sides == {"middle", "tail"}
                    assert 0.0 <= m.lam <= 1.0
                    seen_pairs += 1
        assert seen_pairs > 50

    def test_mixup_images_are_convex_combinations(self, micro):
        recs = [r for r in micro["records"] if r.split == "train"]
        store = ImageStore(micro["root"])
        cfg = micro_train_cfg(augment_crop=False, augment_flip=False)
        rng = np.random.default_rng(2)
        for batch in make_epoch_batches(recs, micro["partition"], cfg, store, "clinical", rng):
            for m in batch.mixups:
                assert torch.isfinite(m.x_mix).all()
                assert m.x_mix.min() >= 0.0 and m.x_mix.max() <= 1.0


class TestTrain:
    def test_loss_decreases_and_log_is_consistent(self, micro, tmp_path):
        cfg = micro_train_cfg(epochs=3)
        result = train(
            micro["records"], micro["taxonomy"], micro["partition"],
            MICRO_MODEL, cfg, micro["root"], out_dir=tmp_path / "ck",
        )
        steps = [e for e in result.log if e["kind"] == "step"]
        epochs = [e for e in result.log if e["kind"] == "epoch"]
        assert len(epochs) == 3
        first = np.mean([e["loss"] for e in steps if e["epoch"] == 0])
        last = np.mean([e["loss"] for e in steps if e["epoch"] == cfg.epochs - 1])
        assert last < first
        # monotone step counter
        assert [e["step"] for e in steps] == list(range(len(steps)))
        # lr schedule exact
        for e in steps:
            assert e["lr"] == pytest.approx(cfg.initial_lr * cfg.lr_decay ** e["epoch"])
        # best-checkpoint selection matches the log
        assert result.best_metric == pytest.approx(max(e["macro_f1_l3"] for e in epochs))
        assert (tmp_path / "ck" / "meta").exists()
        assert (tmp_path / "ck" / "train_log.jsonl").exists()

    def test_zero_epochs_returns_initialized_model(self, micro):
        cfg = micro_train_cfg(epochs=0)
        result = train(
            micro["records"], micro["taxonomy"], micro["partition"],
            MICRO_MODEL, cfg, micro["root"],
        )
        from hotlesion.model import init_model

        fresh = init_model(MICRO_MODEL, cfg.seed)
        for (_, a), (_, b) in zip(result.model.named_parameters(), fresh.named_parameters()):
            assert torch.equal(a, b)
        assert [e for e in result.log if e["kind"] == "epoch"] == []

    def test_bitwise_deterministic_trajectories(self, micro):
        cfg = micro_train_cfg(epochs=1)
        r1 = train(micro["records"], micro["taxonomy"], micro["partition"],
                   MICRO_MODEL, cfg, micro["root"])
        r2 = train(micro["records"], micro["taxonomy"], micro["partition"],
                   MICRO_MODEL, cfg, micro["root"])
        l1 = [e["loss"] for e in r1.log if e["kind"] == "step"]
        l2 = [e["loss"] for e in r2.log if e["kind"] == "step"]
        assert l1 == l2  # bitwise-identical floats

    def test_empty_train_set(self, micro):
        recs = [r for r in micro["records"] if r.split == "test"]
        with pytest.raises(EmptyTrainSet):
            train(recs, micro["taxonomy"], micro["partition"], MICRO_MODEL,
                  micro_train_cfg(), micro["root"])

    def test_no_ood_in_any_gradient_step(self, micro):
        # every batch assembled from the train split carries ID labels only
        recs = [r for r in micro["records"] if r.split == "train"]
        flags = micro["taxonomy"].id_flags
        assert all(flags[r.label.l3] for r in recs)
        ood_recs = [r for r in micro["records"] if r.split == "ood_test"]
        assert all(r.is_unknown or not flags[r.label.l3] for r in ood_recs)


class TestAblationGrid:
    def test_row_per_strategy(self, micro):
        from hotlesion.training import ablation_grid

        rows = ablation_grid(
            micro["records"], micro["taxonomy"], micro["partition"],
            MICRO_MODEL, micro_train_cfg(epochs=1), micro["root"],
            strategies=["none", "MX5"],
        )
        assert [r["strategy"] for r in rows] == ["none", "MX5"]
        assert rows[0]["variant"] == "hierarchical"
        assert rows[1]["variant"] == "hierarchical_mpl"
        for r in rows:
            assert 0.0 <= r["auroc_ood17"] <= 1.0
