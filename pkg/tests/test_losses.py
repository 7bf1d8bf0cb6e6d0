import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hotlesion.errors import BadLabel, ShapeMismatch
from hotlesion.losses import (
    Batch,
    LossConfig,
    MixupSample,
    batch_objective,
    distance_ce,
    mixup_ce_level,
    mixup_image,
    proto_dce_mixup,
    proto_mse_mixup,
    protmix_total,
    sample_lambda,
    select_mixup_pairs,
)
from hotlesion.model import ModelConfig, init_model, prototype_distances
from hotlesion.taxonomy import LabelPath, SubsetPartition


class TestSampleLambda:
    def test_symmetric_concentration(self):
        rng = np.random.default_rng(0)
        draws = [sample_lambda(5000.0, rng) for _ in range(10_000)]
        assert abs(np.mean(draws) - 0.5) < 0.01

    def test_uniform_when_alpha_one(self):
        import scipy.stats

        rng = np.random.default_rng(1)
        draws = [sample_lambda(1.0, rng) for _ in range(100_000)]
        stat, _ = scipy.stats.kstest(draws, "uniform")
        assert stat < 0.01

    def test_deterministic_stream(self):
        a = [sample_lambda(1.0, np.random.default_rng(7)) for _ in range(5)]
        b = [sample_lambda(1.0, np.random.default_rng(7)) for _ in range(5)]
        assert a == b

    def test_range(self):
        rng = np.random.default_rng(2)
        assert all(0.0 <= sample_lambda(0.3, rng) <= 1.0 for _ in range(1000))


def make_partition():
    # level-3 categories: 0,1 head; 2,3,4 middle; 5,6 tail; 7 ood
    return SubsetPartition(
        head=frozenset({0, 1}),
        middle=frozenset({2, 3, 4}),
        tail=frozenset({5, 6}),
        ood=frozenset({7}),
        thresholds=(100, 10, 1),
    )


class TestSelectMixupPairs:
    def test_head_only_batch_yields_nothing(self):
        rng = np.random.default_rng(0)
        pairs, singles = select_mixup_pairs([0, 1, 0, 1], make_partition(), "MX5", 1.0, rng)
        assert pairs == []
        assert singles == [0, 1, 2, 3]

    def test_one_middle_one_tail(self):
        rng = np.random.default_rng(0)
        pairs, singles = select_mixup_pairs([2, 5], make_partition(), "MX5", 1.0, rng)
        assert len(pairs) == 1 and singles == []
        i, j = pairs[0]
        assert {2, 5} == {2, 5}  # both members used
        assert {i, j} == {0, 1}

    def test_audit_all_pairs_are_middle_tail(self):
        part = make_partition()
        rng = np.random.default_rng(42)
        labels_pool = [0, 1, 2, 3, 4, 5, 6]
        for _ in range(2000):
            labels = [labels_pool[i] for i in rng.integers(0, len(labels_pool), size=12)]
            pairs, singles = select_mixup_pairs(labels, part, "MX5", 0.7, rng)
            for i, j in pairs:
                sides = {part.subset_of(labels[i]), part.subset_of(labels[j])}
                assert sides == {"middle", "tail"}
                assert labels[i] != labels[j]
            assert len(set(i for p in pairs for i in p)) == 2 * len(pairs)
            assert sorted(set(singles) | {i for p in pairs for i in p}) == list(range(12))

    def test_intra_subset_strategy(self):
        part = make_partition()
        rng = np.random.default_rng(5)
        for _ in range(500):
            labels = [int(x) for x in rng.integers(0, 7, size=10)]
            pairs, _ = select_mixup_pairs(labels, part, "MX2", 1.0, rng)
            for i, j in pairs:
                assert part.subset_of(labels[i]) == "middle"
                assert part.subset_of(labels[j]) == "middle"
                assert labels[i] != labels[j]

    def test_p_mix_zero(self):
        rng = np.random.default_rng(0)
        pairs, singles = select_mixup_pairs([2, 5, 3, 6], make_partition(), "MX5", 0.0, rng)
        assert pairs == [] and len(singles) == 4

    def test_none_strategy(self):
        rng = np.random.default_rng(0)
        pairs, singles = select_mixup_pairs([2, 5], make_partition(), "none", 1.0, rng)
        assert pairs == [] and singles == [0, 1]


class TestMixupImage:
    def test_lambda_one_identity(self):
        a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        assert torch.equal(mixup_image(a, b, 1.0), a)

    def test_half_blend(self):
        a, b = torch.zeros(2, 2), torch.ones(2, 2)
        assert torch.allclose(mixup_image(a, b, 0.5), torch.full((2, 2), 0.5))

    def test_recompute(self):
        rng = np.random.default_rng(0)
        a = torch.tensor(rng.random((3, 5, 5)))
        b = torch.tensor(rng.random((3, 5, 5)))
        got = mixup_image(a, b, 0.3)
        assert (got - (0.3 * a + 0.7 * b)).abs().max().item() < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mixup_image(torch.rand(2, 2), torch.rand(3, 3), 0.5)


class TestMixupCE:
    def test_lambda_one_is_plain_ce(self):
        logits = torch.tensor([1.0, 2.0, -0.5])
        got = mixup_ce_level(logits, 1, 2, 1.0)
        expected = -torch.log_softmax(logits, dim=-1)[1]
        assert torch.allclose(got, expected)

    def test_equal_labels_collapse(self):
        logits = torch.tensor([0.3, -1.2])
        for lam in (0.0, 0.3, 0.9):
            got = mixup_ce_level(logits, 1, 1, lam)
            expected = -torch.log_softmax(logits, dim=-1)[1]
            assert torch.allclose(got, expected)

    def test_ln2_case(self):
        got = mixup_ce_level(torch.tensor([0.0, 0.0], dtype=torch.float64), 0, 1, 0.5)
        assert got.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_bad_label(self):
        with pytest.raises(BadLabel):
            mixup_ce_level(torch.zeros(3), 0, 5, 0.5)


class TestProtoLosses:
    def test_mse_zero_at_prototype(self):
        bank = torch.rand(4, 6)
        got = proto_mse_mixup(bank[1], bank, 1, 3, 1.0)
        assert got.item() == pytest.approx(0.0, abs=1e-12)

    def test_mse_weighted_sum(self):
        # squared distances 1.0 and 3.0, lam 0.5 -> 2.0
        latent = torch.zeros(1)
        bank = torch.tensor([[1.0], [3.0**0.5]])
        got = proto_mse_mixup(latent, bank, 0, 1, 0.5)
        assert got.item() == pytest.approx(2.0, abs=1e-9)

    def test_mse_matches_distance_oracle(self):
        rng = np.random.default_rng(0)
        latent = torch.tensor(rng.normal(size=8))
        bank = torch.tensor(rng.normal(size=(5, 8)))
        lam = 0.37
        d = prototype_distances(latent, bank)
        expected = lam * d[2] + (1 - lam) * d[4]
        got = proto_mse_mixup(latent, bank, 2, 4, lam)
        assert (got - expected).abs().item() < 1e-12

    def test_dce_symmetry_ln2(self):
        dists = torch.tensor([0.7, 0.7], dtype=torch.float64)
        for lam in (0.0, 0.5, 1.0):
            got = proto_dce_mixup(dists, 0, 1, lam, gamma=1.0)
            assert got.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_dce_hand_computed(self):
        d = np.array([0.4, 1.1, 2.6])
        gamma = 1.3
        p_true = np.exp(-gamma * d[0]) / np.exp(-gamma * d).sum()
        got = proto_dce_mixup(torch.tensor(d), 0, 2, 1.0, gamma=gamma)
        assert got.item() == pytest.approx(-np.log(p_true), abs=1e-9)

    def test_dce_large_gamma_limit(self):
        d = torch.tensor([0.1, 1.0, 2.0])
        got = proto_dce_mixup(d, 0, 1, 1.0, gamma=200.0)
        assert got.item() < 1e-9

    def test_protmix_arithmetic(self):
        cfg = LossConfig(lambda_mse=0.1)
        got = protmix_total(torch.tensor(2.0), torch.tensor(3.0), cfg)
        assert got.item() == pytest.approx(3.2)

    def test_protmix_zero_mse_weight(self):
        cfg = LossConfig(lambda_mse=0.0)
        assert protmix_total(torch.tensor(5.0), torch.tensor(3.0), cfg).item() == 3.0


class TestLambdaLinearity:
    """Every mixup loss is linear in lam with pure-sample endpoints."""

    LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_ce_linearity(self):
        rng = np.random.default_rng(0)
        logits = torch.tensor(rng.normal(size=6))
        at_1 = mixup_ce_level(logits, 2, 4, 1.0)
        at_0 = mixup_ce_level(logits, 2, 4, 0.0)
        for lam in self.LAMBDAS:
            got = mixup_ce_level(logits, 2, 4, lam)
            assert torch.allclose(got, lam * at_1 + (1 - lam) * at_0, atol=1e-9)

    def test_mse_linearity(self):
        rng = np.random.default_rng(1)
        latent = torch.tensor(rng.normal(size=8))
        bank = torch.tensor(rng.normal(size=(5, 8)))
        at_1 = proto_mse_mixup(latent, bank, 1, 3, 1.0)
        at_0 = proto_mse_mixup(latent, bank, 1, 3, 0.0)
        for lam in self.LAMBDAS:
            got = proto_mse_mixup(latent, bank, 1, 3, lam)
            assert torch.allclose(got, lam * at_1 + (1 - lam) * at_0, atol=1e-9)

    def test_dce_linearity(self):
        rng = np.random.default_rng(2)
        dists = torch.tensor(np.abs(rng.normal(size=7)))
        at_1 = proto_dce_mixup(dists, 0, 5, 1.0, 1.0)
        at_0 = proto_dce_mixup(dists, 0, 5, 0.0, 1.0)
        for lam in self.LAMBDAS:
            got = proto_dce_mixup(dists, 0, 5, lam, 1.0)
            assert torch.allclose(got, lam * at_1 + (1 - lam) * at_0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(min_value=0.0, max_value=1.0), seed=st.integers(0, 10_000))
    def test_dce_linearity_property(self, lam, seed):
        rng = np.random.default_rng(seed)
        dists = torch.tensor(np.abs(rng.normal(size=5)) + 0.01)
        at_1 = proto_dce_mixup(dists, 1, 3, 1.0, 0.8)
        at_0 = proto_dce_mixup(dists, 1, 3, 0.0, 0.8)
        got = proto_dce_mixup(dists, 1, 3, lam, 0.8)
        assert torch.allclose(got, lam * at_1 + (1 - lam) * at_0, atol=1e-9)


# -- batch objective ------------------------------------------------------------

TOY_CFG = ModelConfig(image_size=16, feature_dim=8, encoder_layers=1, decoder_layers=1,
                      attention_heads=2, ffn_dim=16, level_sizes=(2, 3, 5))


def toy_paths():
    # 5 level-3 categories under 3 level-2 under 2 level-1
    return [
        LabelPath(0, 0, 0),
        LabelPath(0, 0, 1),
        LabelPath(0, 1, 2),
        LabelPath(1, 2, 3),
        LabelPath(1, 2, 4),
    ]


def classes(path):
    return path.l1, path.l2, path.l3


def toy_batch(variant, lam=0.37, seed=0):
    rng = np.random.default_rng(seed)
    paths = toy_paths()
    x = torch.tensor(rng.random((2, 3, 16, 16)), dtype=torch.float32)
    xa = torch.tensor(rng.random((3, 16, 16)), dtype=torch.float32)
    xb = torch.tensor(rng.random((3, 16, 16)), dtype=torch.float32)
    mix = MixupSample(
        x_mix=mixup_image(xa, xb, lam), i=0, j=1, lam=lam,
        labels_i=paths[2], labels_j=paths[4],
    )
    return Batch(plain_x=x, plain_labels=[paths[0], paths[3]], mixups=[mix])


class TestBatchObjective:
    @pytest.mark.parametrize("variant", ["singular", "hierarchical", "hierarchical_mpl"])
    def test_matches_hand_assembled_sum(self, variant):
        import dataclasses

        cfg = dataclasses.replace(TOY_CFG, variant=variant)
        model = init_model(cfg, seed=0).double()
        batch = toy_batch(variant)
        x, _ = batch.stacked()
        out = model(x.double())
        loss_cfg = LossConfig(lambda_mse=0.1, gamma=1.0)
        bank = getattr(model, "prototypes", None)
        total, terms = batch_objective(out, batch, classes, variant, loss_cfg, bank)

        # independent reassembly from the component ops
        expected = torch.zeros((), dtype=torch.float64)
        for row, path in enumerate(batch.plain_labels):
            y1, y2, y3 = classes(path)
            if variant != "singular":
                expected = expected + mixup_ce_level(out.logits_l1[row], y1, y1, 1.0)
                expected = expected + mixup_ce_level(out.logits_l2[row], y2, y2, 1.0)
            if variant == "hierarchical_mpl":
                d = prototype_distances(out.latent_l3[row], bank)
                expected = expected + protmix_total(
                    proto_mse_mixup(out.latent_l3[row], bank, y3, y3, 1.0),
                    proto_dce_mixup(d, y3, y3, 1.0, 1.0),
                    loss_cfg,
                )
            else:
                expected = expected + mixup_ce_level(out.logits_l3[row], y3, y3, 1.0)
        m = batch.mixups[0]
        row = 2
        yi = classes(m.labels_i)
        yj = classes(m.labels_j)
        if variant != "singular":
            expected = expected + mixup_ce_level(out.logits_l1[row], yi[0], yj[0], m.lam)
            expected = expected + mixup_ce_level(out.logits_l2[row], yi[1], yj[1], m.lam)
        if variant == "hierarchical_mpl":
            d = prototype_distances(out.latent_l3[row], bank)
            expected = expected + protmix_total(
                proto_mse_mixup(out.latent_l3[row], bank, yi[2], yj[2], m.lam),
                proto_dce_mixup(d, yi[2], yj[2], m.lam, 1.0),
                loss_cfg,
            )
        else:
            expected = expected + mixup_ce_level(out.logits_l3[row], yi[2], yj[2], m.lam)
        expected = expected / batch.size
        assert (total - expected).abs().item() < 1e-12

    def test_hierarchical_plain_batch_has_three_ce_terms(self):
        import dataclasses

        cfg = dataclasses.replace(TOY_CFG, variant="hierarchical")
        model = init_model(cfg, seed=0)
        batch = toy_batch("hierarchical")
        batch.mixups = []
        x, _ = batch.stacked()
        out = model(x)
        _, terms = batch_objective(out, batch, classes, "hierarchical", LossConfig(), None)
        assert set(terms) == {"ce_l1", "ce_l2", "ce_l3"}

    def test_mpl_head_only_batch_has_no_mixup_terms(self):
        model = init_model(TOY_CFG, seed=0)
        batch = toy_batch("hierarchical_mpl")
        batch.mixups = []  # head-only batches never produce pairs
        x, _ = batch.stacked()
        out = model(x)
        _, terms = batch_objective(
            out, batch, classes, "hierarchical_mpl", LossConfig(), model.prototypes
        )
        assert not any(k.startswith("mixup_") for k in terms)
        assert {"ce_l1", "ce_l2", "proto_mse", "proto_dce"} <= set(terms)

    def test_nonnegative_terms(self):
        model = init_model(TOY_CFG, seed=1)
        batch = toy_batch("hierarchical_mpl", lam=0.8, seed=3)
        x, _ = batch.stacked()
        out = model(x)
        total, terms = batch_objective(
            out, batch, classes, "hierarchical_mpl", LossConfig(), model.prototypes
        )
        assert total.item() >= 0
        assert all(v >= 0 for v in terms.values())


class TestGradientsFiniteDifference:
    def test_protmix_grad_wrt_latent_and_prototypes(self):
        # central differences at 64-bit on the combined prototype loss
        rng = np.random.default_rng(0)
        latent = torch.tensor(rng.normal(size=6), requires_grad=True)
        bank = torch.tensor(rng.normal(size=(4, 6)), requires_grad=True)
        cfg = LossConfig(lambda_mse=0.25, gamma=0.9)
        lam = 0.37

        def f(lat, bk):
            d = prototype_distances(lat, bk)
            return protmix_total(
                proto_mse_mixup(lat, bk, 1, 3, lam),
                proto_dce_mixup(d, 1, 3, lam, cfg.gamma),
                cfg,
            )

        loss = f(latent, bank)
        loss.backward()
        eps = 1e-5
        for tensor in (latent, bank):
            grad = tensor.grad
            flat = tensor.detach().clone().reshape(-1)
            num = torch.zeros_like(flat)
            for k in range(flat.numel()):
                plus = flat.clone()
                plus[k] += eps
                minus = flat.clone()
                minus[k] -= eps
                if tensor is latent:
                    fp = f(plus.reshape(tensor.shape), bank.detach())
                    fm = f(minus.reshape(tensor.shape), bank.detach())
                else:
                    fp = f(latent.detach(), plus.reshape(tensor.shape))
                    fm = f(latent.detach(), minus.reshape(tensor.shape))
                num[k] = (fp - fm) / (2 * eps)
            rel = (num - grad.reshape(-1)).abs() / torch.clamp(
                torch.maximum(num.abs(), grad.reshape(-1).abs()), min=1e-4
            )
            assert rel.max().item() <= 1e-4
