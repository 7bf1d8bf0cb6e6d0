import numpy as np
import pytest
import torch

from hotlesion.calibration import auroc
from hotlesion.errors import EmptySet, InsufficientSamples, UnknownCategory
from hotlesion.evaluation import (
    centroid_distances,
    confidence_histograms,
    eval_levels,
    eval_ood,
    inter_class,
    intra_class,
    macro_prf,
    pairwise_centroid_matrix,
    triage_effectiveness,
    category_report,
)
from hotlesion.inference import Engine
from hotlesion.training import ImageStore


def oracle_macro_prf(y_true, y_pred):
    """Independent confusion-matrix implementation (dict-of-counts style)."""
    cats = sorted(set(y_true))
    ps, rs = [], []
    for c in cats:
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if p == c and t == c:
                tp += 1
            elif p == c:
                fp += 1
            elif t == c:
                fn += 1
        ps.append(tp / (tp + fp) if tp + fp else 0.0)
        rs.append(tp / (tp + fn) if tp + fn else 0.0)
    f1s = [2 * p * r / (p + r) if p + r else 0.0 for p, r in zip(ps, rs)]
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(f1s))


class TestMacroPRF:
    def test_perfect_predictor(self):
        p, r, f, _ = macro_prf([0, 1, 2, 1], [0, 1, 2, 1])
        assert (p, r, f) == (1.0, 1.0, 1.0)

    def test_hand_computed_two_category_confusion(self):
        # cat0: TP=1 FP=1 FN=0; cat1: TP=0 FP=0 FN=1
        p, r, f, rows = macro_prf([0, 1], [0, 0])
        assert p == pytest.approx(0.25)
        assert r == pytest.approx(0.5)
        assert rows[0]["precision"] == pytest.approx(0.5)
        assert rows[1]["recall"] == 0.0

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n_cat = int(rng.integers(2, 6))
            n = int(rng.integers(3, 40))
            y_true = rng.integers(0, n_cat, n).tolist()
            y_pred = rng.integers(0, n_cat, n).tolist()
            p, r, f, _ = macro_prf(y_true, y_pred)
            op, orr, of = oracle_macro_prf(y_true, y_pred)
            assert abs(p - op) <= 1e-12
            assert abs(r - orr) <= 1e-12
            assert abs(f - of) <= 1e-12

    def test_empty_raises(self):
        with pytest.raises(EmptySet):
            macro_prf([], [])


class TestDistanceHelpers:
    def test_identical_embeddings_zero(self):
        embs = np.tile([0.3, 0.4], (5, 1))
        assert centroid_distances(embs) == 0.0

    def test_two_points_analytic(self):
        embs = np.array([[0.0, 0.0], [2.0, 0.0]])
        assert centroid_distances(embs) == pytest.approx(1.0)

    def test_pairwise_unit_distance(self):
        cents = np.array([[0.0, 0.0], [1.0, 0.0]])
        m = pairwise_centroid_matrix(cents)
        assert np.allclose(m, [[0, 1], [1, 0]])
        off = m[~np.eye(2, dtype=bool)]
        assert off.mean() == pytest.approx(1.0)

    def test_matrix_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(1)
        cents = rng.normal(size=(6, 4))
        m = pairwise_centroid_matrix(cents)
        assert np.allclose(m, m.T)
        assert np.allclose(np.diag(m), 0.0)


@pytest.fixture(scope="module")
def engine(micro_bundle):
    return Engine.load(micro_bundle)


@pytest.fixture(scope="module")
def eval_ctx(micro_dataset, engine):
    records = micro_dataset["records"]
    return {
        "store": ImageStore(micro_dataset["root"]),
        "id_test": [r for r in records if r.split == "test"],
        "ood17": [r for r in records if r.split == "ood_test" and not r.is_unknown],
        "unk": [r for r in records if r.split == "ood_test" and r.is_unknown],
        "tax": micro_dataset["taxonomy"],
    }


class TestEvalLevels:
    def test_three_levels_reported(self, engine, eval_ctx):
        model = engine.models["clinical"]
        metrics = eval_levels(
            model, eval_ctx["id_test"], eval_ctx["store"], "clinical",
            eval_ctx["tax"], engine.maps, engine.configs["clinical"].gamma,
        )
        assert set(metrics.levels) == {"l1", "l2", "l3"}
        for row in metrics.levels.values():
            for key in ("precision", "recall", "f1"):
                assert 0.0 <= row[key] <= 1.0
        # micro training is short but level 1 should be clearly better than chance
        assert metrics.levels["l1"]["f1"] > 0.55

    def test_empty_set(self, engine, eval_ctx):
        with pytest.raises(EmptySet):
            eval_levels(engine.models["clinical"], [], eval_ctx["store"], "clinical",
                        eval_ctx["tax"], engine.maps, 1.0)


class TestEvalOod:
    def test_reports_and_recomputation(self, engine, eval_ctx):
        model = engine.models["clinical"]
        rep = eval_ood(model, eval_ctx["id_test"], eval_ctx["ood17"], eval_ctx["unk"],
                       eval_ctx["store"], "clinical", engine.maps, 1.0)
        assert 0.0 <= rep["auroc_ood17"] <= 1.0
        assert 0.0 <= rep["auroc_unk"] <= 1.0
        # exported scores reproduce the AUROC exactly
        assert rep["auroc_ood17"] == pytest.approx(
            auroc(rep["scores_id"], rep["scores_ood17"]), abs=1e-12
        )

    def test_degenerate_identical_sets(self, engine, eval_ctx):
        model = engine.models["clinical"]
        rep = eval_ood(model, eval_ctx["id_test"], eval_ctx["id_test"], [],
                       eval_ctx["store"], "clinical", engine.maps, 1.0)
        assert rep["auroc_ood17"] == pytest.approx(0.5)


class TestDistanceReports:
    def test_intra_inter_on_micro(self, engine, eval_ctx):
        model = engine.models["clinical"]
        labels = [r.label.l3 for r in eval_ctx["id_test"]]
        intra = intra_class(model, eval_ctx["id_test"], eval_ctx["store"], "clinical", 3, labels)
        inter = inter_class(model, eval_ctx["id_test"], eval_ctx["store"], "clinical", 3, labels)
        assert intra.intra_min <= intra.intra_mean <= intra.intra_max
        assert inter.inter_mean > 0
        assert np.allclose(inter.matrix, inter.matrix.T)
        assert np.allclose(np.diag(inter.matrix), 0.0)

    def test_record_order_invariance(self, engine, eval_ctx):
        model = engine.models["clinical"]
        recs = eval_ctx["id_test"]
        labels = [r.label.l3 for r in recs]
        a = intra_class(model, recs, eval_ctx["store"], "clinical", 3, labels)
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(recs)).tolist()
        b = intra_class(model, [recs[i] for i in perm], eval_ctx["store"], "clinical", 3,
                        [labels[i] for i in perm])
        for c in a.per_category:
            assert a.per_category[c] == pytest.approx(b.per_category[c], abs=1e-5)

    def test_insufficient_samples(self, engine, eval_ctx):
        model = engine.models["clinical"]
        one = eval_ctx["id_test"][:1]
        with pytest.raises(InsufficientSamples):
            intra_class(model, one, eval_ctx["store"], "clinical", 3, [one[0].label.l3])

    def test_levels_one_and_two(self, engine, eval_ctx):
        model = engine.models["clinical"]
        labels1 = [r.label.l1 for r in eval_ctx["id_test"]]
        rep = intra_class(model, eval_ctx["id_test"], eval_ctx["store"], "clinical", 1, labels1)
        assert rep.intra_mean >= 0


class TestHistograms:
    def test_mass_sums_to_one(self, engine, eval_ctx):
        model = engine.models["clinical"]
        out = confidence_histograms(
            model, {"id": eval_ctx["id_test"], "ood17": eval_ctx["ood17"]},
            eval_ctx["store"], "clinical", engine.maps, 1.0,
        )
        for block in out.values():
            for h in block["histograms"].values():
                assert h.sum() == pytest.approx(1.0, abs=1e-9)
                assert len(h) == 50

    def test_constant_scores_single_bin(self):
        h, edges = np.histogram(np.full(40, 0.5), bins=np.linspace(0, 1, 51))
        assert (h > 0).sum() == 1


class TestTriageEffectiveness:
    def test_partition_and_report(self, engine, eval_ctx):
        report = triage_effectiveness(engine, eval_ctx["id_test"], eval_ctx["store"])
        assert report.n_triaged + (report.n_total - report.n_triaged) == len(eval_ctx["id_test"])
        assert 0.0 <= report.fraction_triaged <= 1.0
        for block in (report.triaged, report.non_triaged):
            for row in block.values():
                assert 0.0 <= row["f1"] <= 1.0
        assert set(report.increments_triaged) <= {"dermoscopic", "combined"}

    def test_empty(self, engine, eval_ctx):
        with pytest.raises(EmptySet):
            triage_effectiveness(engine, [], eval_ctx["store"])


class TestCategoryReport:
    def test_focused_report(self, engine, eval_ctx):
        name = next(
            n for i, n in enumerate(eval_ctx["tax"].level3_names)
            if eval_ctx["tax"].id_flags[i]
            and sum(r.label.l3 == i for r in eval_ctx["id_test"]) >= 2
        )
        rep = category_report(engine, eval_ctx["id_test"], eval_ctx["store"], name)
        assert rep["category"] == name
        assert rep["intra_class"] >= 0
        assert len(rep["top5_categories"]) == 5
        assert 0.0 <= rep["fraction_triaged"] <= 1.0

    def test_unknown_category(self, engine, eval_ctx):
        with pytest.raises(UnknownCategory):
            category_report(engine, eval_ctx["id_test"], eval_ctx["store"], "nope")
