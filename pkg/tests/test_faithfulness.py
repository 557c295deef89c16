"""Association tables, TV-distance faithfulness, and the correct-vs-wrong
AUC independence analysis."""

import numpy as np
import pytest

from wbcx.core import (
    ATTRIBUTE_CARDINALITIES,
    ATTRIBUTE_ENUMS,
    ATTRIBUTE_NAMES,
    CellClass,
    REAL_CLASSES,
)
from wbcx.errors import EmptyInput, VocabularyMismatch
from wbcx.faithfulness import (
    DEFAULT_TV_THRESHOLD,
    compare_associations,
    ground_truth_association,
    independence_analysis,
    model_association,
    save_association_charts,
    save_divergence_report,
    total_variation,
)
from wbcx.synthcell import RULE_TABLE


def _gt_lists(dataset):
    classes, attrs = [], []
    for item in dataset:
        for ann in item.annotations:
            classes.append(ann.cell_class)
            attrs.append(ann.attributes.as_indices())
    return classes, attrs


class TestTotalVariation:
    def test_fixture_point_two(self):
        assert total_variation(np.array([0.7, 0.3]),
                               np.array([0.5, 0.5])) == pytest.approx(0.2, abs=1e-12)

    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert total_variation(p, p) == 0.0

    def test_disjoint_is_one(self):
        assert total_variation(np.array([1.0, 0.0]),
                               np.array([0.0, 1.0])) == pytest.approx(1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3))
        q = rng.dirichlet(np.ones(3))
        assert total_variation(p, q) == total_variation(q, p)

    def test_length_mismatch(self):
        with pytest.raises(VocabularyMismatch):
            total_variation(np.array([1.0]), np.array([0.5, 0.5]))


class TestAssociationTables:
    def test_ground_truth_matches_rule_table(self, five_per_class_dataset):
        table = ground_truth_association(five_per_class_dataset)
        assert set(table.rows) == set(REAL_CLASSES)
        for c, vectors in table.rows.items():
            # the generator is deterministic per class, so every probability
            # vector is a one-hot at the rule-table value
            expected = RULE_TABLE[c].as_indices()
            for k, card in enumerate(ATTRIBUTE_CARDINALITIES):
                onehot = np.zeros(card)
                onehot[expected[k]] = 1.0
                assert np.allclose(vectors[k], onehot)

    def test_counting_oracle(self):
        classes = [CellClass.NEUTROPHIL] * 4
        attrs = [(0, 0, 0, 0), (0, 0, 0, 0), (1, 0, 0, 0), (1, 1, 2, 1)]
        table = model_association(classes, attrs)
        g = table.rows[CellClass.NEUTROPHIL][0]
        assert np.allclose(g, [0.5, 0.5])
        shapes = table.rows[CellClass.NEUTROPHIL][2]
        assert np.allclose(shapes, [0.75, 0.0, 0.25])

    def test_absent_classes_omitted_not_zero_filled(self):
        table = model_association([CellClass.MONOCYTE], [(0, 1, 0, 0)])
        assert list(table.rows) == [CellClass.MONOCYTE]

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            model_association([], [])

    def test_mismatched_lengths(self):
        with pytest.raises(EmptyInput):
            model_association([CellClass.MONOCYTE], [])


class TestCompareAssociations:
    def test_identity_stub_is_exactly_faithful(self, five_per_class_dataset):
        # a model that parrots the ground-truth labels must have TV == 0.0
        # exactly, for every populated cell
        classes, attrs = _gt_lists(five_per_class_dataset)
        gt = ground_truth_association(five_per_class_dataset)
        model = model_association(classes, attrs)
        report = compare_associations(model, gt)
        assert report.faithful
        assert report.absent_classes == []
        assert len(report.divergence) == len(REAL_CLASSES) * len(ATTRIBUTE_NAMES)
        assert all(tv == 0.0 for tv in report.divergence.values())
        assert report.worst() == 0.0

    def test_known_divergence_value(self):
        gt = model_association([CellClass.NEUTROPHIL] * 10,
                               [(0, 0, 1, 1)] * 10)
        model = model_association([CellClass.NEUTROPHIL] * 10,
                                  [(0, 0, 1, 1)] * 7 + [(1, 0, 1, 1)] * 3)
        report = compare_associations(model, gt)
        assert report.divergence[(CellClass.NEUTROPHIL, "granularity")] == \
            pytest.approx(0.3, abs=1e-12)
        assert report.divergence[(CellClass.NEUTROPHIL, "cytoplasm_color")] == 0.0

    def test_threshold_is_inclusive(self):
        gt = model_association([CellClass.BLAST_CELL] * 2, [(0, 0, 2, 0)] * 2)
        model = model_association([CellClass.BLAST_CELL] * 2,
                                  [(0, 0, 2, 0), (1, 0, 2, 0)])
        # granularity TV is exactly 0.5
        report = compare_associations(model, gt, threshold=0.5)
        assert report.faithful
        report = compare_associations(model, gt, threshold=0.4999)
        assert not report.faithful

    def test_absent_classes_listed(self, five_per_class_dataset):
        classes, attrs = _gt_lists(five_per_class_dataset)
        keep = [i for i, c in enumerate(classes) if c is not CellClass.BASOPHIL]
        model = model_association([classes[i] for i in keep],
                                  [attrs[i] for i in keep])
        gt = ground_truth_association(five_per_class_dataset)
        report = compare_associations(model, gt)
        assert report.absent_classes == [CellClass.BASOPHIL]
        assert all(c is not CellClass.BASOPHIL for c, _ in report.divergence)

    def test_default_threshold(self):
        assert DEFAULT_TV_THRESHOLD == 0.15


class TestIndependenceAnalysis:
    def _perfect_scores(self, attrs):
        scores = []
        for k, card in enumerate(ATTRIBUTE_CARDINALITIES):
            m = np.zeros((len(attrs), card))
            for i, a in enumerate(attrs):
                m[i, a[k]] = 1.0
            scores.append(m)
        return scores

    def test_perfect_scores_on_both_splits(self, five_per_class_dataset):
        classes, attrs = _gt_lists(five_per_class_dataset)
        scores = self._perfect_scores(attrs)
        # force half the class predictions wrong; attribute scores stay perfect
        wrong = [REAL_CLASSES[(c.value + 1) % 10] for c in classes]
        preds = [classes[i] if i % 2 == 0 else wrong[i] for i in range(len(classes))]
        table = independence_analysis(preds, scores, classes, attrs)
        for (name, value, split), auc in table.items():
            if auc is not None:
                assert auc == pytest.approx(1.0)

    def test_all_correct_leaves_misclassified_none(self, five_per_class_dataset):
        classes, attrs = _gt_lists(five_per_class_dataset)
        scores = self._perfect_scores(attrs)
        table = independence_analysis(classes, scores, classes, attrs)
        assert all(auc is None for (n, v, s), auc in table.items()
                   if s == "misclassified")
        assert any(auc is not None for (n, v, s), auc in table.items()
                   if s == "correct")

    def test_covers_every_attribute_value_and_split(self, five_per_class_dataset):
        classes, attrs = _gt_lists(five_per_class_dataset)
        table = independence_analysis(classes, self._perfect_scores(attrs),
                                      classes, attrs)
        expected = {(name, v.name.lower(), split)
                    for name, enum_cls in zip(ATTRIBUTE_NAMES, ATTRIBUTE_ENUMS)
                    for v in enum_cls
                    for split in ("correct", "misclassified")}
        assert set(table) == expected

    def test_null_model_auc_near_half(self):
        # scores independent of the labels: AUC must hover around chance
        rng = np.random.default_rng(42)
        n = 1000
        classes = [REAL_CLASSES[i % 10] for i in range(n)]
        attrs = [RULE_TABLE[c].as_indices() for c in classes]
        scores = [rng.random((n, card)) for card in ATTRIBUTE_CARDINALITIES]
        table = independence_analysis(classes, scores, classes, attrs)
        for (name, value, split), auc in table.items():
            if auc is not None:
                assert 0.4 <= auc <= 0.6, (name, value, split, auc)


class TestArtifacts:
    def test_save_association_charts(self, five_per_class_dataset, tmp_path):
        classes, attrs = _gt_lists(five_per_class_dataset)
        gt = ground_truth_association(five_per_class_dataset)
        model = model_association(classes, attrs)
        written = save_association_charts(model, gt, tmp_path)
        assert len(written) == len(REAL_CLASSES) * len(ATTRIBUTE_NAMES)
        for p in written:
            assert (tmp_path / p.split("/")[-1]).stat().st_size > 0

    def test_save_divergence_report(self, five_per_class_dataset, tmp_path):
        classes, attrs = _gt_lists(five_per_class_dataset)
        gt = ground_truth_association(five_per_class_dataset)
        report = compare_associations(model_association(classes, attrs), gt)
        out = tmp_path / "faithfulness.txt"
        save_divergence_report(report, out)
        text = out.read_text()
        assert "faithful = true" in text
        assert f"threshold = {DEFAULT_TV_THRESHOLD}" in text
        assert text.count("tv.") == len(report.divergence)
