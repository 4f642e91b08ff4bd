import io
import math
import random
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from phenotag.annotate import (
    AnnotationResult,
    ThresholdSet,
    alphas_for_fragments,
    annotate_corpus,
    annotate_document,
    annotate_fragment,
    calibrate_thresholds,
    read_annotations,
    read_thresholds,
    threshold_alpha,
    write_annotations,
    write_thresholds,
)
from phenotag.corpus import Document, Fragment, KIND_EHR, Vocabulary, build_vocabulary
from phenotag.errors import CalibrationError, ConfigError
from phenotag.model import LatentComposition, PhenotypeModel
from conftest import tiny_config


class TableModel:
    """Encoder stub: the alpha row is looked up by the fragment's first
    token id, which makes expected values exact."""

    def __init__(self, table, window=4):
        self.table = torch.as_tensor(table, dtype=torch.float64)
        self.config = SimpleNamespace(
            num_categories=self.table.shape[1], window=window
        )

    def eval(self):
        return self

    def encode(self, ids, lengths):
        alpha = self.table[ids[:, 0]]
        b, m = alpha.shape
        components = torch.zeros(b, m, 2, dtype=alpha.dtype)
        return LatentComposition(
            alpha=alpha, components=components, composite=torch.zeros(b, 2)
        )


def frag(i, doc="d", pos=None):
    return Fragment(doc, i if pos is None else pos, (i, 0, 0, 0), 4)


def percentile_oracle(values, p):
    """Brute-force sort-and-interpolate percentile."""
    v = sorted(values)
    rank = (len(v) - 1) * p / 100.0
    lo, hi = math.floor(rank), math.ceil(rank)
    return v[lo] + (rank - lo) * (v[hi] - v[lo])


class TestCalibration:
    def test_reference_ten_values_p90(self):
        table = [[(i + 1) / 10.0] for i in range(10)]
        model = TableModel(table)
        thresholds = calibrate_thresholds(
            model, [frag(i) for i in range(10)], 90.0, ("HP:1",)
        )
        assert abs(thresholds.tau[0] - 0.91) < 1e-12

    def test_constant_values_any_percentile(self):
        model = TableModel([[0.37, 0.81]] * 8)
        for p in (70, 82.5, 95):
            thresholds = calibrate_thresholds(
                model, [frag(i % 8) for i in range(8)], p, ("a", "b")
            )
            assert thresholds.tau == (0.37, 0.81)

    def test_percentile_monotone(self):
        rng = np.random.default_rng(0)
        table = rng.random((40, 3))
        model = TableModel(table)
        frags = [frag(i) for i in range(40)]
        t70 = calibrate_thresholds(model, frags, 70.0, ("a", "b", "c"))
        t95 = calibrate_thresholds(model, frags, 95.0, ("a", "b", "c"))
        assert all(lo <= hi for lo, hi in zip(t70.tau, t95.tau))

    def test_matches_sort_and_interpolate_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n, m = rng.integers(2, 60), rng.integers(1, 6)
            table = rng.random((n, m))
            p = float(rng.uniform(70, 95))
            model = TableModel(table)
            thresholds = calibrate_thresholds(
                model, [frag(i) for i in range(n)], p, tuple("c" * m)
            )
            for j in range(m):
                oracle = percentile_oracle(table[:, j].tolist(), p)
                assert abs(thresholds.tau[j] - oracle) < 1e-9

    def test_percentile_outside_range_rejected(self):
        model = TableModel([[0.5]])
        with pytest.raises(CalibrationError):
            calibrate_thresholds(model, [frag(0)], 50.0, ("a",))
        with pytest.raises(CalibrationError):
            calibrate_thresholds(model, [frag(0)], 99.0, ("a",))

    def test_empty_fragment_set_rejected(self):
        with pytest.raises(CalibrationError):
            calibrate_thresholds(TableModel([[0.5]]), [], 90.0, ("a",))


class TestThresholding:
    def test_tau_one_always_empty(self):
        assert threshold_alpha([0.999999, 1.0 - 1e-7], (1.0, 1.0)) == set()

    def test_tau_zero_gives_all(self):
        assert threshold_alpha([0.01, 0.5, 0.99], (0.0, 0.0, 0.0)) == {0, 1, 2}

    def test_strict_inequality(self):
        assert threshold_alpha([0.3, 0.8], (0.5, 0.5)) == {1}
        assert threshold_alpha([0.5], (0.5,)) == set()

    def test_raising_tau_never_adds(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            m = int(rng.integers(1, 8))
            alpha = rng.random(m)
            tau = rng.random(m)
            base = threshold_alpha(alpha, tau)
            j = int(rng.integers(0, m))
            raised = tau.copy()
            raised[j] = min(1.0, raised[j] + float(rng.random()))
            assert threshold_alpha(alpha, raised) <= base


class TestDocumentAnnotation:
    def thresholds(self, m=2, value=0.5):
        return ThresholdSet(
            tau=(value,) * m, percentile=90.0, category_ids=tuple(f"HP:{j}" for j in range(m))
        )

    def test_union_of_fragments(self):
        model = TableModel([[0.9, 0.1], [0.1, 0.9]])
        frags = [frag(0, pos=0), frag(1, pos=1)]
        res = annotate_document(model, frags, self.thresholds())
        assert res.categories == {0, 1}

    def test_all_empty_fragments_give_empty(self):
        model = TableModel([[0.1, 0.1]])
        res = annotate_document(model, [frag(0)], self.thresholds())
        assert res.categories == set()

    def test_union_equals_max_aggregation(self):
        rng = np.random.default_rng(3)
        table = rng.random((12, 3))
        model = TableModel(table)
        frags = [frag(i) for i in range(12)]
        tau = ThresholdSet(
            tau=tuple(rng.random(3)), percentile=90.0, category_ids=("a", "b", "c")
        )
        union = annotate_document(model, frags, tau, aggregate="union")
        peak = annotate_document(model, frags, tau, aggregate="max")
        assert union.categories == peak.categories

    def test_adding_fragment_never_removes(self):
        rng = np.random.default_rng(4)
        table = rng.random((20, 4))
        model = TableModel(table)
        tau = ThresholdSet(
            tau=tuple(rng.random(4)), percentile=90.0, category_ids=tuple("abcd")
        )
        for _ in range(30):
            n = int(rng.integers(1, 19))
            frags = [frag(i) for i in range(n)]
            with_more = frags + [frag(n)]
            a = annotate_document(model, frags, tau).categories
            b = annotate_document(model, with_more, tau).categories
            assert a <= b

    def test_annotate_fragment_singleton(self):
        model = TableModel([[0.9, 0.1]])
        cats = annotate_fragment(model, frag(0), self.thresholds())
        assert cats == {0}

    def test_unknown_aggregate_rejected(self):
        model = TableModel([[0.9, 0.1]])
        with pytest.raises(ConfigError):
            annotate_document(model, [frag(0)], self.thresholds(), aggregate="vote")

    def test_keep_alphas_matrix_shape(self):
        model = TableModel([[0.9, 0.1], [0.2, 0.8]])
        res = annotate_document(
            model, [frag(0, pos=0), frag(1, pos=1)], self.thresholds(), keep_alphas=True
        )
        assert res.per_fragment_alpha.shape == (2, 2)


class TestRealModelDeterminism:
    def test_identical_params_and_inputs_identical_annotations(self):
        cfg = tiny_config()
        torch.manual_seed(60)
        model = PhenotypeModel(cfg)
        model.eval()
        words = " ".join(f"w{i}q" for i in range(40))
        vocab = build_vocabulary(
            [Document(doc_id="v", kind=KIND_EHR, text=words)]
        )
        docs = [
            Document(doc_id=f"d{i}", kind=KIND_EHR, text=words[: 30 + i * 7])
            for i in range(6)
        ]
        frags = []
        from phenotag.corpus import fragment_document

        for d in docs:
            frags.extend(fragment_document(d, vocab, cfg.window))
        thresholds = calibrate_thresholds(
            model, frags, 80.0, tuple(f"HP:{j}" for j in range(cfg.num_categories))
        )
        r1 = annotate_corpus(model, docs, vocab, thresholds, cfg.window)
        r2 = annotate_corpus(model, docs, vocab, thresholds, cfg.window)
        assert [(r.doc_id, sorted(r.categories)) for r in r1] == [
            (r.doc_id, sorted(r.categories)) for r in r2
        ]

    def test_worker_pool_matches_sequential(self):
        cfg = tiny_config()
        torch.manual_seed(61)
        model = PhenotypeModel(cfg)
        model.eval()
        words = " ".join(f"w{i}q" for i in range(40))
        vocab = build_vocabulary([Document(doc_id="v", kind=KIND_EHR, text=words)])
        docs = [
            Document(doc_id=f"d{i}", kind=KIND_EHR, text=words[: 20 + i * 11])
            for i in range(8)
        ]
        thresholds = ThresholdSet(
            tau=(0.4,) * cfg.num_categories,
            percentile=70.0,
            category_ids=tuple(f"HP:{j}" for j in range(cfg.num_categories)),
        )
        seq = annotate_corpus(model, docs, vocab, thresholds, cfg.window, workers=1)
        par = annotate_corpus(model, docs, vocab, thresholds, cfg.window, workers=2)
        assert [(r.doc_id, sorted(r.categories)) for r in seq] == [
            (r.doc_id, sorted(r.categories)) for r in par
        ]


class TestSerialization:
    def test_threshold_file_round_trip(self):
        thresholds = ThresholdSet(
            tau=(0.25, 0.5),
            percentile=85.0,
            category_ids=("HP:0000001", "HP:0000002"),
            calibration_hash="abc123",
        )
        buf = io.StringIO()
        write_thresholds(thresholds, buf)
        buf.seek(0)
        again = read_thresholds(buf)
        assert again.percentile == 85.0
        assert again.calibration_hash == "abc123"
        assert again.category_ids == thresholds.category_ids
        assert all(abs(a - b) < 1e-12 for a, b in zip(again.tau, thresholds.tau))

    def test_annotations_round_trip_with_ids(self):
        results = [
            AnnotationResult(doc_id="a", categories=frozenset({1, 0})),
            AnnotationResult(doc_id="b", categories=frozenset()),
        ]
        buf = io.StringIO()
        write_annotations(results, ("HP:x", "HP:y"), buf)
        buf.seek(0)
        parsed = read_annotations(buf)
        assert parsed == {"a": {"HP:x", "HP:y"}, "b": set()}

    def test_mismatched_tau_count_rejected(self):
        with pytest.raises(ConfigError):
            ThresholdSet(tau=(0.5,), percentile=90.0, category_ids=("a", "b"))
