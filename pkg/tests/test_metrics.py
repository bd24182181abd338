"""Metric implementations vs brute-force oracles."""

import math

import numpy as np
import pytest

from bicap.metrics import (
    EfficacyTable,
    LabelLexicon,
    bleu2,
    clinical_efficacy,
    confusion_matrix,
    default_lexicon,
    hallucination_rate,
    lexicon_label,
    macro_f1,
    paired_one_sided_t,
    pr_auc,
    precision_frequency_correlation,
    roc_auc,
    row_normalized,
    youden_threshold,
)


def brute_force_auc(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    total = wins = 0.0
    for sp in scores[labels == 1]:
        for sn in scores[labels == 0]:
            total += 1
            if sp > sn:
                wins += 1
            elif sp == sn:
                wins += 0.5
    return wins / total


def sweep_pr_auc(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    npos = labels.sum()
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        recall = tp / npos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def sweep_youden(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    distinct = np.unique(scores)
    if len(distinct) < 2:
        return float(distinct[0]), 0.0
    best = (None, -np.inf)
    for lo, hi in zip(distinct[:-1], distinct[1:]):
        t = (lo + hi) / 2
        tpr = ((scores >= t) & (labels == 1)).sum() / (labels == 1).sum()
        fpr = ((scores >= t) & (labels == 0)).sum() / (labels == 0).sum()
        if tpr - fpr > best[1]:
            best = (t, tpr - fpr)
    return best


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_label_inversion_symmetry(self):
        rng = np.random.default_rng(0)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        if labels.sum() in (0, 30):
            labels[:3] = [0, 1, 1]
        assert roc_auc(scores, labels) == pytest.approx(1.0 - roc_auc(scores, 1 - labels), abs=0)

    def test_worked_case(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(2, 60))
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert roc_auc(scores, labels) == brute_force_auc(scores, labels)


class TestPrAuc:
    def test_perfect_separation(self):
        assert pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_identical_scores_give_prevalence(self):
        assert pr_auc([0.5] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]) == pytest.approx(0.3, abs=1e-12)

    def test_no_positive_rejected(self):
        with pytest.raises(ValueError):
            pr_auc([0.4, 0.2], [0, 0])

    def test_matches_threshold_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(2, 50))
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, n)
            if labels.sum() == 0:
                labels[0] = 1
            assert pr_auc(scores, labels) == pytest.approx(sweep_pr_auc(scores, labels), abs=1e-9)


class TestYouden:
    def test_perfect_separation_gap_midpoint(self):
        t, j = youden_threshold([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1])
        assert j == 1.0
        assert t == pytest.approx(0.45)

    def test_constant_scores(self):
        t, j = youden_threshold([0.3, 0.3, 0.3], [0, 1, 0])
        assert (t, j) == (0.3, 0.0)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(4, 24))
            scores = np.round(rng.random(n), 1)
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert youden_threshold(scores, labels) == sweep_youden(scores, labels)


class TestConfusionMatrix:
    def test_diagonal_when_equal(self):
        counts = confusion_matrix([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert np.array_equal(counts, np.diag([1, 2, 1]))

    def test_total_is_n(self):
        rng = np.random.default_rng(4)
        pred = rng.integers(0, 4, 50)
        true = rng.integers(0, 4, 50)
        assert confusion_matrix(pred, true, 4).sum() == 50

    def test_hand_tally(self):
        counts = confusion_matrix([1, 0, 1, 2, 2], [0, 0, 1, 1, 2], 3)
        want = np.array([[1, 1, 0], [0, 1, 1], [0, 0, 1]])
        assert np.array_equal(counts, want)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix([3], [0], 3)

    def test_row_normalized(self):
        counts = np.array([[2, 2], [0, 0]])
        norm = row_normalized(counts)
        assert np.allclose(norm, [[0.5, 0.5], [0.0, 0.0]])


class TestMacroF1:
    def test_perfect(self):
        sets = [{"a"}, {"b"}, {"a", "b"}]
        table = macro_f1(sets, sets, ["a", "b"])
        assert table.macro_f1 == 1.0

    def test_disjoint_class_zero(self):
        table = macro_f1([{"a"}] * 3, [{"b"}] * 3, ["a", "b"])
        assert table.f1["a"] == 0.0 and table.f1["b"] == 0.0

    def test_hand_case(self):
        pred = [{"a"}, {"a", "b"}, set(), {"b"}]
        true = [{"a"}, {"b"}, {"a"}, set()]
        table = macro_f1(pred, true, ["a", "b"])
        # a: tp=1 fp=1 fn=1 -> P=0.5 R=0.5 F1=0.5; b: tp=1 fp=1 fn=0 -> P=0.5 R=1 F1=2/3
        assert table.precision["a"] == 0.5 and table.recall["a"] == 0.5 and table.f1["a"] == 0.5
        assert table.precision["b"] == 0.5 and table.recall["b"] == 1.0
        assert table.f1["b"] == pytest.approx(2 / 3)
        assert table.macro_f1 == pytest.approx((0.5 + 2 / 3) / 2)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        pred = [set(np.array(["a", "b", "c"])[rng.random(3) < 0.5]) for _ in range(20)]
        true = [set(np.array(["a", "b", "c"])[rng.random(3) < 0.5]) for _ in range(20)]
        table = macro_f1(pred, true, ["a", "b", "c"])
        order = rng.permutation(20)
        shuffled = macro_f1([pred[i] for i in order], [true[i] for i in order], ["a", "b", "c"])
        assert table.macro_f1 == shuffled.macro_f1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            macro_f1([], [], ["a"])


class TestBleu2:
    def test_identical(self):
        assert bleu2("no acute findings today", "no acute findings today") == 1.0

    def test_zero_overlap(self):
        assert bleu2("alpha beta gamma", "delta epsilon zeta") == 0.0

    def test_worked_case(self):
        # p1 = 2/3, p2 = 1/2, BP = 1
        assert bleu2("a b c", "a b d") == pytest.approx(math.sqrt((2 / 3) * 0.5), abs=1e-9)

    def test_empty_candidate_rejected(self):
        with pytest.raises(ValueError):
            bleu2("", "reference text")

    def test_bounds_and_case_insensitivity(self):
        rng = np.random.default_rng(6)
        words = ["no", "edema", "small", "effusion", "seen", "clear"]
        for _ in range(200):
            cand = " ".join(rng.choice(words, size=rng.integers(2, 8)))
            ref = " ".join(rng.choice(words, size=rng.integers(2, 8)))
            score = bleu2(cand, ref)
            assert 0.0 <= score <= 1.0
            assert score == bleu2(cand.upper(), ref)

    def test_brevity_penalty(self):
        # candidate shorter than reference gets penalized
        long_ref = "a b c d e f"
        assert bleu2("a b", long_ref) == pytest.approx(math.exp(1 - 6 / 2) * 1.0, abs=1e-9)

    def test_matches_hand_oracle_random(self):
        rng = np.random.default_rng(7)
        words = list("abcdef")

        def oracle(cand, ref):
            ct, rt = cand.split(), ref.split()
            ps = []
            for n in (1, 2):
                cg = [tuple(ct[i : i + n]) for i in range(len(ct) - n + 1)]
                rg = [tuple(rt[i : i + n]) for i in range(len(rt) - n + 1)]
                if not cg:
                    return 0.0
                matched = sum(min(cg.count(g), rg.count(g)) for g in set(cg))
                ps.append(matched / len(cg))
            if 0.0 in ps:
                return 0.0
            return min(1.0, math.exp(1 - len(rt) / len(ct))) * math.sqrt(ps[0] * ps[1])

        for _ in range(300):
            cand = " ".join(rng.choice(words, size=rng.integers(2, 9)))
            ref = " ".join(rng.choice(words, size=rng.integers(2, 9)))
            assert bleu2(cand, ref) == pytest.approx(oracle(cand, ref), abs=1e-9)


class TestLexiconLabel:
    def setup_method(self):
        self.lex = default_lexicon()

    def test_positive_mention(self):
        assert lexicon_label("There is mild edema.", self.lex) == {"edema"}

    def test_negated(self):
        assert lexicon_label("No edema.", self.lex) == set()

    def test_per_sentence_negation_scope(self):
        assert lexicon_label("No edema. Small effusion.", self.lex) == {"effusion"}

    def test_negation_window(self):
        # cue within four tokens negates; a fifth-token gap does not
        assert lexicon_label("without clear sign of edema.", self.lex) == set()
        assert lexicon_label("no one could doubt there was edema.", self.lex) == {"edema"}

    def test_positive_mention_overrides_negated_one(self):
        text = "No edema. Severe edema is seen."
        assert lexicon_label(text, self.lex) == {"edema"}

    def test_multiword_cue(self):
        lex = LabelLexicon(("edema",), {"edema": ["edema"]}, ("free of",))
        assert lexicon_label("lungs are free of edema.", lex) == set()
        assert lexicon_label("free edema.", lex) == {"edema"}

    def test_substring_phrase_rejected(self):
        with pytest.raises(ValueError):
            LabelLexicon(("a", "b"), {"a": ["edema"], "b": ["edema severity"]})


class TestClinicalEfficacy:
    def test_ground_truth_self_match(self):
        from bicap.data import synth_generate
        from bicap.textpipe import Report

        records, _ = synth_generate(seed=8, n=40)
        lex = default_lexicon()
        texts = [Report(r["findings"], r["impression"]).text() for r in records]
        truth = [set(r["labels"]) for r in records]
        table = clinical_efficacy(texts, truth, lex)
        assert table.macro_f1 == 1.0

    def test_shuffled_reports_strictly_below_self_match(self):
        from bicap.data import synth_generate
        from bicap.textpipe import Report

        records, _ = synth_generate(seed=9, n=60)
        lex = default_lexicon()
        texts = [Report(r["findings"], r["impression"]).text() for r in records]
        truth = [set(r["labels"]) for r in records]
        for seed in (0, 1, 2):
            order = np.random.default_rng(seed).permutation(len(texts))
            table = clinical_efficacy([texts[i] for i in order], truth, lex)
            assert table.macro_f1 < 1.0

    def test_frequency_column_and_correlation(self):
        lex = default_lexicon()
        texts = ["edema.", "effusion.", "edema. effusion.", "opacity."]
        truth = [{"edema"}, {"effusion", "edema"}, {"edema"}, {"device"}]
        freq = {c: 0.1 * (i + 1) for i, c in enumerate(lex.pathologies)}
        table = clinical_efficacy(texts, truth, lex, train_frequency=freq)
        assert set(table.train_frequency) == set(lex.pathologies)
        r = precision_frequency_correlation(table)
        assert -1.0 <= r <= 1.0

    def test_csv_and_dict_emission(self):
        table = macro_f1([{"a"}], [{"a"}], ["a", "b"])
        as_dict = table.to_dict()
        assert as_dict["macro_f1"] == table.macro_f1
        csv = table.to_csv()
        assert csv.splitlines()[0].startswith("class,precision,recall,f1")


class TestHallucinationRate:
    def test_half(self):
        assert hallucination_rate(["stable compared to prior.", "clear lungs."]) == 0.5

    def test_zero_and_one(self):
        assert hallucination_rate(["clear lungs.", "no edema."]) == 0.0
        assert hallucination_rate(["prior exam.", "comparison made."]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            hallucination_rate([])


class TestPairedT:
    def test_positive_difference(self):
        t, p = paired_one_sided_t([1.0, 1.1, 0.9, 1.2], [0.5, 0.6, 0.4, 0.7])
        assert t > 0 and p < 0.01

    def test_no_difference(self):
        t, p = paired_one_sided_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert p >= 0.5
