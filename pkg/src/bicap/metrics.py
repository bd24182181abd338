"""Classification, text and clinical-efficacy metrics.

Ranking metrics (ROC-AUC, PR-AUC, Youden threshold) treat a prediction as
positive when score >= threshold and give ties half credit. The lexicon
labeler is a deterministic surrogate for a clinical NLP labeler: a pathology
phrase counts as positive unless a negation cue precedes it in the same
sentence within four tokens.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .textpipe import detect_prior_reference

_TOKEN_RE = re.compile(r"[a-z0-9]+")

DEFAULT_PATHOLOGIES = ("edema", "effusion", "opacity", "device", "fracture", "pneumothorax")
DEFAULT_NEGATION_CUES = ("no", "without", "free of")
NEGATION_WINDOW = 4


# ---------------------------------------------------------------------------
# ranking metrics


def _binary_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) < 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counting half."""
    scores, labels = _binary_arrays(scores, labels)
    npos = int(labels.sum())
    nneg = len(labels) - npos
    if npos == 0 or nneg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return float((ranks[labels == 1].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def pr_auc(scores, labels) -> float:
    """Area under precision-recall, step-interpolated at each achievable
    threshold (descending distinct scores)."""
    scores, labels = _binary_arrays(scores, labels)
    npos = int(labels.sum())
    if npos == 0:
        raise ValueError("pr_auc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    area = 0.0
    prev_recall = 0.0
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            tp += int(sorted_labels[j] == 1)
            fp += int(sorted_labels[j] == 0)
            j += 1
        recall = tp / npos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


def youden_threshold(scores, labels) -> tuple[float, float]:
    """(threshold, J) maximizing J = TPR - FPR over midpoints between
    consecutive distinct scores; ties resolved to the lowest threshold."""
    scores, labels = _binary_arrays(scores, labels)
    npos = int(labels.sum())
    nneg = len(labels) - npos
    if npos == 0 or nneg == 0:
        raise ValueError("youden_threshold needs both classes present")
    distinct = np.unique(scores)
    if len(distinct) < 2:
        return float(distinct[0]), 0.0
    best_t, best_j = None, -np.inf
    for lo, hi in zip(distinct[:-1], distinct[1:]):
        t = (lo + hi) / 2.0
        pred = scores >= t
        tpr = float((pred & (labels == 1)).sum()) / npos
        fpr = float((pred & (labels == 0)).sum()) / nneg
        j = tpr - fpr
        if j > best_j:
            best_t, best_j = t, j
    return float(best_t), float(best_j)


def confusion_matrix(pred_classes, true_classes, k: int) -> np.ndarray:
    """counts[i, j] = number of examples with true class i, predicted j."""
    pred = np.asarray(pred_classes, dtype=np.int64)
    true = np.asarray(true_classes, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("pred and true must align")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"class out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


def row_normalized(counts: np.ndarray) -> np.ndarray:
    """Confusion matrix rows as proportions (zero rows stay zero)."""
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


# ---------------------------------------------------------------------------
# set-valued labels


@dataclass
class EfficacyTable:
    classes: list
    precision: dict
    recall: dict
    f1: dict
    macro_precision: float
    macro_recall: float
    macro_f1: float
    train_frequency: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "classes": list(self.classes),
            "per_class": {
                c: {
                    "precision": self.precision[c],
                    "recall": self.recall[c],
                    "f1": self.f1[c],
                    **({"train_frequency": self.train_frequency[c]} if self.train_frequency else {}),
                }
                for c in self.classes
            },
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }
        return out

    def to_csv(self) -> str:
        lines = ["class,precision,recall,f1" + (",train_frequency" if self.train_frequency else "")]
        for c in self.classes:
            row = f"{c},{self.precision[c]:.6f},{self.recall[c]:.6f},{self.f1[c]:.6f}"
            if self.train_frequency:
                row += f",{self.train_frequency[c]:.6f}"
            lines.append(row)
        lines.append(f"macro,{self.macro_precision:.6f},{self.macro_recall:.6f},{self.macro_f1:.6f}" + ("," if self.train_frequency else ""))
        return "\n".join(lines) + "\n"


def macro_f1(pred_sets, true_sets, classes) -> EfficacyTable:
    """Per-class precision/recall/F1 over label sets; F1 = 0 when P+R = 0."""
    if len(pred_sets) != len(true_sets):
        raise ValueError("pred and true lists must align")
    if len(pred_sets) == 0:
        raise ValueError("empty input")
    classes = list(classes)
    precision, recall, f1 = {}, {}, {}
    for c in classes:
        tp = sum(1 for p, t in zip(pred_sets, true_sets) if c in p and c in t)
        fp = sum(1 for p, t in zip(pred_sets, true_sets) if c in p and c not in t)
        fn = sum(1 for p, t in zip(pred_sets, true_sets) if c not in p and c in t)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision[c] = p
        recall[c] = r
        f1[c] = 2 * p * r / (p + r) if p + r else 0.0
    return EfficacyTable(
        classes=classes,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=sum(precision.values()) / len(classes),
        macro_recall=sum(recall.values()) / len(classes),
        macro_f1=sum(f1.values()) / len(classes),
    )


# ---------------------------------------------------------------------------
# text similarity


def _text_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _clipped_precision(cand_tokens, ref_tokens, n) -> float:
    cand = _ngram_counts(cand_tokens, n)
    total = sum(cand.values())
    if total == 0:
        return 0.0
    ref = _ngram_counts(ref_tokens, n)
    matched = sum(min(count, ref.get(g, 0)) for g, count in cand.items())
    return matched / total


def bleu2(candidate: str, reference: str) -> float:
    """Geometric mean of clipped 1/2-gram precision times brevity penalty.

    Tokenization is whitespace over lowercased, punctuation-stripped text;
    no smoothing, so zero overlap at either order scores 0.
    """
    cand = _text_tokens(candidate)
    ref = _text_tokens(reference)
    if not cand:
        raise ValueError("empty candidate")
    p1 = _clipped_precision(cand, ref, 1)
    p2 = _clipped_precision(cand, ref, 2)
    if p1 == 0.0 or p2 == 0.0:
        return 0.0
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return bp * math.sqrt(p1 * p2)


# ---------------------------------------------------------------------------
# lexicon labeling


@dataclass
class LabelLexicon:
    """Pathology phrases plus negation cues, all lowercase.

    ``pathologies`` fixes the canonical class order. No phrase may be a
    substring of another pathology's phrase.
    """

    pathologies: tuple
    phrases: dict
    negation_cues: tuple = DEFAULT_NEGATION_CUES

    def __post_init__(self):
        self.pathologies = tuple(self.pathologies)
        self.negation_cues = tuple(self.negation_cues)
        for name in self.pathologies:
            if name not in self.phrases or not self.phrases[name]:
                raise ValueError(f"pathology {name!r} has no phrases")
        for name, plist in self.phrases.items():
            for phrase in plist:
                if phrase != phrase.lower():
                    raise ValueError(f"phrase {phrase!r} must be lowercase")
                for other, olist in self.phrases.items():
                    if other != name and any(phrase in o for o in olist):
                        raise ValueError(f"phrase {phrase!r} is a substring of a phrase of {other!r}")


def default_lexicon() -> LabelLexicon:
    return LabelLexicon(
        pathologies=DEFAULT_PATHOLOGIES,
        phrases={name: [name] for name in DEFAULT_PATHOLOGIES},
        negation_cues=DEFAULT_NEGATION_CUES,
    )


def _phrase_positions(tokens, phrase_tokens):
    n = len(phrase_tokens)
    return [i for i in range(len(tokens) - n + 1) if tokens[i : i + n] == phrase_tokens]


def lexicon_label(text: str, lexicon: LabelLexicon) -> set:
    """Pathologies asserted by the text under the negation rule.

    A mention is negative when a negation cue ends within NEGATION_WINDOW
    tokens before it in the same sentence; a pathology with at least one
    non-negated mention in any sentence is positive.
    """
    positive = set()
    for sentence in text.split("."):
        tokens = _text_tokens(sentence)
        if not tokens:
            continue
        cue_ends = []
        for cue in lexicon.negation_cues:
            cue_tokens = cue.split()
            for start in _phrase_positions(tokens, cue_tokens):
                cue_ends.append(start + len(cue_tokens) - 1)
        for name in lexicon.pathologies:
            if name in positive:
                continue
            for phrase in lexicon.phrases[name]:
                for start in _phrase_positions(tokens, phrase.split()):
                    negated = any(0 < start - end <= NEGATION_WINDOW for end in cue_ends)
                    if not negated:
                        positive.add(name)
                        break
                if name in positive:
                    break
    return positive


def clinical_efficacy(generated_texts, true_label_sets, lexicon: LabelLexicon, train_frequency: dict | None = None) -> EfficacyTable:
    """Label each generated report, then score against ground-truth sets."""
    if len(generated_texts) != len(true_label_sets):
        raise ValueError("texts and label sets must align")
    pred_sets = [lexicon_label(t, lexicon) for t in generated_texts]
    true_sets = [set(t) for t in true_label_sets]
    table = macro_f1(pred_sets, true_sets, lexicon.pathologies)
    if train_frequency is not None:
        table.train_frequency = {c: float(train_frequency.get(c, 0.0)) for c in table.classes}
    return table


def precision_frequency_correlation(table: EfficacyTable) -> float:
    """Pearson r between per-class precision and training frequency."""
    if not table.train_frequency:
        raise ValueError("table carries no training-frequency column")
    p = np.array([table.precision[c] for c in table.classes])
    f = np.array([table.train_frequency[c] for c in table.classes])
    if np.std(p) == 0 or np.std(f) == 0:
        raise ValueError("correlation undefined for constant inputs")
    return float(np.corrcoef(p, f)[0, 1])


def hallucination_rate(report_texts) -> float:
    """Fraction of reports containing a prior-study reference."""
    texts = list(report_texts)
    if not texts:
        raise ValueError("need at least one report")
    return sum(detect_prior_reference(t) for t in texts) / len(texts)


def paired_one_sided_t(xs, ys) -> tuple[float, float]:
    """Paired one-sided t-test that mean(xs - ys) > 0; returns (t, p).

    Pairs are by position (one entry per seed/trial).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two aligned samples of length >= 2")
    d = xs - ys
    sd = d.std(ddof=1)
    if sd == 0:
        return (math.inf if d.mean() > 0 else (-math.inf if d.mean() < 0 else 0.0)), (0.0 if d.mean() > 0 else 1.0)
    t = d.mean() / (sd / math.sqrt(len(d)))
    p = float(scipy_stats.t.sf(t, len(d) - 1))
    return float(t), p
