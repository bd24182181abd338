"""Synthetic image-report corpus, augmentation, manifests and splits.

Each pathology in the lexicon renders a distinct visual motif on a textured
background, and its report sentences come from per-pathology templates, so
the lexicon labeler recovers the stored label set exactly for every
generated example. A configurable fraction of reports receives an injected
prior-reference sentence to exercise removal and hallucination metrics.

On disk a corpus is: images/*.pgm (8-bit binary PGM), manifest.jsonl (one
record per line), vocab.txt (one token per line) and stats.json.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .metrics import LabelLexicon, default_lexicon, lexicon_label
from .rng import make_rng
from .textpipe import SPECIAL_TOKENS, Report

SEVERITY_PATHOLOGY = "edema"
SEVERITY_WORDS = {1: "mild", 2: "moderate", 3: "severe"}

POSITIVE_TEMPLATES = {
    "edema": [
        "there is {sev} edema",
        "{sev} edema is seen",
        "{sev} edema is present in both lungs",
    ],
    "effusion": [
        "there is a small effusion",
        "a small effusion is present",
        "effusion is seen at the left base",
    ],
    "opacity": [
        "there is a focal opacity",
        "a patchy opacity is seen",
        "opacity is present in the upper zone",
    ],
    "device": [
        "a support device is in place",
        "the device is in standard position",
        "a device projects over the chest",
    ],
    "fracture": [
        "there is an acute fracture",
        "a fracture is seen laterally",
        "a fracture of the posterior rib is noted",
    ],
    "pneumothorax": [
        "there is a small pneumothorax",
        "a pneumothorax is seen at the apex",
        "pneumothorax is present on the right",
    ],
}

NEGATIVE_TEMPLATES = [
    "no {name}",
    "there is no {name}",
    "no evidence of {name}",
]

PRIOR_SENTENCES = [
    "compared with the prior radiograph there is little interval change",
    "stable appearance compared to prior imaging",
    "no change from the prior exam",
]

EMPTY_FINDINGS_SENTENCE = "the lungs are clear"
IMPRESSION_POSITIVE = "findings are consistent with {names}"
IMPRESSION_NEGATIVE = "no acute cardiopulmonary process"

DEFAULT_PREVALENCES = {
    "edema": 0.30,
    "effusion": 0.30,
    "opacity": 0.25,
    "device": 0.25,
    "fracture": 0.20,
    "pneumothorax": 0.20,
}


@dataclass
class AugmentPolicy:
    """Augmentation pipeline knobs, applied in the training order:
    normalize, small rotation, square crop, resize, right-angle rotation."""

    rotate_degrees: float = 0.0
    crop_to_square: bool = True
    output_side: int = 64
    right_angle_set: tuple = (0,)
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.rotate_degrees < 0:
            raise ValueError("rotation range must be >= 0")
        if self.output_side <= 0:
            raise ValueError("output side must be positive")
        self.right_angle_set = tuple(self.right_angle_set)
        if any(a not in (0, 90, 180, 270) for a in self.right_angle_set):
            raise ValueError("right-angle set entries must be multiples of 90 in [0, 270]")


def normalize_image(image: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return (np.asarray(image, dtype=np.float32) - np.float32(mean)) / np.float32(std)


def augment_image(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment one grayscale image to (output_side, output_side)."""
    img = normalize_image(image, policy.mean, policy.std)
    if policy.rotate_degrees > 0:
        angle = rng.uniform(-policy.rotate_degrees, policy.rotate_degrees)
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if policy.crop_to_square:
        h, w = img.shape
        side = min(h, w)
        off_y = int(rng.integers(0, h - side + 1))
        off_x = int(rng.integers(0, w - side + 1))
        img = img[off_y : off_y + side, off_x : off_x + side]
    side = img.shape[0]
    s = policy.output_side
    if side < s:
        raise ValueError(f"image side {side} smaller than output side {s}")
    if side != s:
        img = ndimage.zoom(img, (s / side, s / side), order=1)
        img = img[:s, :s]
    if len(policy.right_angle_set) > 1 or policy.right_angle_set[0] != 0:
        angle = policy.right_angle_set[int(rng.integers(len(policy.right_angle_set)))]
        img = np.rot90(img, angle // 90)
    return np.ascontiguousarray(img, dtype=np.float32)


# ---------------------------------------------------------------------------
# motif rendering


def _motif_edema(img, rng, s, severity):
    cy = (0.38 + 0.24 * rng.random()) * s
    cx = (0.30 + 0.40 * rng.random()) * s
    radius = (0.09 + 0.05 * rng.random()) * s
    intensity = {1: 0.16, 2: 0.30, 3: 0.46}[severity] + 0.03 * rng.random()
    yy, xx = np.mgrid[0:s, 0:s]
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] += intensity


def _motif_effusion(img, rng, s, severity):
    depth = int((0.18 + 0.12 * rng.random()) * s)
    left = rng.random() < 0.5
    yy, xx = np.mgrid[0:s, 0:s]
    rise = (yy - (s - depth)) / depth
    wedge = (rise > 0) & ((xx < rise * s * 0.5) if left else (xx > s - rise * s * 0.5))
    img[wedge] -= 0.30 + 0.05 * rng.random()


def _motif_opacity(img, rng, s, severity):
    cy = (0.25 + 0.5 * rng.random()) * s
    cx = (0.25 + 0.5 * rng.random()) * s
    sigma = (0.08 + 0.06 * rng.random()) * s
    yy, xx = np.mgrid[0:s, 0:s]
    img += (0.22 + 0.05 * rng.random()) * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))


def _motif_device(img, rng, s, severity):
    x0 = int((0.2 + 0.6 * rng.random()) * s)
    y0 = int(0.05 * s + 0.15 * s * rng.random())
    y1 = int(0.55 * s + 0.3 * s * rng.random())
    drift = rng.integers(-1, 2)
    for y in range(y0, y1):
        x = int(np.clip(x0 + drift * (y - y0) * 0.2, 0, s - 2))
        img[y, x : x + 2] += 0.5


def _motif_fracture(img, rng, s, severity):
    y = int((0.3 + 0.4 * rng.random()) * s)
    x = int((0.1 + 0.3 * rng.random()) * s)
    for k in range(3):
        dy = int(rng.integers(-3, 4))
        seg = int(0.08 * s)
        y = int(np.clip(y + dy, 1, s - 2))
        img[y, x : min(x + seg, s - 1)] += 0.42
        x = min(x + seg, s - 2)


def _motif_pneumothorax(img, rng, s, severity):
    width = int((0.06 + 0.06 * rng.random()) * s)
    ramp = np.linspace(0.26, 0.0, width, dtype=np.float32)
    if rng.random() < 0.5:
        img[:, :width] -= ramp[None, :]
    else:
        img[:, s - width :] -= ramp[None, ::-1]


MOTIF_RENDERERS = {
    "edema": _motif_edema,
    "effusion": _motif_effusion,
    "opacity": _motif_opacity,
    "device": _motif_device,
    "fracture": _motif_fracture,
    "pneumothorax": _motif_pneumothorax,
}


def _render_image(labels, severity, rng, s):
    base = 0.34 + 0.10 * ndimage.zoom(rng.standard_normal((8, 8)), s / 8, order=1)
    img = (base + 0.05 * rng.standard_normal((s, s))).astype(np.float32)
    for name in MOTIF_RENDERERS:
        if name in labels:
            MOTIF_RENDERERS[name](img, rng, s, severity)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# corpus generation


def _join_sentences(sentences) -> str:
    return (". ".join(sentences) + ".") if sentences else ""


def _build_report(labels, severity, lexicon, rng, prior_fraction, negation_prob):
    sentences = []
    for name in lexicon.pathologies:
        if name in labels:
            template = POSITIVE_TEMPLATES[name][int(rng.integers(len(POSITIVE_TEMPLATES[name])))]
            sentences.append(template.format(sev=SEVERITY_WORDS[severity]) if name == SEVERITY_PATHOLOGY else template)
        elif rng.random() < negation_prob:
            template = NEGATIVE_TEMPLATES[int(rng.integers(len(NEGATIVE_TEMPLATES)))]
            sentences.append(template.format(name=name))
    if not sentences:
        sentences = [EMPTY_FINDINGS_SENTENCE]
    order = rng.permutation(len(sentences))
    sentences = [sentences[i] for i in order]
    if rng.random() < prior_fraction:
        prior = PRIOR_SENTENCES[int(rng.integers(len(PRIOR_SENTENCES)))]
        sentences.insert(int(rng.integers(len(sentences) + 1)), prior)
    if labels:
        impression = IMPRESSION_POSITIVE.format(names=" and ".join(n for n in lexicon.pathologies if n in labels))
    else:
        impression = IMPRESSION_NEGATIVE
    return Report(findings=_join_sentences(sentences), impression=impression + ".")


def build_vocab_tokens(lexicon: LabelLexicon | None = None) -> list[str]:
    """Specials plus every word any template can emit, sorted."""
    lexicon = lexicon or default_lexicon()
    words = set()
    texts = [EMPTY_FINDINGS_SENTENCE, IMPRESSION_NEGATIVE, IMPRESSION_POSITIVE.format(names="x and y")]
    texts += PRIOR_SENTENCES
    texts += [t.format(name="x") for t in NEGATIVE_TEMPLATES]
    for name, templates in POSITIVE_TEMPLATES.items():
        texts += [t.format(sev="x") for t in templates]
    for text in texts:
        words.update(w for w in text.split() if w not in ("x", "y"))
    words.update(lexicon.pathologies)
    words.update(SEVERITY_WORDS.values())
    return list(SPECIAL_TOKENS) + sorted(words)


def synth_generate(
    seed: int,
    n: int,
    lexicon: LabelLexicon | None = None,
    prevalences: dict | None = None,
    prior_fraction: float = 0.4,
    negation_prob: float = 0.5,
    image_size: int = 64,
    studies_per_patient: int = 2,
):
    """Generate n paired examples; deterministic in every argument.

    Returns (records, images): records are manifest dicts (split untagged),
    images an (n, S, S) float array in [0, 1].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lexicon = lexicon or default_lexicon()
    unknown = [p for p in lexicon.pathologies if p not in MOTIF_RENDERERS]
    if unknown:
        raise ValueError(f"no motif available for pathologies {unknown} (inventory: {sorted(MOTIF_RENDERERS)})")
    prevalences = dict(DEFAULT_PREVALENCES if prevalences is None else prevalences)
    records = []
    images = np.zeros((n, image_size, image_size), dtype=np.float32)
    for i in range(n):
        rng = make_rng(seed, "example", i)
        labels = [p for p in lexicon.pathologies if rng.random() < prevalences.get(p, 0.0)]
        severity = int(rng.integers(1, 4)) if SEVERITY_PATHOLOGY in labels else None
        report = _build_report(labels, severity, lexicon, rng, prior_fraction, negation_prob)
        got = lexicon_label(report.text(), lexicon)
        if got != set(labels):
            raise AssertionError(f"template labeling drifted: {sorted(got)} != {sorted(labels)}")
        images[i] = _render_image(set(labels), severity, rng, image_size)
        records.append(
            {
                "image": f"images/ex{i:05d}.pgm",
                "findings": report.findings,
                "impression": report.impression,
                "labels": labels,
                "severity": severity,
                "patient_id": f"p{i // studies_per_patient:05d}",
                "split": "",
            }
        )
    return records, images


# ---------------------------------------------------------------------------
# splits and subsampling


def split_dataset(records: list, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list:
    """Tag records train/val/test, keeping each patient in a single split."""
    names = ("train", "val", "test")
    if len(fractions) != len(names):
        raise ValueError("fractions must give (train, val, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    patients = list(dict.fromkeys(r["patient_id"] for r in records))
    order = make_rng(seed, "split").permutation(len(patients))
    shuffled = [patients[i] for i in order]
    counts = [int(round(f * len(patients))) for f in fractions]
    counts[0] = len(patients) - sum(counts[1:])
    assign = {}
    start = 0
    for name, count in zip(names, counts):
        for pid in shuffled[start : start + count]:
            assign[pid] = name
        start += count
    out = []
    for r in records:
        tagged = dict(r)
        tagged["split"] = assign[r["patient_id"]]
        out.append(tagged)
    return out


def subsample_labels(records: list, fraction: float, seed: int = 0) -> list:
    """Label-stratified random subset (for data-efficiency experiments).

    Stratifies by exact label signature; raises if the result loses every
    positive of some class that was present in the input.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return list(records)
    groups: dict = {}
    for r in records:
        groups.setdefault(tuple(sorted(r["labels"])), []).append(r)
    rng = make_rng(seed, "subsample")
    kept = []
    for sig in sorted(groups):
        members = groups[sig]
        take = max(1, int(round(fraction * len(members))))
        order = rng.permutation(len(members))
        kept.extend(members[i] for i in order[:take])
    classes = set()
    for r in records:
        classes.update(r["labels"])
    for cls in classes:
        if not any(cls in r["labels"] for r in kept):
            raise ValueError(f"fraction {fraction} leaves no positive examples of {cls!r}")
    return kept


# ---------------------------------------------------------------------------
# disk I/O


def write_pgm(path, image01: np.ndarray) -> None:
    """8-bit binary PGM (P5); input values clipped from [0, 1]."""
    data = np.clip(np.rint(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into float32 [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {path}")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise ValueError(f"truncated PGM header: {path}")
            if line.startswith(b"#"):
                continue
            fields += line.split()
        w, h, maxval = (int(f) for f in fields)
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"truncated PGM data: {path}")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float32)) / maxval


def save_corpus(root, records, images, vocab_tokens) -> dict:
    """Write images/manifest/vocab/stats under root; returns the stats."""
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    for rec, img in zip(records, images):
        write_pgm(os.path.join(root, rec["image"]), img)
    with open(os.path.join(root, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(root, "vocab.txt"), "w", encoding="utf-8") as fh:
        for tok in vocab_tokens:
            fh.write(tok + "\n")
    freq = {}
    for rec in records:
        for name in rec["labels"]:
            freq[name] = freq.get(name, 0) + 1
    stats = {
        "n": len(records),
        "image_mean": float(np.mean(images)),
        "image_std": float(np.std(images)),
        "label_counts": {k: freq[k] for k in sorted(freq)},
        "label_frequencies": {k: freq[k] / len(records) for k in sorted(freq)},
    }
    with open(os.path.join(root, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return stats


def load_manifest(root) -> list:
    with open(os.path.join(os.fspath(root), "manifest.jsonl"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_stats(root) -> dict:
    with open(os.path.join(os.fspath(root), "stats.json"), encoding="utf-8") as fh:
        return json.load(fh)


def load_images(root, records) -> np.ndarray:
    root = os.fspath(root)
    return np.stack([read_pgm(os.path.join(root, r["image"])) for r in records])


def split_records(records, split: str) -> list:
    return [r for r in records if r["split"] == split]
