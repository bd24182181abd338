"""Vocabulary, subword tokenization, report cleaning and sequence prep.

Tokenization is greedy longest-match over subword pieces with the "##"
continuation convention; any vocabulary file that follows it is loadable.
Report cleaning drops whole sentences containing the stems "prior" or
"compar" (case-insensitive substring match), and the same rule powers the
prior-reference detector used for hallucination measurement.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

SOS = "[SOS]"
SEP = "[SEP]"
PAD = "[PAD]"
UNK = "[UNK]"
STOP = "."
SPECIAL_TOKENS = (PAD, UNK, SOS, SEP, STOP)
# structural markers never produced by tokenization; the sentence stop "."
# is ordinary text and must survive a tokenize/detokenize round trip
STRUCTURAL_SPECIALS = (PAD, UNK, SOS, SEP)
CONTINUATION = "##"

PRIOR_STEMS = ("prior", "compar")

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class VocabularyError(ValueError):
    """Vocabulary file is malformed (duplicate token or missing special)."""


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise VocabularyError(f"duplicate token {tok!r}")
            self.index[tok] = i
        for special in SPECIAL_TOKENS:
            if special not in self.index:
                raise VocabularyError(f"missing special token {special!r}")
        self.sos_id = self.index[SOS]
        self.sep_id = self.index[SEP]
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.stop_id = self.index[STOP]

    def __len__(self):
        return len(self.tokens)

    def lookup(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise IndexError(f"token id {token_id} out of range [0, {len(self.tokens)})")
        return self.tokens[token_id]


@dataclass
class TokenSequence:
    """Token ids padded to a fixed context length; ``length`` counts the
    valid prefix (ids beyond it are [PAD])."""

    ids: list[int]
    length: int


@dataclass
class Report:
    findings: str
    impression: str

    def text(self) -> str:
        return " ".join(part for part in (self.findings, self.impression) if part)


def load_vocabulary(path) -> Vocabulary:
    """Read a UTF-8 vocabulary file, one token per line, file order = id."""
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    tokens = [t for t in tokens if t]
    return Vocabulary(tokens)


def save_vocabulary(vocab_tokens, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab_tokens:
            fh.write(tok + "\n")


def _wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match split of one lowercase word; [UNK] if any span
    has no matching piece."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.index and piece not in STRUCTURAL_SPECIALS:
                found = piece
                break
            end -= 1
        if found is None:
            return [UNK]
        pieces.append(found)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on whitespace/punctuation, then greedy subwords.

    Emits no specials other than [UNK]; [SOS]/[SEP]/[PAD] are added later by
    sequence preparation.
    """
    ids = []
    for word in _WORD_RE.findall(text.lower()):
        for piece in _wordpiece(word, vocab):
            ids.append(vocab.index[piece])
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    """Join pieces back into text: merge "##" continuations, attach
    punctuation to the preceding word, drop [SOS]/[SEP]/[PAD]."""
    words = []
    for token_id in ids:
        tok = vocab.lookup(int(token_id))
        if tok in (SOS, SEP, PAD):
            continue
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        elif _WORD_RE.fullmatch(tok) and not tok[0].isalnum() and words:
            words[-1] += tok
        else:
            words.append(tok)
    return " ".join(words)


def split_sentences(text: str) -> list[str]:
    """Split on the sentence stop ".", keeping non-empty trimmed segments."""
    return [seg.strip() for seg in text.split(STOP) if seg.strip()]


def _has_prior_stem(sentence: str) -> bool:
    low = sentence.lower()
    return any(stem in low for stem in PRIOR_STEMS)


def _strip_prior_sentences(section: str) -> str:
    kept = [s for s in split_sentences(section) if not _has_prior_stem(s)]
    return (STOP + " ").join(kept) + STOP if kept else ""


def remove_prior_references(report: Report) -> Report:
    """Delete every sentence mentioning a prior study from both sections."""
    return Report(
        findings=_strip_prior_sentences(report.findings),
        impression=_strip_prior_sentences(report.impression),
    )


def detect_prior_reference(text: str) -> bool:
    """True iff any sentence refers to a prior study ("prior"/"compar").

    The stems never span a sentence boundary, so a whole-text substring
    check is equivalent to the per-sentence scan.
    """
    return _has_prior_stem(text)


def prepare_training_sequence(report: Report, vocab: Vocabulary, context_len: int) -> TokenSequence:
    """[SOS] + tokens(findings + " " + impression) + [SEP], truncated so the
    final valid token is always [SEP], padded with [PAD] to context_len."""
    if context_len < 3:
        raise ValueError("context length must be >= 3")
    body = tokenize(report.text(), vocab)
    if not body:
        raise ValueError("cannot prepare a sequence from an empty report")
    body = body[: context_len - 2]
    ids = [vocab.sos_id] + body + [vocab.sep_id]
    length = len(ids)
    ids = ids + [vocab.pad_id] * (context_len - length)
    return TokenSequence(ids=ids, length=length)
