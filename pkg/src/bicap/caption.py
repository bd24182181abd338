"""Autoregressive report generation with nucleus sampling.

Three modes: unprompted (free generation until the sequence end token),
prompted (one sentence per prompt, stopping at the sentence stop), and
iterative prompted (each prompted sentence is extended leftwards by the
backward decoder, so modifiers can appear before the prompt). Generation is
pure given (params, image, prompts, seed): identical inputs give identical
reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import BACKWARD, FORWARD, ModelParams, decoder_forward_batch, encode_image
from .rng import make_rng
from .textpipe import SEP, SOS, STOP, Vocabulary, detokenize, split_sentences, tokenize

ARGMAX_TEMPERATURE = 1e-6


class PromptTooLong(ValueError):
    """Tokenized prompt leaves no room for generation."""


@dataclass
class SamplingPolicy:
    nucleus_p: float = 0.9
    temperature: float = 1.0
    max_length: int | None = None  # total token budget; None = context length
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus mass must be in (0, 1]")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


@dataclass
class PromptSpec:
    text: str
    stop_tokens: tuple
    direction: str = FORWARD

    def __post_init__(self):
        if not self.stop_tokens:
            raise ValueError("stop set must be non-empty")


@dataclass
class GeneratedReport:
    mode: str
    sentences: list
    prompts: list
    text: str
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "sentences": list(self.sentences),
            "prompts": list(self.prompts),
            "text": self.text,
            "fallback": self.fallback,
        }


def nucleus_sample(probabilities, p: float, rng: np.random.Generator) -> int:
    """Sample from the smallest probability prefix with mass >= p.

    Probabilities are sorted descending (ties broken by lower token id), the
    prefix renormalized, and a token drawn from it.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 1 or len(probs) == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if probs.min() < -1e-12 or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must be non-negative and sum to 1")
    if not 0.0 < p <= 1.0:
        raise ValueError("nucleus mass must be in (0, 1]")
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    reached = np.nonzero(cum >= p - 1e-12)[0]
    cut = int(reached[0]) if len(reached) else len(probs) - 1
    support = probs[order[: cut + 1]]
    c = np.cumsum(support)
    j = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return int(order[min(j, cut)])


def _next_token(logits_row: np.ndarray, policy: SamplingPolicy, rng) -> int:
    z = logits_row.astype(np.float64)
    if policy.temperature < ARGMAX_TEMPERATURE:
        return int(np.argmax(z))
    z = z / policy.temperature
    z -= z.max()
    e = np.exp(z)
    return nucleus_sample(e / e.sum(), policy.nucleus_p, rng)


def _generate(params, x_vis, start_ids, stop_ids, direction, policy, rng) -> list:
    """Core loop: append sampled tokens until a stop token or the budget."""
    cfg = params.config
    budget = min(policy.max_length or cfg.context_len, cfg.context_len)
    if len(start_ids) >= budget:
        raise PromptTooLong(f"prompt occupies {len(start_ids)} of {budget} tokens")
    ids = list(start_ids)
    with T.no_grad():
        while len(ids) < budget:
            logits = decoder_forward_batch(params, x_vis, np.asarray([ids]), direction)
            tok = _next_token(logits.data[0, -1], policy, rng)
            ids.append(tok)
            if tok in stop_ids:
                break
    return ids


def _stop_ids(vocab: Vocabulary, stop_tokens) -> set:
    return {vocab.index[t] for t in stop_tokens}


def autoregressive_caption(
    params: ModelParams,
    vocab: Vocabulary,
    image: np.ndarray,
    prompt_spec: PromptSpec,
    policy: SamplingPolicy,
    rng=None,
    x_vis=None,
) -> list:
    """One generation pass; returns token ids in natural report order.

    Forward passes start [SOS] + prompt; backward passes run over the
    reversed sequence starting [SEP] + reversed prompt and are un-reversed on
    return, so the prompt block sits immediately before [SEP].
    """
    rng = rng if rng is not None else make_rng(policy.seed, "caption")
    if x_vis is None:
        with T.no_grad():
            x_vis = encode_image(params, image)
    vis = T.reshape(x_vis, (1,) + tuple(x_vis.shape))
    prompt_ids = tokenize(prompt_spec.text, vocab)
    stop = _stop_ids(vocab, prompt_spec.stop_tokens)
    if prompt_spec.direction == FORWARD:
        ids = _generate(params, vis, [vocab.sos_id] + prompt_ids, stop, FORWARD, policy, rng)
        return ids
    ids = _generate(params, vis, [vocab.sep_id] + prompt_ids[::-1], stop, BACKWARD, policy, rng)
    return ids[::-1]


def _strip_specials(ids, vocab: Vocabulary) -> list:
    return [i for i in ids if i not in (vocab.sos_id, vocab.sep_id, vocab.pad_id)]


def unprompted_report(params, vocab, image, policy: SamplingPolicy) -> GeneratedReport:
    """Free-running forward generation, stopping at [SEP]."""
    spec = PromptSpec(text="", stop_tokens=(SEP,), direction=FORWARD)
    ids = autoregressive_caption(params, vocab, image, spec, policy)
    text = detokenize(ids, vocab)
    return GeneratedReport(mode="unprompted", sentences=split_sentences(text), prompts=[], text=text)


def _forward_sentence(params, vocab, x_vis, prompt: str, policy, rng) -> list:
    spec = PromptSpec(text=prompt, stop_tokens=(STOP, SEP), direction=FORWARD)
    ids = autoregressive_caption(params, vocab, None, spec, policy, rng=rng, x_vis=x_vis)
    return _strip_specials(ids, vocab)


def _backward_extend(params, vocab, x_vis, sentence_ids, policy, rng) -> list:
    """Backward continuation of a sentence; returns prefix token ids."""
    budget = min(policy.max_length or params.config.context_len, params.config.context_len)
    if len(sentence_ids) + 1 >= budget:
        return []
    rev_start = [vocab.sep_id] + list(sentence_ids)[::-1]
    stop = {vocab.stop_id, vocab.sos_id, vocab.sep_id}
    ids = _generate(params, T.reshape(x_vis, (1,) + tuple(x_vis.shape)), rev_start, stop, BACKWARD, policy, rng)
    generated = ids[len(rev_start):]
    if generated and generated[-1] in stop:
        generated = generated[:-1]
    return generated[::-1]


def prompted_report(params, vocab, image, prompts, policy: SamplingPolicy) -> GeneratedReport:
    """One sentence per prompt (forward only), concatenated in prompt order."""
    _check_prompts(prompts)
    rng = make_rng(policy.seed, "caption")
    with T.no_grad():
        x_vis = encode_image(params, image)
    sentences = []
    for prompt in prompts:
        sentences.append(detokenize(_forward_sentence(params, vocab, x_vis, prompt, policy, rng), vocab))
    return GeneratedReport(mode="prompted", sentences=sentences, prompts=list(prompts), text=" ".join(sentences))


def iterative_prompted_report(params, vocab, image, prompts, policy: SamplingPolicy) -> GeneratedReport:
    """Prompted sentences extended leftwards by the backward decoder."""
    _check_prompts(prompts)
    rng = make_rng(policy.seed, "caption")
    with T.no_grad():
        x_vis = encode_image(params, image)
    sentences = []
    for prompt in prompts:
        fwd = _forward_sentence(params, vocab, x_vis, prompt, policy, rng)
        prefix = _backward_extend(params, vocab, x_vis, fwd, policy, rng)
        sentences.append(detokenize(prefix + fwd, vocab))
    return GeneratedReport(mode="iterative", sentences=sentences, prompts=list(prompts), text=" ".join(sentences))


def _check_prompts(prompts):
    if not prompts:
        raise ValueError("need at least one prompt")
    if any(not p.strip() for p in prompts):
        raise ValueError("empty prompt string in list")


def select_prompts(class_probabilities, thresholds, class_names) -> list:
    """Class names whose probability reaches its threshold, in class order."""
    probs = np.asarray(class_probabilities, dtype=np.float64)
    thr = np.asarray(thresholds, dtype=np.float64)
    names = list(class_names)
    if probs.shape != thr.shape or len(probs) != len(names):
        raise ValueError("probabilities, thresholds and names must align")
    return [name for prob, t, name in zip(probs, thr, names) if prob >= t]


def generate_report(params, vocab, image, mode: str, policy: SamplingPolicy, prompts=None) -> GeneratedReport:
    """Mode dispatch; prompted modes with no prompts fall back to unprompted
    generation and flag it."""
    if mode == "unprompted":
        return unprompted_report(params, vocab, image, policy)
    if mode not in ("prompted", "iterative"):
        raise ValueError(f"unknown mode {mode!r}")
    if not prompts:
        report = unprompted_report(params, vocab, image, policy)
        report.mode = mode
        report.fallback = True
        return report
    if mode == "prompted":
        return prompted_report(params, vocab, image, prompts, policy)
    return iterative_prompted_report(params, vocab, image, prompts, policy)
