"""Slot filling: constrained greedy property prediction and beam search over text slots.

Masked positions are filled left to right. Every decode step runs the model
with a fixed factorization order (visible positions in sequence order, then
the slots), so the query stream of slot ``t`` sees the context plus the
slots already filled.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .masking import EmptyMask, FactorizationOrder, MaskPlan, fixed_order
from .model import rank_masks
from .tokenizer import (
    DOT,
    MASK,
    NEGATIVE,
    SEPARATOR,
    TokenizedSequence,
    Vocabulary,
    encode_sequence,
    property_tag,
)


class NoMaskedNumerals(ValueError):
    pass


@dataclass
class SlotJob:
    """One sequence to fill: ids with slots, and the allowed ids per slot.

    ``context`` fixes the factorization order of the visible positions;
    by default they come in sequence order.
    """

    ids: np.ndarray
    slots: list[int]
    candidates: list[np.ndarray]
    context: list[int] | None = None

    def order(self) -> FactorizationOrder:
        if self.context is None:
            return fixed_order(len(self.ids), self.slots)
        z = np.asarray(list(self.context) + list(self.slots), dtype=np.int64)
        return FactorizationOrder(z, len(self.context))

    def __post_init__(self):
        if len(self.slots) != len(self.candidates):
            raise ValueError("one candidate set per slot required")


@dataclass
class Beam:
    choices: tuple[int, ...]
    score: float
    dists: list[np.ndarray] = field(default_factory=list)


@dataclass
class DecodeResult:
    sequences: list[tuple[TokenizedSequence, float]]

    @property
    def best(self) -> TokenizedSequence:
        return self.sequences[0][0]

    def to_dict(self) -> dict:
        return {
            "sequences": [
                {"text": seq.text_tokens, "props": seq.properties(), "score": score}
                for seq, score in self.sequences
            ]
        }


LogProbFn = Callable[[list[int], int, list[tuple[int, ...]]], np.ndarray]


def beam_search(logprob_fn: LogProbFn, n_slots: Sequence[int], width: int, keep_dists: bool = False):
    """Beam search over fixed slot counts for several items at once.

    ``logprob_fn(items, t, prefixes)`` returns an ``(n, V)`` array of
    log-probabilities for slot ``t`` of each ``items[i]`` given the choices in
    ``prefixes[i]``; disallowed tokens are ``-inf``. Scores are sums of
    log-probabilities; ties go to the earlier beam, then the lower token id.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    beams = [[Beam((), 0.0)] for _ in n_slots]
    for t in range(max(n_slots, default=0)):
        active = [i for i, n in enumerate(n_slots) if t < n]
        rows = [(i, b) for i in active for b in beams[i]]
        if not rows:
            continue
        logp = logprob_fn([i for i, _ in rows], t, [b.choices for _, b in rows])
        expanded: dict[int, list] = {i: [] for i in active}
        for r, (i, beam) in enumerate(rows):
            finite = np.flatnonzero(np.isfinite(logp[r]))
            rank = len(expanded[i])
            for tok in finite:
                expanded[i].append((beam.score + float(logp[r, tok]), rank, int(tok), beam, r))
        for i in active:
            cands = expanded[i]
            # group order keeps beams from the same parent together for tie-breaking
            parents = {id(b): n for n, b in enumerate(beams[i])}
            cands.sort(key=lambda c: (-c[0], parents[id(c[3])], c[2]))
            new = []
            for score, _, tok, beam, r in cands[:width]:
                dists = beam.dists + [np.exp(logp[r])] if keep_dists else []
                new.append(Beam(beam.choices + (tok,), score, dists))
            beams[i] = new
    return beams


def model_logprob_fn(model, jobs: Sequence[SlotJob], vocab_size: int, chunk: int = 512) -> LogProbFn:
    """Adapter that scores slot ``t`` with the two-stream model."""
    # jobs without slots are never scored, and have no valid order
    ranks = [job.order().ranks() if len(job.slots) else None for job in jobs]
    allowed = []
    for job in jobs:
        per_slot = []
        for cand in job.candidates:
            row = np.full(vocab_size, -np.inf)
            row[cand] = 0.0
            per_slot.append(row)
        allowed.append(per_slot)

    def fn(items, t, prefixes):
        T = max(len(jobs[i].ids) for i in items)
        n = len(items)
        ids = np.zeros((n, T), dtype=np.int64)
        rk = np.tile(np.arange(T, 2 * T, dtype=np.int64), (n, 1))
        tgt = np.zeros((n, 1), dtype=np.int64)
        for r, (i, prefix) in enumerate(zip(items, prefixes)):
            job = jobs[i]
            row = job.ids.copy()
            row[job.slots[: len(prefix)]] = prefix
            ids[r, : len(row)] = row
            rk[r, : len(row)] = ranks[i]
            tgt[r, 0] = job.slots[t]
        out = np.empty((n, vocab_size))
        with torch.no_grad():
            for s in range(0, n, chunk):
                content, query = rank_masks(torch.from_numpy(rk[s : s + chunk]))
                logits = model(torch.from_numpy(ids[s : s + chunk]), content, query, torch.from_numpy(tgt[s : s + chunk]))
                out[s : s + chunk] = torch.log_softmax(logits[:, 0].double(), -1).numpy()
        for r, i in enumerate(items):
            out[r] = out[r] + allowed[i][t]
        return out

    return fn


def fill_slots(model, jobs: Sequence[SlotJob], vocab_size: int, width: int = 1, keep_dists: bool = False):
    """Run beam search for every job; returns per job a list of ``(ids, score, dists)``."""
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        fn = model_logprob_fn(model, jobs, vocab_size)
        beams = beam_search(fn, [len(j.slots) for j in jobs], width, keep_dists)
    finally:
        if was_training:
            model.train()
    out = []
    for job, item_beams in zip(jobs, beams):
        res = []
        for b in item_beams:
            ids = job.ids.copy()
            ids[job.slots] = b.choices
            res.append((ids, b.score, b.dists))
        out.append(res)
    return out


# ----------------------------------------------------------------------
# property prediction


def numeral_template(vocab: Vocabulary, name: str, negative: bool = False) -> list[np.ndarray]:
    """Allowed ids per numeral slot of property ``name``."""
    spec = vocab.spec(name)
    slots = [np.array([vocab.id(NEGATIVE)])] if negative else []
    for place in spec.places():
        if place is None:
            slots.append(np.array([vocab.id(DOT)]))
        else:
            slots.append(np.array(vocab.place_ids(place)))
    return slots


def masked_property_sequence(
    text: Sequence[str], vocab: Vocabulary, names: Sequence[str] | None = None, negatives: Mapping[str, bool] | None = None
) -> tuple[TokenizedSequence, list[np.ndarray]]:
    """Text with masked numeral templates for ``names`` and their candidate sets."""
    names = list(vocab.schema) if names is None else list(names)
    negatives = negatives or {}
    prop_tokens: list[str] = []
    cands: list[np.ndarray] = []
    for name in vocab.schema:
        if name not in names:
            continue
        tmpl = numeral_template(vocab, name, negatives.get(name, False))
        prop_tokens += [property_tag(name), *([MASK] * len(tmpl)), SEPARATOR]
        cands += tmpl
    if not cands:
        raise NoMaskedNumerals("no property numerals to predict")
    return TokenizedSequence(prop_tokens, list(text)), cands


@dataclass
class PropertyPrediction:
    values: dict[str, float]
    score: float
    distributions: list[np.ndarray]
    sequence: TokenizedSequence

    def entropies(self) -> list[float]:
        out = []
        for d in self.distributions:
            p = d[d > 0]
            out.append(float(-(p * np.log(p)).sum()))
        return out


def predict_property(
    model,
    vocab: Vocabulary,
    texts: Sequence[Sequence[str]],
    names: Sequence[str] | None = None,
    chunk: int = 256,
) -> list[PropertyPrediction]:
    """Greedy constrained decoding of property numerals from text.

    Each slot only admits tokens of its template place, so every prediction
    is a valid numeral. Signed properties are decoded with and without a sign
    slot and the higher-scoring variant is kept.
    """
    names = list(vocab.schema) if names is None else list(names)
    if not names:
        raise NoMaskedNumerals("vocabulary has no properties to predict")
    signed = [n for n in names if vocab.spec(n).signed]
    variants = [dict(zip(signed, flags)) for flags in itertools.product((False, True), repeat=len(signed))]
    best: list[PropertyPrediction | None] = [None] * len(texts)
    for neg in variants:
        for s in range(0, len(texts), chunk):
            part = texts[s : s + chunk]
            seqs, jobs = [], []
            for text in part:
                seq, cands = masked_property_sequence(text, vocab, names, neg)
                ids = np.asarray(vocab.ids(seq.tokens), dtype=np.int64)
                slots = [i for i, t in enumerate(seq.prop_tokens) if t == MASK]
                # text first, then tags and separators: the order the property objective trains on
                context = list(range(seq.k, seq.T)) + [i for i in range(seq.k) if i not in slots]
                seqs.append(seq)
                jobs.append(SlotJob(ids, slots, cands, context))
            results = fill_slots(model, jobs, len(vocab), width=1, keep_dists=True)
            for j, (seq, res) in enumerate(zip(seqs, results)):
                ids, score, dists = res[0]
                filled = TokenizedSequence([vocab.token(int(i)) for i in ids[: seq.k]], list(seq.text_tokens))
                pred = PropertyPrediction(filled.properties(), score, dists, filled)
                cur = best[s + j]
                if cur is None or pred.score > cur.score:
                    best[s + j] = pred
    return best  # type: ignore[return-value]


def predict_values(model, vocab: Vocabulary, texts, name: str | None = None) -> np.ndarray:
    name = name or next(iter(vocab.schema))
    return np.array([p.values[name] for p in predict_property(model, vocab, texts, [name])])


# ----------------------------------------------------------------------
# text generation


def text_job(seq: TokenizedSequence, vocab: Vocabulary, plan: MaskPlan) -> SlotJob:
    if len(plan.m) != seq.l:
        raise ValueError(f"mask plan covers {len(plan.m)} positions, sequence has {seq.l} text tokens")
    ids = np.asarray(vocab.ids(seq.tokens), dtype=np.int64)
    slots = [seq.k + int(i) for i in plan.masked]
    ids[slots] = vocab.mask_id
    text_ids = np.asarray(vocab.text_ids())
    return SlotJob(ids, slots, [text_ids] * len(slots))


def beam_fill(model, vocab: Vocabulary, seqs: Sequence[TokenizedSequence], plans: Sequence[MaskPlan], width: int = 5):
    """Fill masked text slots of each sequence by beam search."""
    jobs = [text_job(seq, vocab, plan) for seq, plan in zip(seqs, plans)]
    return _results(vocab, seqs, fill_slots(model, jobs, len(vocab), width))


def _results(vocab, seqs, filled) -> list[DecodeResult]:
    out = []
    for seq, res in zip(seqs, filled):
        items = []
        for ids, score, _ in res:
            toks = [vocab.token(int(i)) for i in ids]
            items.append((TokenizedSequence(toks[: seq.k], toks[seq.k :]), score))
        out.append(DecodeResult(items))
    return out


def prime(seq: TokenizedSequence, vocab: Vocabulary, primers: Mapping[str, float | Decimal]) -> TokenizedSequence:
    """Replace property values with primers (rendered at schema precision)."""
    props = {name: Decimal(str(v)) for name, v in seq.properties().items()} if seq.k else {}
    props.update({name: Decimal(str(v)) for name, v in primers.items()})
    return encode_sequence(props, seq.text_tokens, vocab)


def generate_conditional(
    model,
    vocab: Vocabulary,
    seqs: Sequence[TokenizedSequence],
    primers: Sequence[Mapping[str, float]],
    plans: Sequence[MaskPlan],
    width: int = 5,
) -> list[DecodeResult]:
    """Write each primer into the property block, mask text per plan and beam-fill."""
    primed = []
    for seq, primer, plan in zip(seqs, primers, plans):
        if not plan.m.any():
            raise EmptyMask("mask plan masks no text position")
        primed.append(prime(seq, vocab, primer))
    return beam_fill(model, vocab, primed, plans, width)
