"""Factorization orders, span mask plans and two-stream attention masks.

Positions are 0-based throughout. An order ``z`` lists every position once;
the first ``c`` entries are visible context and the remainder are targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tokenizer import MASK, TokenizedSequence, is_numeral_token


class NoPropertyBlock(ValueError):
    pass


class EmptyMask(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Layout:
    """Position classes of one encoded sequence."""

    T: int
    numerals: np.ndarray  # numeral positions inside property blocks
    prop_context: np.ndarray  # tags and separators
    text: np.ndarray

    @property
    def k(self) -> int:
        return len(self.numerals) + len(self.prop_context)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.text)

    @classmethod
    def of(cls, seq: TokenizedSequence | Layout) -> Layout:
        if isinstance(seq, Layout):
            return seq
        numerals = [i for i, t in enumerate(seq.prop_tokens) if is_numeral_token(t) or t == MASK]
        context = [i for i, t in enumerate(seq.prop_tokens) if not (is_numeral_token(t) or t == MASK)]
        return cls(
            seq.T,
            np.asarray(numerals, dtype=np.int64),
            np.asarray(context, dtype=np.int64),
            np.arange(seq.k, seq.T, dtype=np.int64),
        )


@dataclass(frozen=True)
class FactorizationOrder:
    z: np.ndarray
    c: int

    def __post_init__(self):
        T = len(self.z)
        if sorted(self.z.tolist()) != list(range(T)):
            raise ValueError("z must be a permutation of 0..T-1")
        if not 0 <= self.c < T:
            raise ValueError(f"cutoff {self.c} outside [0, {T})")

    @property
    def T(self) -> int:
        return len(self.z)

    @property
    def targets(self) -> np.ndarray:
        return self.z[self.c :]

    def ranks(self) -> np.ndarray:
        """``ranks[p]`` is the index of position ``p`` in ``z``."""
        ranks = np.empty(self.T, dtype=np.int64)
        ranks[self.z] = np.arange(self.T)
        return ranks


@dataclass(frozen=True)
class MaskPlan:
    m: np.ndarray  # 1 = masked, over text positions
    max_span: int = 0
    mask_fraction: float = 0.0

    @classmethod
    def from_indices(cls, l: int, indices) -> MaskPlan:  # noqa: E741
        m = np.zeros(l, dtype=np.int8)
        m[np.asarray(list(indices), dtype=np.int64)] = 1
        return cls(m, max_span=l, mask_fraction=float(m.sum()) / max(l, 1))

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.m)

    def longest_run(self) -> int:
        best = run = 0
        for bit in self.m:
            run = run + 1 if bit else 0
            best = max(best, run)
        return best


@dataclass(frozen=True)
class AttentionMasks:
    content: np.ndarray
    query: np.ndarray


def target_count(T: int, mask_fraction: float) -> int:
    return min(T, max(1, round_half_up(mask_fraction * T)))


def sample_plm_order(T: int, mask_fraction: float, rng: np.random.Generator) -> FactorizationOrder:
    if T < 2:
        raise ValueError("PLM needs at least two positions")
    z = rng.permutation(T)
    return FactorizationOrder(z, T - target_count(T, mask_fraction))


def sample_property_order(seq, rng: np.random.Generator) -> FactorizationOrder:
    """Text (shuffled), then tags/separators (shuffled), then numerals left to right."""
    lay = Layout.of(seq)
    if len(lay.numerals) == 0:
        raise NoPropertyBlock("sequence has no property numerals to predict")
    z = np.concatenate([rng.permutation(lay.text), rng.permutation(lay.prop_context), lay.numerals])
    return FactorizationOrder(z, lay.T - len(lay.numerals))


def sample_cgen_order(seq, plan: MaskPlan, rng: np.random.Generator) -> FactorizationOrder:
    """Property block (shuffled), unmasked text (shuffled), masked text left to right."""
    lay = Layout.of(seq)
    if len(plan.m) != lay.l:
        raise ValueError(f"mask plan covers {len(plan.m)} positions, sequence has {lay.l} text tokens")
    masked = lay.text[plan.m.astype(bool)]
    if len(masked) == 0:
        raise EmptyMask("mask plan masks no text position")
    visible = lay.text[~plan.m.astype(bool)]
    props = np.sort(np.concatenate([lay.numerals, lay.prop_context]))
    z = np.concatenate([rng.permutation(props), rng.permutation(visible), masked])
    return FactorizationOrder(z.astype(np.int64), lay.T - len(masked))


def fixed_order(T: int, targets) -> FactorizationOrder:
    """Context in sequence order, then ``targets`` in the given order."""
    targets = np.asarray(list(targets), dtype=np.int64)
    keep = np.ones(T, dtype=bool)
    keep[targets] = False
    z = np.concatenate([np.flatnonzero(keep), targets])
    return FactorizationOrder(z, T - len(targets))


def sample_mask_plan(l: int, mask_fraction: float, max_span: int, rng: np.random.Generator) -> MaskPlan:  # noqa: E741
    """Mask ``round(mask_fraction * l)`` text positions in spans of at most ``max_span``.

    Span lengths are uniform in ``[1, max_span]``. Spans are kept apart by at
    least one unmasked position when room allows; a fully masked sequence is
    returned as-is for ``mask_fraction`` 1.
    """
    if l < 1 or not 0 < mask_fraction <= 1 or max_span < 1:
        raise ValueError("need l >= 1, 0 < mask_fraction <= 1 and max_span >= 1")
    budget = min(l, max(1, round_half_up(mask_fraction * l)))
    m = np.zeros(l, dtype=np.int8)
    if budget == l:
        m[:] = 1
        return MaskPlan(m, max_span, mask_fraction)
    remaining = budget
    while remaining > 0:
        length = min(int(rng.integers(1, max_span + 1)), remaining)
        placed = False
        for strict in (True, False):
            for span in range(length, 0, -1):
                starts = _free_starts(m, span, max_span, strict)
                if len(starts):
                    s = int(starts[rng.integers(len(starts))])
                    m[s : s + span] = 1
                    remaining -= span
                    placed = True
                    break
            if placed:
                break
        if not placed:
            break
    return MaskPlan(m, max_span, mask_fraction)


def _free_starts(m: np.ndarray, span: int, max_span: int, strict: bool) -> np.ndarray:
    l = len(m)  # noqa: E741
    out = []
    for s in range(l - span + 1):
        if m[s : s + span].any():
            continue
        left = s - 1 >= 0 and m[s - 1]
        right = s + span < l and m[s + span]
        if strict:
            if left or right:
                continue
        else:
            lo, hi = s, s + span
            while lo > 0 and m[lo - 1]:
                lo -= 1
            while hi < l and m[hi]:
                hi += 1
            if hi - lo > max_span:
                continue
        out.append(s)
    return np.asarray(out, dtype=np.int64)


def build_attention_masks(order: FactorizationOrder) -> AttentionMasks:
    """Content stream sees ranks <= own rank; query stream strictly earlier ranks."""
    ranks = order.ranks()
    content = ranks[None, :] <= ranks[:, None]
    query = ranks[None, :] < ranks[:, None]
    return AttentionMasks(content, query)
