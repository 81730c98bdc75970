"""Metrics and evaluation protocols.

Property oracles take a :class:`TokenizedSequence` and return a float. The
synthetic oracles from :mod:`regressformer.data` are wrapped with
:func:`text_oracle`; :func:`self_oracle` asks the model itself.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein
from rapidfuzz.process import cdist

from .data import Example
from .decoding import beam_fill, generate_conditional, predict_property
from .masking import MaskPlan, sample_mask_plan
from .tokenizer import TokenizedSequence, Vocabulary, encode_sequence

Oracle = Callable[[TokenizedSequence], float]


# ----------------------------------------------------------------------
# scalar metrics


def _arrays(preds, golds):
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(golds, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError("preds and golds must be equal-length non-empty 1-d sequences")
    return p, g


def rmse(preds, golds) -> float:
    p, g = _arrays(preds, golds)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def mae(preds, golds) -> float:
    p, g = _arrays(preds, golds)
    return float(np.mean(np.abs(p - g)))


def is_degenerate(preds, golds) -> bool:
    """True when either side has zero variance (correlation undefined)."""
    p, g = _arrays(preds, golds)
    return bool(np.all(p == p[0]) or np.all(g == g[0]))


def pcc(preds, golds) -> float:
    """Pearson correlation; 0.0 when undefined."""
    p, g = _arrays(preds, golds)
    if is_degenerate(p, g):
        return 0.0
    pc, gc = p - p.mean(), g - g.mean()
    r = float((pc * gc).sum() / math.sqrt((pc * pc).sum() * (gc * gc).sum()))
    return max(-1.0, min(1.0, r))


def r2(preds, golds) -> float:
    """Coefficient of determination of ``preds`` for ``golds``."""
    p, g = _arrays(preds, golds)
    ss_tot = float(((g - g.mean()) ** 2).sum())
    if ss_tot == 0:
        return 0.0
    return 1.0 - float(((g - p) ** 2).sum()) / ss_tot


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(preds, golds) -> float:
    p, g = _arrays(preds, golds)
    return pcc(average_ranks(p), average_ranks(g))


@dataclass
class MetricsReport:
    rmse: float | None = None
    mae: float | None = None
    pcc: float | None = None
    r2: float | None = None
    spearman_rho: float | None = None
    zero_var_fraction: float | None = None
    topk_accuracy: float | None = None
    mean_similarity: float | None = None
    success_rate: float | None = None
    mean_improvement: float | None = None
    novelty_fraction: float | None = None
    n: int = 0
    degenerate: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def regression_report(preds, golds) -> MetricsReport:
    degenerate = ["pcc", "spearman_rho"] if is_degenerate(preds, golds) else []
    return MetricsReport(
        rmse=rmse(preds, golds),
        mae=mae(preds, golds),
        pcc=pcc(preds, golds),
        r2=r2(preds, golds),
        spearman_rho=spearman(preds, golds),
        n=len(preds),
        degenerate=degenerate,
    )


# ----------------------------------------------------------------------
# similarity and baselines


def _ngram_bins(tokens: Sequence[str], n_max: int, bins: int) -> set[int]:
    out = set()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            key = "\x1f".join(tokens[i : i + n]).encode("utf-8")
            out.add(zlib.crc32(key) % bins)
    return out


def token_tanimoto(a: Sequence[str], b: Sequence[str], n_max: int = 4, bins: int = 2048) -> float:
    """Tanimoto overlap of hashed token n-grams (n = 1..n_max)."""
    fa, fb = _ngram_bins(list(a), n_max, bins), _ngram_bins(list(b), n_max, bins)
    union = fa | fb
    if not union:
        return 1.0
    return len(fa & fb) / len(union)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance with unit insert, delete and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def _levenshtein_matrix(queries: Sequence[Sequence[str]], train: Sequence[Sequence[str]]) -> np.ndarray:
    """Pairwise edit distances between token sequences."""
    return cdist([list(q) for q in queries], [list(t) for t in train], scorer=Levenshtein.distance, dtype=np.int64)


def knn_baseline(
    train_pairs: Sequence[tuple[Sequence[str], float]],
    queries: Sequence[Sequence[str]],
    k: int = 25,
    distance: str = "levenshtein",
) -> np.ndarray:
    """Mean label of the ``k`` nearest training sequences; ties keep input order."""
    if not train_pairs:
        raise ValueError("k-NN needs training pairs")
    k = min(k, len(train_pairs))
    seqs = [list(s) for s, _ in train_pairs]
    labels = np.array([y for _, y in train_pairs], dtype=np.float64)
    if distance == "levenshtein":
        dist = _levenshtein_matrix([list(q) for q in queries], seqs).astype(np.float64)
    elif distance == "tanimoto":
        dist = np.array([[1.0 - token_tanimoto(q, s) for s in seqs] for q in queries])
    else:
        raise ValueError(f"unknown distance {distance!r}")
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return labels[nearest].mean(axis=1)


# ----------------------------------------------------------------------
# protocol helpers


def text_oracle(fn: Callable) -> Oracle:
    """Wrap ``fn(tokens, segments)`` as a sequence oracle."""
    return lambda seq, segments=None: fn(seq.text_tokens, segments)


def echo_oracle(name: str) -> Oracle:
    """Reads the value currently written in the property block."""
    return lambda seq, segments=None: seq.properties()[name]


def batched(fn):
    fn.batched = True
    return fn


def self_oracle(model, vocab: Vocabulary, name: str) -> Callable[[Sequence[TokenizedSequence]], np.ndarray]:
    """Batched oracle backed by the model's own property prediction."""

    def fn(seqs):
        preds = predict_property(model, vocab, [s.text_tokens for s in seqs], [name])
        return np.array([p.values[name] for p in preds])

    return batched(fn)


def _evaluate_oracle(oracle, seqs: Sequence[TokenizedSequence], segments=None) -> np.ndarray:
    if getattr(oracle, "batched", False):
        return np.asarray(oracle(seqs), dtype=np.float64)
    segments = segments or [None] * len(seqs)
    return np.array([oracle(s, g) for s, g in zip(seqs, segments)], dtype=np.float64)


def regression_eval(model, vocab: Vocabulary, dataset: Sequence[Example], name: str | None = None):
    """Predict the property of every example from its text; returns ``(report, preds, golds)``."""
    name = name or next(iter(vocab.schema))
    preds = predict_property(model, vocab, [ex.tokens for ex in dataset], [name])
    p = np.array([x.values[name] for x in preds])
    g = np.array([ex.props[name] for ex in dataset])
    return regression_report(p, g), p, g


def regression_metrics_encoded(model, vocab: Vocabulary, encoded) -> dict:
    """Validation metrics for already-encoded examples (used by the trainer)."""
    name = next(iter(vocab.schema))
    texts, golds = [], []
    for enc in encoded:
        toks = [vocab.token(int(i)) for i in enc.ids]
        seq = TokenizedSequence(toks[: enc.layout.k], toks[enc.layout.k :])
        texts.append(seq.text_tokens)
        golds.append(seq.properties()[name])
    preds = predict_property(model, vocab, texts, [name])
    p = np.array([x.values[name] for x in preds])
    rep = regression_report(p, golds)
    return {"rmse": rep.rmse, "pcc": rep.pcc, "spearman_rho": rep.spearman_rho}


def equidistant_primers(n: int, decimals: int = 3, lo: float = 0.0, hi: float = 1.0) -> list[float]:
    return [round(float(x), decimals) for x in np.linspace(lo, hi, n)]


@dataclass
class SweepResult:
    report: MetricsReport
    per_seed_rho: list[float]
    rows: list[dict]


def primer_sweep(
    model,
    vocab: Vocabulary,
    seeds: Sequence[Example],
    oracle,
    name: str | None = None,
    n_primers: int = 10,
    mask_fraction: float = 0.4,
    max_span: int = 7,
    width: int = 5,
    train_texts: set[tuple[str, ...]] | None = None,
    seed: int = 0,
) -> SweepResult:
    """Prime every seed with equidistant values and measure how the outcome tracks the primer.

    One mask plan per seed is shared by all its primers. Generations are
    deduplicated per seed before correlating primer and realized property.
    """
    name = name or next(iter(vocab.schema))
    spec = vocab.spec(name)
    primers = equidistant_primers(n_primers, spec.frac_digits)
    rng = np.random.default_rng(seed)
    seqs, plans, prim = [], [], []
    for ex in seeds:
        seq = encode_sequence(ex.props, ex.tokens, vocab)
        plan = sample_mask_plan(seq.l, mask_fraction, max_span, rng)
        for value in primers:
            seqs.append(seq)
            plans.append(plan)
            prim.append({name: value})
    results = generate_conditional(model, vocab, seqs, prim, plans, width)
    best = [r.best for r in results]
    realized = _evaluate_oracle(oracle, best, [ex.segments for ex in seeds for _ in primers])
    rows, per_seed, zero_var, generated = [], [], 0, []
    for s, ex in enumerate(seeds):
        chunk = slice(s * n_primers, (s + 1) * n_primers)
        texts = [tuple(seq.text_tokens) for seq in best[chunk]]
        vals = realized[chunk]
        for value, text, v in zip(primers, texts, vals):
            rows.append({"seed": s, "primer": value, "realized": float(v), "text": " ".join(text)})
        if np.all(vals == vals[0]):
            zero_var += 1
        seen: dict[tuple, int] = {}
        for i, text in enumerate(texts):
            seen.setdefault(text, i)
        keep = sorted(seen.values())
        generated.extend(texts[i] for i in keep)
        xs = [primers[i] for i in keep]
        ys = [vals[i] for i in keep]
        per_seed.append(spearman(xs, ys) if len(keep) > 1 else 0.0)
    train_texts = train_texts or set()
    novelty = sum(t not in train_texts for t in generated) / len(generated) if generated else 1.0
    report = MetricsReport(
        spearman_rho=float(np.mean(per_seed)) if per_seed else 0.0,
        zero_var_fraction=zero_var / len(seeds) if seeds else 0.0,
        novelty_fraction=novelty,
        n=len(seeds),
    )
    return SweepResult(report, per_seed, rows)


def _mask_segment(ex: Example, segment: int, vocab: Vocabulary, with_property: bool, props=None):
    seg_start, seg_end = ex.segments[segment]
    seq = encode_sequence((props if props is not None else ex.props) if with_property else {}, ex.tokens, vocab)
    return seq, MaskPlan.from_indices(seq.l, range(seg_start, seg_end))


def reconstruction_eval(
    model,
    vocab: Vocabulary,
    dataset: Sequence[Example],
    segment: int = 0,
    top_k: int = 3,
    with_property: bool = True,
    width: int | None = None,
) -> MetricsReport:
    """Regenerate a fully masked segment; top-k exact-match accuracy and best similarity."""
    seqs, plans = zip(*(_mask_segment(ex, segment, vocab, with_property) for ex in dataset))
    results = beam_fill(model, vocab, seqs, plans, max(width or top_k, top_k))
    hits, sims = 0, []
    for ex, res in zip(dataset, results):
        gold = ex.segment(segment)
        start, end = ex.segments[segment]
        cands = [seq.text_tokens[start:end] for seq, _ in res.sequences[:top_k]]
        hits += any(c == gold for c in cands)
        sims.append(max(token_tanimoto(c, gold) for c in cands))
    return MetricsReport(topk_accuracy=hits / len(dataset), mean_similarity=float(np.mean(sims)), n=len(dataset))


def decoration_eval(
    model,
    vocab: Vocabulary,
    dataset: Sequence[Example],
    oracle,
    segment: int = 0,
    boost: float = 0.2,
    top_k: int = 5,
    train_segments: set[tuple[str, ...]] | None = None,
    name: str | None = None,
    width: int | None = None,
    train_texts: set[tuple[str, ...]] | None = None,
) -> MetricsReport:
    """Prime with a boosted property, regenerate one segment and look for a strict improvement.

    Candidates whose segment is in ``train_segments``, or whose whole text is
    in ``train_texts``, are discarded before the top ``top_k`` are taken. A
    seed left with no candidates counts as a failure.
    """
    name = name or next(iter(vocab.schema))
    spec = vocab.spec(name)
    train_segments = train_segments or set()
    train_texts = train_texts or set()
    seqs, plans, primers = [], [], []
    for ex in dataset:
        target = min(float(ex.props[name]) + boost, 10.0 ** spec.int_digits - 10.0 ** -spec.frac_digits)
        seq, plan = _mask_segment(ex, segment, vocab, True)
        seqs.append(seq)
        plans.append(plan)
        primers.append({name: target})
    results = generate_conditional(model, vocab, seqs, primers, plans, max(width or top_k, top_k))
    successes, improvements = 0, []
    for ex, seq, res in zip(dataset, seqs, results):
        start, end = ex.segments[segment]
        # with width > top_k the top_k survivors of the filter are kept
        cands = [
            s
            for s, _ in res.sequences
            if tuple(s.text_tokens[start:end]) not in train_segments and tuple(s.text_tokens) not in train_texts
        ][:top_k]
        if not cands:
            continue
        base = _evaluate_oracle(oracle, [seq], [ex.segments])[0]
        vals = _evaluate_oracle(oracle, cands, [ex.segments] * len(cands))
        gain = float(vals.max() - base)
        improvements.append(gain)
        successes += gain > 0
    return MetricsReport(
        success_rate=successes / len(dataset) if dataset else 0.0,
        mean_improvement=float(np.mean(improvements)) if improvements else 0.0,
        n=len(dataset),
    )


@dataclass
class ConstrainedOptConfig:
    pool_size: int = 80
    delta: float = 0.4
    primer: float = 1.0
    fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    spans: tuple[int, ...] = (1, 3, 5, 7)
    width: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")


@dataclass
class OptimizationResult:
    best: TokenizedSequence
    improvement: float
    similarity: float
    pool: list[TokenizedSequence]


def optimization_plans(l: int, cfg: ConstrainedOptConfig) -> list[MaskPlan]:  # noqa: E741
    """``pool_size`` mask plans cycling through the fraction/span grid."""
    rng = np.random.default_rng(cfg.seed)
    grid = [(f, s) for f in cfg.fractions for s in cfg.spans]
    return [sample_mask_plan(l, *grid[i % len(grid)], rng) for i in range(cfg.pool_size)]


def constrained_optimization(
    model,
    vocab: Vocabulary,
    seed: Example,
    cfg: ConstrainedOptConfig,
    oracle,
    similarity: Callable[[Sequence[str], Sequence[str]], float] = token_tanimoto,
    name: str | None = None,
) -> OptimizationResult:
    """Prompt the same seed ``pool_size`` times and keep the best similar-enough candidate.

    The seed itself is the fallback, so the improvement is never negative.
    """
    name = name or next(iter(vocab.schema))
    seq = encode_sequence(seed.props, seed.tokens, vocab)
    plans = optimization_plans(seq.l, cfg)
    results = generate_conditional(model, vocab, [seq] * len(plans), [{name: cfg.primer}] * len(plans), plans, cfg.width)
    pool = [r.best for r in results]
    base = float(_evaluate_oracle(oracle, [seq], [seed.segments])[0])
    vals = _evaluate_oracle(oracle, pool, [seed.segments] * len(pool))
    best, best_val, best_sim = seq, base, 1.0
    for cand, val in zip(pool, vals):
        sim = similarity(cand.text_tokens, seq.text_tokens)
        if sim >= cfg.delta and val > best_val:
            best, best_val, best_sim = cand, float(val), sim
    return OptimizationResult(best, best_val - base, best_sim, pool)
