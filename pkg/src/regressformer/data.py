"""Datasets: loading, normalization, splits, synthetic tasks and label jitter."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FRACTION_OF_A = "fraction_of_a"
WEIGHTED_SUM = "weighted_sum"
SEGMENTED_YIELD = "segmented_yield"
SYNTH_KINDS = (FRACTION_OF_A, WEIGHTED_SUM, SEGMENTED_YIELD)
SEGMENT_MARKER = "+"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class DataError(ValueError):
    pass


@dataclass
class Example:
    tokens: list[str]
    props: dict[str, float] = field(default_factory=dict)
    segments: list[tuple[int, int]] | None = None

    def __post_init__(self):
        if not self.tokens:
            raise DataError("example has no text tokens")
        for name, value in self.props.items():
            if not math.isfinite(value):
                raise DataError(f"property {name!r} is not finite")
        if self.segments is not None:
            self.segments = [tuple(s) for s in self.segments]
            for start, end in self.segments:
                if not 0 <= start < end <= len(self.tokens):
                    raise DataError(f"segment ({start}, {end}) outside sequence of {len(self.tokens)}")

    def segment(self, i: int) -> list[str]:
        start, end = self.segments[i]
        return self.tokens[start:end]

    def to_record(self) -> dict:
        rec: dict = {"tokens": list(self.tokens), "props": dict(self.props)}
        if self.segments is not None:
            rec["segments"] = [list(s) for s in self.segments]
        return rec


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical(dataset: Sequence[Example]) -> bytes:
    return "".join(json.dumps(ex.to_record(), sort_keys=True) + "\n" for ex in dataset).encode("utf-8")


def dataset_hash(dataset: Sequence[Example]) -> str:
    return f"{fnv1a_64(canonical(dataset)):016x}"


# ----------------------------------------------------------------------
# I/O


def _format_of(path: Path, fmt: str | None) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("jsonl", "csv"):
        raise DataError(f"unsupported dataset format {fmt!r}")
    return fmt


def load(path: str | Path, fmt: str | None = None) -> list[Example]:
    """Read a JSONL or CSV dataset; malformed records report their line number."""
    path = Path(path)
    fmt = _format_of(path, fmt)
    text = path.read_text(encoding="utf-8")
    out = []
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                props = {k: float(v) for k, v in rec.get("props", {}).items()}
                out.append(Example(list(rec["tokens"]), props, rec.get("segments")))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
        return out
    reader = csv.DictReader(io.StringIO(text))
    for lineno, row in enumerate(reader, 2):
        try:
            tokens = row.pop("tokens").split()
            out.append(Example(tokens, {k: float(v) for k, v in row.items()}))
        except (ValueError, KeyError, AttributeError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


def save(dataset: Sequence[Example], path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _format_of(path, fmt)
    if fmt == "jsonl":
        path.write_bytes(canonical(dataset))
        return
    names = sorted({name for ex in dataset for name in ex.props})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tokens", *names])
        for ex in dataset:
            writer.writerow([" ".join(ex.tokens), *(repr(ex.props[n]) for n in names)])


# ----------------------------------------------------------------------
# normalization


def normalize(values, value_range: tuple[float, float], decimals: int = 3) -> np.ndarray:
    lo, hi = value_range
    if not hi > lo:
        raise ValueError(f"empty normalization range {value_range}")
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0), decimals)


def denormalize(values, value_range: tuple[float, float]) -> np.ndarray:
    lo, hi = value_range
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def normalize_dataset(
    dataset: Sequence[Example], ranges: Mapping[str, tuple[float, float]], decimals: int = 3
) -> list[Example]:
    out = []
    for ex in dataset:
        props = dict(ex.props)
        for name, rng in ranges.items():
            if name in props:
                props[name] = float(normalize([props[name]], rng, decimals)[0])
        out.append(Example(list(ex.tokens), props, ex.segments))
    return out


# ----------------------------------------------------------------------
# synthetic tasks


def default_alphabet(size: int) -> list[str]:
    if not 1 <= size <= 26:
        raise ValueError("alphabet size must be in [1, 26]")
    return [chr(ord("A") + i) for i in range(size)]


def fraction_of_a(tokens: Sequence[str], decimals: int | None = None) -> float:
    value = sum(t == "A" for t in tokens) / len(tokens)
    return round(value, decimals) if decimals is not None else value


def token_weights(alphabet: Sequence[str]) -> dict[str, float]:
    """Evenly spaced weights in [0, 1] by alphabet position."""
    n = len(alphabet)
    return {sym: (i / (n - 1) if n > 1 else 1.0) for i, sym in enumerate(alphabet)}


def weighted_sum(tokens: Sequence[str], weights: Mapping[str, float], decimals: int | None = None) -> float:
    value = sum(weights.get(t, 0.0) for t in tokens) / len(tokens)
    return round(value, decimals) if decimals is not None else value


def segmented_yield(tokens: Sequence[str], segments, alphabet: Sequence[str], decimals: int | None = None) -> float:
    """Mean over segments of the share of that segment's key symbol.

    Segment ``i`` rewards ``alphabet[i]``, so raising the yield means
    rewriting a segment towards its own key symbol.
    """
    parts = []
    for i, (start, end) in enumerate(segments):
        seg = tokens[start:end]
        parts.append(sum(t == alphabet[i] for t in seg) / len(seg))
    value = sum(parts) / len(parts)
    return round(value, decimals) if decimals is not None else value


def _biased_sequence(rng: np.random.Generator, length: int, alphabet: Sequence[str], key: str) -> list[str]:
    # per-sequence share of the key symbol is uniform in [0, 1]
    share = rng.random()
    others = [s for s in alphabet if s != key] or [key]
    picks = rng.random(length) < share
    fill = rng.integers(0, len(others), size=length)
    return [key if pick else others[j] for pick, j in zip(picks, fill)]


def synth_generate(
    kind: str,
    n: int,
    length: int = 20,
    alphabet: Sequence[str] | int = 10,
    seed: int = 0,
    decimals: int = 3,
    prop_name: str | None = None,
) -> list[Example]:
    """Random sequences whose property is an exact function of the tokens."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if isinstance(alphabet, int):
        alphabet = default_alphabet(alphabet)
    alphabet = list(alphabet)
    rng = np.random.default_rng(seed)
    out = []
    if kind == FRACTION_OF_A:
        name = prop_name or "frac"
        for _ in range(n):
            toks = _biased_sequence(rng, length, alphabet, alphabet[0])
            out.append(Example(toks, {name: fraction_of_a(toks, decimals)}))
    elif kind == WEIGHTED_SUM:
        name = prop_name or "wsum"
        weights = token_weights(alphabet)
        for _ in range(n):
            probs = rng.dirichlet(np.full(len(alphabet), 0.5))
            toks = [alphabet[i] for i in rng.choice(len(alphabet), size=length, p=probs)]
            out.append(Example(toks, {name: weighted_sum(toks, weights, decimals)}))
    else:
        name = prop_name or "yield"
        if len(alphabet) < 3:
            raise ValueError("segmented yield needs at least three symbols")
        seg_len = max(1, (length - 2) // 3)
        for _ in range(n):
            toks: list[str] = []
            segs = []
            for i in range(3):
                if i:
                    toks.append(SEGMENT_MARKER)
                start = len(toks)
                toks.extend(_biased_sequence(rng, seg_len, alphabet, alphabet[i]))
                segs.append((start, len(toks)))
            out.append(Example(toks, {name: segmented_yield(toks, segs, alphabet, decimals)}, segs))
    return out


def synthetic_oracle(kind: str, alphabet: Sequence[str] | int = 10, decimals: int | None = None) -> Callable:
    """Property function ``(tokens, segments) -> float`` matching :func:`synth_generate`."""
    if isinstance(alphabet, int):
        alphabet = default_alphabet(alphabet)
    alphabet = list(alphabet)
    if kind == FRACTION_OF_A:
        return lambda tokens, segments=None: fraction_of_a(tokens, decimals)
    if kind == WEIGHTED_SUM:
        weights = token_weights(alphabet)
        return lambda tokens, segments=None: weighted_sum(tokens, weights, decimals)
    if kind == SEGMENTED_YIELD:
        return lambda tokens, segments: segmented_yield(tokens, segments, alphabet, decimals)
    raise ValueError(f"unknown synthetic kind {kind!r}")


# ----------------------------------------------------------------------
# splits, jitter, augmentation


def split(dataset: Sequence[Example], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded disjoint ``(train, valid, test)`` partition."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_valid = int(math.floor(ratios[1] * n + 1e-9))
    if ratios[2] == 0:
        n_valid = n - n_train
    parts = perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]
    return tuple([dataset[i] for i in sorted(idx)] for idx in parts)


def jitter_labels(
    dataset: Sequence[Example],
    sigma: float,
    threshold: float = 0.05,
    seed: int = 0,
    decimals: int | None = 3,
) -> list[Example]:
    """Add N(0, sigma^2) noise to labels whose exact value is over-represented.

    A value is a spike when more than ``threshold`` of the examples carry it.
    Noisy labels are clipped back to [0, 1].
    """
    if sigma == 0 or not dataset:
        return list(dataset)
    rng = np.random.default_rng(seed)
    names = sorted({name for ex in dataset for name in ex.props})
    spikes = {}
    for name in names:
        counts = Counter(ex.props[name] for ex in dataset if name in ex.props)
        spikes[name] = {v for v, c in counts.items() if c / len(dataset) > threshold}
    out = []
    for ex in dataset:
        props = dict(ex.props)
        for name in names:
            if name in props and props[name] in spikes[name]:
                value = float(np.clip(props[name] + rng.normal(0.0, sigma), 0.0, 1.0))
                props[name] = round(value, decimals) if decimals is not None else value
        out.append(Example(list(ex.tokens), props, ex.segments))
    return out


def max_label_frequency(dataset: Sequence[Example], name: str) -> float:
    counts = Counter(ex.props[name] for ex in dataset if name in ex.props)
    return max(counts.values()) / len(dataset) if counts else 0.0


def augment(
    dataset: Sequence[Example],
    rewriter: Callable[[list[str], np.random.Generator], list[str]],
    factor: int,
    seed: int = 0,
) -> list[Example]:
    """Append ``factor - 1`` rewritten copies of each example (labels kept)."""
    rng = np.random.default_rng(seed)
    out = list(dataset)
    for _ in range(max(0, factor - 1)):
        for ex in dataset:
            out.append(Example(rewriter(list(ex.tokens), rng), dict(ex.props)))
    return out


def text_symbols(datasets: Iterable[Sequence[Example]]) -> list[str]:
    return sorted({tok for ds in datasets for ex in ds for tok in ex.tokens})
