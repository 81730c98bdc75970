"""Glue between run configs, datasets, vocabularies and evaluation protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from . import evaluation as E
from .config import RunConfig
from .tokenizer import PropertySpec, Vocabulary

PROTOCOLS = ("regression", "sweep", "reconstruct", "decorate", "constrained", "knn")


@dataclass
class Splits:
    train: list[D.Example]
    valid: list[D.Example]
    test: list[D.Example]

    def hash(self) -> str:
        return D.dataset_hash(self.train + self.valid + self.test)


def prepare_data(cfg: RunConfig) -> Splits:
    """Load or synthesize the datasets named in ``cfg.data`` and split them."""
    dc = cfg.data
    if dc.synth_kind:
        full = D.synth_generate(
            dc.synth_kind, dc.synth_n, dc.synth_len, dc.synth_alphabet, dc.synth_seed, dc.decimals, dc.property
        )
        train, valid, test = D.split(full, dc.split, dc.split_seed)
    elif dc.train:
        train = D.load(dc.train, dc.format)
        valid = D.load(dc.valid, dc.format) if dc.valid else []
        test = D.load(dc.test, dc.format) if dc.test else []
        if not dc.valid and not dc.test:
            train, valid, test = D.split(train, dc.split, dc.split_seed)
    else:
        raise D.DataError("config names neither data.train nor data.synth_kind")
    if dc.ranges:
        ranges = {k: tuple(v) for k, v in dc.ranges.items()}
        train, valid, test = (D.normalize_dataset(x, ranges, dc.decimals) for x in (train, valid, test))
    if dc.jitter_sigma:
        train = D.jitter_labels(train, dc.jitter_sigma, dc.jitter_threshold, dc.split_seed, dc.decimals)
    return Splits(list(train), list(valid), list(test))


def schema_for(datasets: Sequence[Sequence[D.Example]], decimals: int) -> list[PropertySpec]:
    """Property widths wide enough for every value at ``decimals`` precision."""
    names: dict[str, list] = {}
    for ds in datasets:
        for ex in ds:
            for name, value in ex.props.items():
                cur = names.setdefault(name, [1, False])
                mag = abs(round(value, decimals))
                cur[0] = max(cur[0], len(str(int(math.floor(mag)))) if mag >= 1 else 1)
                cur[1] = cur[1] or value < 0
    return [PropertySpec(name, i, decimals, s) for name, (i, s) in names.items()]


def build_vocab(splits: Splits, decimals: int) -> Vocabulary:
    parts = (splits.train, splits.valid, splits.test)
    return Vocabulary.build(schema_for(parts, decimals), D.text_symbols(parts))


def property_name(cfg: RunConfig, vocab: Vocabulary) -> str:
    return cfg.data.property or next(iter(vocab.schema))


def oracle_for(cfg: RunConfig, model, vocab: Vocabulary):
    """Synthetic ground truth when the data is synthetic, else the model itself."""
    if cfg.data.synth_kind:
        return E.text_oracle(D.synthetic_oracle(cfg.data.synth_kind, cfg.data.synth_alphabet))
    return E.self_oracle(model, vocab, property_name(cfg, vocab))


def run_protocol(protocol: str, cfg: RunConfig, model, vocab: Vocabulary, splits: Splits):
    """Run one evaluation protocol on the test split; returns ``(report, csv_rows)``."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    ec = cfg.eval
    name = property_name(cfg, vocab)
    test = splits.test
    if not test:
        raise D.DataError("the test split is empty")
    seeds = test[: ec.n_seeds]
    if protocol in ("reconstruct", "decorate") and any(ex.segments is None for ex in seeds):
        raise D.DataError(f"protocol {protocol!r} needs examples with segment annotations")
    rows: list[dict] = []
    if protocol == "regression":
        report, preds, golds = E.regression_eval(model, vocab, test, name)
        rows = [{"index": i, "pred": float(p), "gold": float(g)} for i, (p, g) in enumerate(zip(preds, golds))]
    elif protocol == "knn":
        pairs = [(ex.tokens, ex.props[name]) for ex in splits.train]
        preds = E.knn_baseline(pairs, [ex.tokens for ex in test], ec.k, ec.distance)
        golds = [ex.props[name] for ex in test]
        report = E.regression_report(preds, golds)
        rows = [{"index": i, "pred": float(p), "gold": float(g)} for i, (p, g) in enumerate(zip(preds, golds))]
    elif protocol == "sweep":
        result = E.primer_sweep(
            model,
            vocab,
            seeds,
            oracle_for(cfg, model, vocab),
            name,
            ec.n_primers,
            ec.mask_fraction,
            ec.max_span,
            cfg.decode.beam,
            {tuple(ex.tokens) for ex in splits.train},
            ec.seed,
        )
        report, rows = result.report, result.rows
    elif protocol == "reconstruct":
        report = E.reconstruction_eval(model, vocab, seeds, ec.segment, ec.top_k, ec.with_property)
    elif protocol == "decorate":
        if ec.novelty_filter == "segment":
            seen = {"train_segments": {tuple(ex.segment(ec.segment)) for ex in splits.train if ex.segments}}
        else:
            seen = {"train_texts": {tuple(ex.tokens) for ex in splits.train}}
        report = E.decoration_eval(
            model, vocab, seeds, oracle_for(cfg, model, vocab), ec.segment, ec.boost, ec.top_k, name=name,
            width=cfg.decode.beam, **seen,
        )  # fmt: skip
    else:
        opt_cfg = E.ConstrainedOptConfig(pool_size=ec.pool_size, delta=ec.delta, primer=ec.primer, seed=ec.seed)
        oracle = oracle_for(cfg, model, vocab)
        gains, sims = [], []
        for i, ex in enumerate(seeds):
            res = E.constrained_optimization(model, vocab, ex, opt_cfg, oracle, name=name)
            gains.append(res.improvement)
            sims.append(res.similarity)
            rows.append({"seed": i, "improvement": res.improvement, "similarity": res.similarity})
        report = E.MetricsReport(
            success_rate=float(np.mean([g > 0 for g in gains])),
            mean_improvement=float(np.mean(gains)),
            mean_similarity=float(np.mean(sims)),
            n=len(seeds),
        )
    report.provenance = {"config_hash": cfg.fingerprint(), "dataset_hash": splits.hash(), "protocol": protocol}
    return report, rows


def write_splits(splits: Splits, out: Path) -> None:
    for part in ("train", "valid", "test"):
        D.save(getattr(splits, part), out / f"{part}.jsonl")
