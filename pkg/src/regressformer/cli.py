"""Command-line entry point: ``regressformer <command> ...``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import pipeline
from .decoding import DecodeResult, generate_conditional, predict_property
from .masking import EmptyMask, sample_mask_plan
from .model import load_checkpoint
from .objectives import NumericFailure, train
from .tokenizer import (
    TokenizerError,
    Vocabulary,
    encode_sequence,
    infer_schema,
    parse_line,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("regressformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------
# input readers


def _read_lines(path: Path) -> list[tuple[int, str]]:
    return [(n, line) for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1) if line.strip()]


def _read_inputs(path: Path) -> list[tuple[dict[str, str], list[str]]]:
    """JSONL datasets or raw ``<name>value|text`` lines, as (raw props, symbols)."""
    if path.suffix in (".jsonl", ".csv"):
        return [({k: repr(v) for k, v in ex.props.items()}, ex.tokens) for ex in D.load(path)]
    out = []
    for lineno, line in _read_lines(path):
        try:
            out.append(parse_line(line))
        except TokenizerError as exc:
            raise D.DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def _write_jsonl(records, path: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------------
# commands


def cmd_tokenize(args) -> int:
    src = Path(args.input)
    lines = _read_lines(src)
    parsed = []
    for lineno, line in lines:
        try:
            parsed.append((lineno, *parse_line(line)))
        except TokenizerError as exc:
            raise D.DataError(f"{src}:{lineno}: {exc}") from exc
    vocab_path = Path(args.vocab)
    if vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        try:
            schema = infer_schema(p for _, p, _ in parsed)
        except TokenizerError as exc:
            raise D.DataError(f"{src}: {exc}") from exc
        symbols = sorted({s for _, _, text in parsed for s in text})
        vocab = Vocabulary.build(schema, symbols)
        vocab.save(vocab_path)
    records = []
    for lineno, props, text in parsed:
        try:
            seq = encode_sequence(props, text, vocab)
        except TokenizerError as exc:
            raise D.DataError(f"{src}:{lineno}: {exc}") from exc
        records.append({"ids": vocab.ids(seq.tokens)})
    _write_jsonl(records, args.out)
    return EXIT_OK


def _load_config(args) -> C.RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise C.ConfigError(f"config file {path} not found")
    cfg = C.load(path)
    return C.apply_overrides(cfg, args.set or [])


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or Path(cfg.out_dir) / cfg.run_id)
    out.mkdir(parents=True, exist_ok=True)
    splits = pipeline.prepare_data(cfg)
    vocab = pipeline.build_vocab(splits, cfg.data.decimals)
    cfg.save(out / "config.toml")
    vocab.save(out / "vocab.json")
    pipeline.write_splits(splits, out)
    config_hash = cfg.fingerprint()
    result = train(splits.train, vocab, cfg.trainer, cfg.model, out_dir=out, resume=args.resume, valid=splits.valid)
    summary = {
        "step": result.step,
        "checkpoint": str(out / "checkpoint.rgfm"),
        "config_hash": config_hash,
        "dataset_hash": splits.hash(),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, vocab, _, _ = load_checkpoint(args.ckpt)
    inputs = _read_inputs(Path(args.input))
    names = [args.property] if args.property else None
    preds = predict_property(model, vocab, [text for _, text in inputs], names)
    records = []
    for pred in preds:
        rec = {"values": pred.values, "entropy": pred.entropies(), "score": pred.score}
        if len(pred.values) == 1:
            rec["value"] = next(iter(pred.values.values()))
        records.append(rec)
    _write_jsonl(records, args.out)
    return EXIT_OK


def _primers(items: list[str]) -> dict[str, float]:
    out = {}
    for item in items:
        name, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"primer {item!r} is not name=value")
        try:
            out[name] = float(raw)
        except ValueError as exc:
            raise UsageError(f"primer {item!r} has a non-numeric value") from exc
    return out


def cmd_generate(args) -> int:
    model, vocab, _, _ = load_checkpoint(args.ckpt)
    primers = _primers(args.primer or [])
    rng = np.random.default_rng(args.seed)
    seqs, plans = [], []
    for props, text in _read_inputs(Path(args.input)):
        seq = encode_sequence({k: v for k, v in props.items() if k in vocab.schema}, text, vocab)
        missing = [n for n in vocab.schema if n not in props and n not in primers]
        if missing:
            raise D.DataError(f"no value or primer for propert{'y' if len(missing) == 1 else 'ies'} {missing}")
        seqs.append(seq)
        plans.append(sample_mask_plan(seq.l, args.mask_fraction, args.max_span, rng))
    results: list[DecodeResult] = generate_conditional(model, vocab, seqs, [primers] * len(seqs), plans, args.beam)
    records = []
    for seq, plan, res in zip(seqs, plans, results):
        rec = res.to_dict()
        rec["source"] = seq.render()
        rec["masked"] = plan.masked.tolist()
        records.append(rec)
    _write_jsonl(records, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.protocol not in pipeline.PROTOCOLS:
        raise UsageError(f"unknown protocol {args.protocol!r}; choose from {', '.join(pipeline.PROTOCOLS)}")
    cfg = _load_config(args)
    model, vocab, _, _ = load_checkpoint(args.ckpt)
    splits = pipeline.prepare_data(cfg)
    report, rows = pipeline.run_protocol(args.protocol, cfg, model, vocab, splits)
    out = Path(args.out or Path(cfg.out_dir) / cfg.run_id)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"eval_{args.protocol}"
    stem.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if rows:
        with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    seed_default = int(os.environ.get(C.SEED_ENV, "0"))
    p = _Parser(prog="regressformer", description="Train and use a numeric-aware sequence model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("tokenize", help="turn <name>value|text lines into id sequences")
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--vocab", required=True, help="vocabulary file; built from the corpus if missing")
    t.add_argument("--out")
    t.set_defaults(func=cmd_tokenize)

    tr = sub.add_parser("train", help="train a model from a TOML run config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume")
    tr.add_argument("--out")
    tr.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict property values for each input")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--property")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("generate", help="property-primed infilling of masked text")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--primer", action="append", metavar="NAME=VALUE")
    g.add_argument("--mask-fraction", type=float, default=0.4)
    g.add_argument("--max-span", type=int, default=7)
    g.add_argument("--beam", type=int, default=5)
    g.add_argument("--seed", type=int, default=seed_default)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="run an evaluation protocol")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--protocol", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"regressformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, C.ConfigError) as exc:
        print(f"regressformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, TokenizerError, EmptyMask, FileNotFoundError) as exc:
        print(f"regressformer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"regressformer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
