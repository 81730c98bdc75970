"""Training objectives and the training loop.

Four losses share one pipeline: sample a factorization order per example,
turn the orders into rank-based attention masks, run the two-stream model
and score the targets with cross-entropy. ``property_step`` predicts the
numerals from text, ``cgen_step`` fills masked text given the properties,
and ``sc_step`` adds the model's own property loss on its greedy completion.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Example
from .masking import (
    FactorizationOrder,
    Layout,
    MaskPlan,
    NoPropertyBlock,
    sample_cgen_order,
    sample_mask_plan,
    sample_plm_order,
    sample_property_order,
)
from .model import (
    ModelConfig,
    RegressionTransformer,
    load_checkpoint,
    nll_loss,
    rank_masks,
    save_checkpoint,
)
from .tokenizer import TokenizedSequence, Vocabulary, encode_sequence

log = logging.getLogger(__name__)

PROPERTY = "property"
CGEN = "cgen"
PLM = "plm"


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    mode: str = "alternating"  # "plm" or "alternating"
    alpha: float = 1.0
    period: int = 50
    mask_fraction: float = 0.4
    max_span: int = 7
    batch_size: int = 32
    steps: int = 1000
    plm_warmup: int = 0
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine"
    clip: float = 1.0
    eval_every: int = 0
    eval_size: int = 256
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.period < 1:
            raise ValueError("alternation period must be >= 1")
        if self.mode not in (PLM, "alternating"):
            raise ValueError(f"unknown trainer mode {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass(frozen=True)
class Encoded:
    """Token ids of one example plus its position classes."""

    ids: np.ndarray
    layout: Layout

    @classmethod
    def of(cls, seq: TokenizedSequence, vocab: Vocabulary) -> Encoded:
        return cls(np.asarray(vocab.ids(seq.tokens), dtype=np.int64), Layout.of(seq))


def encode_examples(examples: Sequence[Example], vocab: Vocabulary) -> list[Encoded]:
    return [Encoded.of(encode_sequence(ex.props, ex.tokens, vocab), vocab) for ex in examples]


def alternation(step: int, period: int = 50) -> str:
    return PROPERTY if (step // period) % 2 == 0 else CGEN


# ----------------------------------------------------------------------
# batched pipeline


def collate(batch: Sequence[Encoded], orders: Sequence[FactorizationOrder], pad_id: int, ids=None):
    """Pad ids, ranks, target positions and gold ids into tensors."""
    T = max(len(e.ids) for e in batch)
    P = max(len(o.targets) for o in orders)
    B = len(batch)
    id_arr = np.full((B, T), pad_id, dtype=np.int64)
    ranks = np.tile(np.arange(T, 2 * T, dtype=np.int64), (B, 1))
    targets = np.full((B, P), -1, dtype=np.int64)
    gold = np.full((B, P), -1, dtype=np.int64)
    for b, (enc, order) in enumerate(zip(batch, orders)):
        seq_ids = enc.ids if ids is None else ids[b]
        n = len(seq_ids)
        id_arr[b, :n] = seq_ids
        ranks[b, :n] = order.ranks()
        tgt = order.targets
        targets[b, : len(tgt)] = tgt
        gold[b, : len(tgt)] = seq_ids[tgt]
    return (torch.from_numpy(id_arr), torch.from_numpy(ranks), torch.from_numpy(targets), torch.from_numpy(gold))


def order_loss(model: RegressionTransformer, batch, orders, pad_id: int, ids=None):
    """Mean target NLL for the given orders; also returns logits, targets and gold ids."""
    id_t, ranks, targets, gold = collate(batch, orders, pad_id, ids)
    content, query = rank_masks(ranks)
    logits = model(id_t, content, query, targets)
    return nll_loss(logits, gold), logits, targets, gold


def plm_step(model, batch, rng: np.random.Generator, vocab: Vocabulary, mask_fraction: float = 0.4):
    orders = [sample_plm_order(len(e.ids), mask_fraction, rng) for e in batch]
    return order_loss(model, batch, orders, vocab.pad_id)[0]


def property_orders(batch, rng):
    for e in batch:
        if len(e.layout.numerals) == 0:
            raise NoPropertyBlock("every example needs a property block for the property objective")
    return [sample_property_order(e.layout, rng) for e in batch]


def property_step(model, batch, rng: np.random.Generator, vocab: Vocabulary, ids=None):
    orders = property_orders(batch, rng)
    return order_loss(model, batch, orders, vocab.pad_id, ids)[0]


def cgen_plans(batch, rng, mask_fraction: float, max_span: int) -> list[MaskPlan]:
    return [sample_mask_plan(e.layout.l, mask_fraction, max_span, rng) for e in batch]


def cgen_step(
    model,
    batch,
    rng: np.random.Generator,
    vocab: Vocabulary,
    mask_fraction: float = 0.4,
    max_span: int = 7,
    plans: Sequence[MaskPlan] | None = None,
):
    if plans is None:
        plans = cgen_plans(batch, rng, mask_fraction, max_span)
    orders = [sample_cgen_order(e.layout, p, rng) for e, p in zip(batch, plans)]
    return order_loss(model, batch, orders, vocab.pad_id)[0]


def recombine(ids: np.ndarray, text_positions: np.ndarray, m: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Keep original ids where ``m`` is 0, take ``filled`` where it is 1.

    ``filled`` holds one id per masked position, in left-to-right order.
    """
    out = ids.copy()
    masked = text_positions[np.asarray(m).astype(bool)]
    out[masked] = filled
    return out


def sc_step(
    model,
    batch,
    rng: np.random.Generator,
    vocab: Vocabulary,
    alpha: float = 1.0,
    mask_fraction: float = 0.4,
    max_span: int = 7,
    plans: Sequence[MaskPlan] | None = None,
    return_parts: bool = False,
):
    """Generation loss plus ``alpha`` times the property loss on the greedy completion."""
    if plans is None:
        plans = cgen_plans(batch, rng, mask_fraction, max_span)
    orders = [sample_cgen_order(e.layout, p, rng) for e, p in zip(batch, plans)]
    loss_g, logits, targets, _ = order_loss(model, batch, orders, vocab.pad_id)
    if alpha == 0:
        return (loss_g, loss_g, None) if return_parts else loss_g
    with torch.no_grad():
        allowed = torch.full((logits.shape[-1],), float("-inf"), dtype=logits.dtype)
        allowed[vocab.text_ids()] = 0.0
        greedy = (logits.detach() + allowed).argmax(-1).numpy()
    recombined = []
    for b, (enc, plan) in enumerate(zip(batch, plans)):
        n = len(plan.masked)
        recombined.append(recombine(enc.ids, enc.layout.text, plan.m, greedy[b, :n]))
    loss_p = property_step(model, batch, rng, vocab, ids=recombined)
    total = loss_g + alpha * loss_p
    return (total, loss_g, loss_p) if return_parts else total


# ----------------------------------------------------------------------
# training loop


def _lr_at(cfg: TrainerConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * min(step, cfg.steps) / cfg.steps)))
    return cfg.lr


def step_objective(cfg: TrainerConfig, step: int) -> str:
    if cfg.mode == PLM or step < cfg.plm_warmup:
        return PLM
    return alternation(step - cfg.plm_warmup, cfg.period)


def _optimizer_tensors(opt: torch.optim.Optimizer, model) -> dict[str, torch.Tensor]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            out[f"optim.{names[id(p)]}.exp_avg"] = state["exp_avg"]
            out[f"optim.{names[id(p)]}.exp_avg_sq"] = state["exp_avg_sq"]
            out[f"optim.{names[id(p)]}.step"] = torch.as_tensor([float(state["step"])])
    return out


def _restore_optimizer(opt, model, tensors: dict[str, torch.Tensor]) -> None:
    for name, p in model.named_parameters():
        key = f"optim.{name}"
        if f"{key}.exp_avg" not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[f"{key}.step"][0])),
            "exp_avg": tensors[f"{key}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
        }


@dataclass
class TrainResult:
    model: RegressionTransformer
    vocab: Vocabulary
    log: list[dict]
    step: int


def train(
    dataset: Sequence[Example],
    vocab: Vocabulary,
    trainer_cfg: TrainerConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    valid: Sequence[Example] | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize a model on ``dataset``; writes ``train_log.jsonl`` and checkpoints to ``out_dir``.

    Every step draws its batch and masks from a generator seeded with
    ``(seed, step)``, so a resumed run replays the same stream.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    cfg = trainer_cfg
    encoded = encode_examples(dataset, vocab)
    torch.manual_seed(cfg.seed)
    start = 0
    if resume is not None:
        model, ck_vocab, meta, extra = load_checkpoint(resume)
        if ck_vocab.fingerprint() != vocab.fingerprint():
            raise ValueError("checkpoint vocabulary differs from the dataset vocabulary")
        start = int(meta.get("step", 0))
    else:
        model = RegressionTransformer.for_vocab(model_cfg, vocab, seed=cfg.seed)
        extra = {}
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if extra:
        _restore_optimizer(opt, model, extra)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w", encoding="utf-8")
    history: list[dict] = []
    valid_enc = encode_examples(valid[: cfg.eval_size], vocab) if valid else None
    t0 = time.time()
    model.train()
    try:
        for step in range(start, cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            idx = rng.choice(len(encoded), size=min(cfg.batch_size, len(encoded)), replace=False)
            batch = [encoded[i] for i in idx]
            objective = step_objective(cfg, step)
            if objective == PLM:
                loss = plm_step(model, batch, rng, vocab, cfg.mask_fraction)
            elif objective == PROPERTY:
                loss = property_step(model, batch, rng, vocab)
            else:
                loss = sc_step(model, batch, rng, vocab, cfg.alpha, cfg.mask_fraction, cfg.max_span)
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite loss at step {step}")
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip)
            opt.step()
            record = {"step": step, "objective": objective, "loss": float(loss.detach())}
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if cfg.eval_every and valid_enc and (step + 1) % cfg.eval_every == 0:
                from .evaluation import regression_metrics_encoded

                model.eval()
                metrics = regression_metrics_encoded(model, vocab, valid_enc)
                model.train()
                rec = {"step": step, "objective": "eval", **metrics, "elapsed": time.time() - t0}
                history.append(rec)
                log.info("step %d valid %s", step, metrics)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
            if callback is not None:
                callback(record)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _checkpoint(out / "checkpoint.rgfm", model, vocab, opt, cfg, step + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    end = max(start, cfg.steps)
    if out is not None:
        _checkpoint(out / "checkpoint.rgfm", model, vocab, opt, cfg, end)
    return TrainResult(model, vocab, history, end)


def _checkpoint(path, model, vocab, opt, cfg: TrainerConfig, step: int) -> None:
    meta = {"step": step, "trainer": asdict(cfg)}
    save_checkpoint(path, model, vocab, meta, _optimizer_tensors(opt, model))
