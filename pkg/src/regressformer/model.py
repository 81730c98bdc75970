"""A small two-stream transformer for permutation language modeling.

The content stream encodes visible tokens; the query stream predicts a
target position from a learned query vector plus that position's encoding,
attending only to content states that precede the target in the
factorization order. Logits come from the query stream through the tied
embedding table.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encodings import EncodingConfig, combine, ne_table, sinusoidal_positions
from .tokenizer import Vocabulary

POSITIONS = ("sinusoidal", "none")
SUPPRESSED_LOGIT = -1e9


class IdOutOfRange(IndexError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_e: int = 64
    d_ff: int = 256
    n_heads: int = 4
    dropout: float = 0.0
    max_len: int = 128
    vocab_size: int = 0
    positions: str = "sinusoidal"
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            self.encoding = EncodingConfig(**self.encoding)
        if self.d_e % self.n_heads:
            raise ValueError(f"d_e={self.d_e} not divisible by n_heads={self.n_heads}")
        if self.positions not in POSITIONS:
            raise ValueError(f"positions must be one of {POSITIONS}")
        if self.encoding.d_e != self.d_e:
            self.encoding = EncodingConfig(
                self.encoding.mode, self.encoding.combine, self.encoding.ne_dim, self.d_e
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform_(weight: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=gen, dtype=weight.dtype) * 2 * bound - bound)


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, Q, d = x_q.shape
        K = x_kv.shape[1]
        h = self.n_heads
        q = self.q(x_q).view(B, Q, h, d // h).transpose(1, 2)
        k = self.k(x_kv).view(B, K, h, d // h).transpose(1, 2)
        v = self.v(x_kv).view(B, K, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        allowed = mask.unsqueeze(1)
        # rows with nothing to attend to produce a zero context vector
        weights = torch.softmax(scores.masked_fill(~allowed, SUPPRESSED_LOGIT), dim=-1) * allowed
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, Q, d)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.d_e)
        self.attn = Attention(cfg.d_e, cfg.n_heads, cfg.dropout)
        self.ln_ff = nn.LayerNorm(cfg.d_e)
        self.ff_in = nn.Linear(cfg.d_e, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, cfg.d_e)
        self.dropout = nn.Dropout(cfg.dropout)

    def _ff(self, x):
        return self.dropout(self.ff_out(F.gelu(self.ff_in(self.ln_ff(x)))))

    def forward(self, h, g, content_mask, query_mask):
        hn = self.ln_attn(h)
        h_new = h + self.dropout(self.attn(hn, hn, content_mask))
        h_new = h_new + self._ff(h_new)
        g_new = g + self.dropout(self.attn(self.ln_attn(g), hn, query_mask))
        g_new = g_new + self._ff(g_new)
        return h_new, g_new


class RegressionTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, ne: np.ndarray | None = None, suppress=(), seed: int = 0):
        super().__init__()
        if cfg.vocab_size < 1:
            raise ValueError("ModelConfig.vocab_size must be set")
        self.cfg = cfg
        enc = cfg.encoding
        self.embed_tokens = nn.Embedding(cfg.vocab_size, cfg.d_e)
        self.query_init = nn.Parameter(torch.zeros(cfg.d_e))
        self.in_proj = (
            nn.Linear(enc.input_width, cfg.d_e) if enc.input_width != cfg.d_e else None
        )
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_out = nn.LayerNorm(cfg.d_e)
        self.out_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        if ne is None:
            ne = np.zeros((cfg.vocab_size, enc.ne_dim))
        self.register_buffer("ne", torch.as_tensor(ne, dtype=torch.float32), persistent=False)
        pos = sinusoidal_positions(cfg.max_len, cfg.d_e)
        if cfg.positions == "none":
            pos = np.zeros_like(pos)
        self.register_buffer("pos", torch.as_tensor(pos, dtype=torch.float32), persistent=False)
        keep = torch.zeros(cfg.vocab_size, dtype=torch.bool)
        keep[list(suppress)] = True
        self.register_buffer("suppress", keep, persistent=False)
        self.reset_parameters(seed)

    @classmethod
    def for_vocab(cls, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> RegressionTransformer:
        cfg = replace(cfg, vocab_size=len(vocab))
        return cls(cfg, ne_table(vocab, cfg.encoding), (vocab.pad_id, vocab.mask_id), seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, param in self.named_parameters():
            if param.dim() >= 2:
                _uniform_(param, param.shape[-1], gen)
            elif name == "query_init":
                _uniform_(param, param.shape[0], gen)
            elif name.endswith("weight"):
                with torch.no_grad():
                    param.fill_(1.0)
            else:
                with torch.no_grad():
                    param.zero_()

    # ------------------------------------------------------------------
    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Word embedding + position + NE for ``(B, T)`` ids."""
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise IdOutOfRange(f"token ids must lie in [0, {self.cfg.vocab_size})")
        T = ids.shape[-1]
        if T > self.cfg.max_len:
            raise IdOutOfRange(f"sequence length {T} exceeds max_len={self.cfg.max_len}")
        word = self.embed_tokens(ids)
        pos = self.pos[:T].to(word.dtype).expand_as(word)
        ne = self.ne[ids].to(word.dtype) if self.cfg.encoding.mode != "none" else None
        x = combine(word, pos, ne, self.cfg.encoding)
        if self.in_proj is not None:
            x = self.in_proj(x)
        return x

    def forward(
        self,
        ids: torch.Tensor,
        content_mask: torch.Tensor,
        query_mask: torch.Tensor,
        targets: torch.Tensor,
    ) -> torch.Tensor:
        """Logits ``(B, P, V)`` for target positions ``(B, P)``; ``-1`` pads targets."""
        h = self.embed(ids)
        tgt = targets.clamp(min=0)
        g = self.query_init.to(h.dtype) + self.pos[tgt].to(h.dtype)
        qmask = torch.gather(query_mask, 1, tgt.unsqueeze(-1).expand(-1, -1, query_mask.shape[-1]))
        for block in self.blocks:
            h, g = block(h, g, content_mask, qmask)
        logits = self.ln_out(g) @ self.embed_tokens.weight.T + self.out_bias
        return logits.masked_fill(self.suppress, SUPPRESSED_LOGIT)


def nll_loss(logits: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over gold ids; ``-1`` entries are ignored."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gold.reshape(-1), ignore_index=-1)


def gradients(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(params.items(), grads)
    }


def rank_masks(ranks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched content/query masks from ``(B, T)`` order ranks."""
    content = ranks.unsqueeze(1) <= ranks.unsqueeze(2)
    query = ranks.unsqueeze(1) < ranks.unsqueeze(2)
    return content, query


# ----------------------------------------------------------------------
# checkpoints

MAGIC = b"RGFM\x01"


def save_checkpoint(
    path: str | Path,
    model: RegressionTransformer,
    vocab: Vocabulary,
    meta: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> None:
    """Write a JSON header followed by a little-endian float32 payload."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": model.cfg.to_dict(),
        "vocab": vocab.to_dict(),
        "vocab_hash": vocab.fingerprint(),
        "tensors": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + size].decode("utf-8"))
    payload = memoryview(data)[start + size :]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[RegressionTransformer, Vocabulary, dict, dict]:
    """Rebuild ``(model, vocab, meta, extra tensors)`` from a checkpoint."""
    header, tensors = read_checkpoint(path)
    vocab = Vocabulary.from_dict(header["vocab"])
    if vocab.fingerprint() != header["vocab_hash"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    cfg = ModelConfig(**header["config"])
    model = RegressionTransformer.for_vocab(cfg, vocab)
    state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, vocab, header["meta"], extra
