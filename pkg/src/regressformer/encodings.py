"""Fixed numerical encodings for digit-place tokens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .tokenizer import NumericToken, TokenKind, Vocabulary, token_kind

MODES = ("float", "int", "none")
COMBINES = ("sum", "concat")


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    mode: str = "float"
    combine: str = "sum"
    ne_dim: int = 16
    d_e: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"encoding mode must be one of {MODES}, got {self.mode!r}")
        if self.combine not in COMBINES:
            raise ValueError(f"combine must be one of {COMBINES}, got {self.combine!r}")
        if self.ne_dim < 1:
            raise ValueError("ne_dim must be positive")
        if self.mode != "none" and self.combine == "sum" and self.ne_dim > self.d_e:
            raise ValueError(f"ne_dim={self.ne_dim} exceeds d_e={self.d_e} in sum mode")

    @property
    def input_width(self) -> int:
        """Width of the combined input embedding."""
        if self.mode != "none" and self.combine == "concat":
            return self.d_e + self.ne_dim
        return self.d_e

    def to_dict(self) -> dict:
        return asdict(self)


def ne_float(v: int, p: int, j: int) -> float:
    return (-1) ** j * (v * 10.0**p) / (j + 1)


def ne_int(v: int, p: int, j: int, d_e: int) -> float:
    # sin on even dimensions, cos on odd; pairs share a frequency
    angle = (v * 10.0**p) / 10000.0 ** (2 * (j // 2) / d_e)
    return math.sin(angle) if j % 2 == 0 else math.cos(angle)


def ne_vector(token: str, cfg: EncodingConfig) -> np.ndarray:
    """NE of one token: zeros for anything but digit-place tokens."""
    if cfg.mode == "none":
        raise ValueError("ne_vector needs an encoding mode other than 'none'")
    out = np.zeros(cfg.ne_dim, dtype=np.float64)
    if token_kind(token) is not TokenKind.NUMERIC:
        return out
    v, p = NumericToken.parse(token)
    for j in range(cfg.ne_dim):
        out[j] = ne_float(v, p, j) if cfg.mode == "float" else ne_int(v, p, j, cfg.d_e)
    return out


def numeral_encoding(tokens, cfg: EncodingConfig) -> np.ndarray:
    """Sum of the token NEs of a numeral run."""
    total = np.zeros(cfg.ne_dim, dtype=np.float64)
    for tok in tokens:
        total = total + ne_vector(tok, cfg)
    return total


def ne_table(vocab: Vocabulary, cfg: EncodingConfig) -> np.ndarray:
    """``(len(vocab), ne_dim)`` lookup table of NE vectors."""
    if cfg.mode == "none":
        return np.zeros((len(vocab), cfg.ne_dim))
    return np.stack([ne_vector(tok, cfg) for tok in vocab.tokens])


def combine(word_emb: torch.Tensor, pos_enc: torch.Tensor, ne: torch.Tensor | None, cfg: EncodingConfig):
    """Merge learned embeddings, positional encodings and NEs.

    ``sum`` adds the NE into the leading ``ne_dim`` dimensions; ``concat``
    appends it, giving width ``d_e + ne_dim``.
    """
    if word_emb.shape != pos_enc.shape:
        raise ShapeMismatch(f"word {tuple(word_emb.shape)} vs position {tuple(pos_enc.shape)}")
    if word_emb.shape[-1] != cfg.d_e:
        raise ShapeMismatch(f"embedding width {word_emb.shape[-1]} != d_e={cfg.d_e}")
    base = word_emb + pos_enc
    if cfg.mode == "none" or ne is None:
        return base
    if ne.shape[:-1] != base.shape[:-1] or ne.shape[-1] != cfg.ne_dim:
        raise ShapeMismatch(f"NE shape {tuple(ne.shape)} incompatible with {tuple(base.shape)}")
    ne = ne.to(base.dtype)
    if cfg.combine == "concat":
        return torch.cat([base, ne], dim=-1)
    pad = cfg.d_e - cfg.ne_dim
    if pad:
        ne = torch.nn.functional.pad(ne, (0, pad))
    return base + ne


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Absolute sinusoidal position table of shape ``(n, d)``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    j = np.arange(d)
    angle = pos / 10000.0 ** (2 * (j // 2) / d)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
