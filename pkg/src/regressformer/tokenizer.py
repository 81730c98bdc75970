"""Numeric-aware tokenization of alphanumeric sequences.

Numbers become one token per character: digits are rendered as ``v_p``
(digit ``v`` at decimal place ``p``), the decimal point is the shared ``.``
token and a leading minus sign is the shared ``-`` token. A sequence is a run
of property blocks (``<name>``, fixed-width numeral, ``|``) followed by text
symbols.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

PAD = "[PAD]"
MASK = "[MASK]"
END = "[END]"
SEPARATOR = "|"
DOT = "."
NEGATIVE = "-"
SPECIAL_TOKENS = (PAD, MASK, END, SEPARATOR, DOT, NEGATIVE)

NUMBER_PATTERN = re.compile(r"(\+|-)?(\d+)(\.)?(\d+)?")
_NUMERIC_TOKEN = re.compile(r"^(\d)_(-?\d+)$")
_TAG = re.compile(r"^<([^<>\s]+)>$")
_LINE_BLOCK = re.compile(r"<([^<>\s]+)>([^|]*)\|")
_SYMBOL = re.compile(r"\[[^\]]*\]|\S")


class TokenizerError(ValueError):
    """Base class for tokenization failures."""


class MalformedNumber(TokenizerError):
    pass


class PlaceOutOfRange(TokenizerError):
    pass


class MalformedNumeral(TokenizerError):
    pass


class UnknownProperty(TokenizerError):
    pass


class ValueOutOfRange(TokenizerError):
    pass


class UnknownId(TokenizerError):
    pass


class UnknownSymbol(TokenizerError):
    pass


class TokenKind(enum.Enum):
    NUMERIC = "numeric"
    TEXT = "text"
    PROPERTY_TAG = "property_tag"
    SEPARATOR = "separator"
    DOT = "dot"
    NEGATIVE = "negative"
    MASK = "mask"
    PAD = "pad"
    END = "end"


_SPECIAL_KINDS = {
    PAD: TokenKind.PAD,
    MASK: TokenKind.MASK,
    END: TokenKind.END,
    SEPARATOR: TokenKind.SEPARATOR,
    DOT: TokenKind.DOT,
    NEGATIVE: TokenKind.NEGATIVE,
}


class NumericToken(NamedTuple):
    """Digit ``v`` at decimal place ``p``."""

    v: int
    p: int

    def render(self) -> str:
        return f"{self.v}_{self.p}"

    @classmethod
    def parse(cls, text: str) -> NumericToken:
        match = _NUMERIC_TOKEN.match(text)
        if match is None:
            raise MalformedNumeral(f"not a numeric token: {text!r}")
        return cls(int(match.group(1)), int(match.group(2)))


def numeric_token(v: int, p: int) -> str:
    return NumericToken(v, p).render()


def token_kind(token: str) -> TokenKind:
    if token in _SPECIAL_KINDS:
        return _SPECIAL_KINDS[token]
    if _NUMERIC_TOKEN.match(token):
        return TokenKind.NUMERIC
    if _TAG.match(token):
        return TokenKind.PROPERTY_TAG
    return TokenKind.TEXT


def property_tag(name: str) -> str:
    return f"<{name}>"


def tag_name(token: str) -> str:
    match = _TAG.match(token)
    if match is None:
        raise TokenizerError(f"not a property tag: {token!r}")
    return match.group(1)


def is_numeral_token(token: str) -> bool:
    """True for tokens that make up a numeral run (digits, dot, sign)."""
    return token_kind(token) in (TokenKind.NUMERIC, TokenKind.DOT, TokenKind.NEGATIVE)


# --------------------------------------------------------------------------
# numbers


class Segment(NamedTuple):
    text: str
    numeric: bool


def split_numerics(text: str) -> list[Segment]:
    """Split ``text`` into numeric matches and the literal runs between them.

    Surrounding whitespace stays with the literal runs, so joining the segment
    texts always gives back ``text``.
    """
    segments: list[Segment] = []
    pos = 0
    for match in NUMBER_PATTERN.finditer(text):
        if match.start() > pos:
            segments.append(Segment(text[pos : match.start()], False))
        segments.append(Segment(match.group(0), True))
        pos = match.end()
    if pos < len(text):
        segments.append(Segment(text[pos:], False))
    return segments


def tokenize_number(s: str, place_range: tuple[int, int] | None = None) -> list[str]:
    """Tokenize a decimal string into sign, digit-place and dot tokens.

    ``place_range`` is an inclusive ``(p_min, p_max)``; places outside it raise
    :class:`PlaceOutOfRange`.
    """
    match = NUMBER_PATTERN.fullmatch(s)
    if match is None:
        raise MalformedNumber(f"not a number: {s!r}")
    sign, int_part, dot, frac_part = match.groups()
    frac_part = frac_part or ""
    tokens = []
    if sign == "-":
        tokens.append(NEGATIVE)
    places = [len(int_part) - 1 - i for i in range(len(int_part))]
    places += [-(i + 1) for i in range(len(frac_part))]
    if place_range is not None and places:
        lo, hi = place_range
        bad = [p for p in places if p < lo or p > hi]
        if bad:
            raise PlaceOutOfRange(f"{s!r} uses decimal place {bad[0]} outside [{lo}, {hi}]")
    for digit, place in zip(int_part, places):
        tokens.append(numeric_token(int(digit), place))
    if dot:
        tokens.append(DOT)
    for digit, place in zip(frac_part, places[len(int_part) :]):
        tokens.append(numeric_token(int(digit), place))
    return tokens


def detokenize_number(tokens: Sequence[str]) -> Decimal:
    """Exact value of a numeral token run.

    Places must be contiguous and descending; the dot, when present, must sit
    between places 0 and -1.
    """
    tokens = list(tokens)
    if not tokens:
        raise MalformedNumeral("empty numeral")
    negative = tokens[0] == NEGATIVE
    if negative:
        tokens = tokens[1:]
    if tokens.count(DOT) > 1:
        raise MalformedNumeral("duplicate decimal point")
    digits: list[NumericToken] = []
    dot_after: int | None = None
    for tok in tokens:
        if tok == DOT:
            dot_after = len(digits)
        elif tok == NEGATIVE:
            raise MalformedNumeral("sign token inside numeral")
        else:
            digits.append(NumericToken.parse(tok))
    if not digits:
        raise MalformedNumeral("numeral without digits")
    for a, b in zip(digits, digits[1:]):
        if b.p == a.p:
            raise MalformedNumeral(f"conflicting digits at place {a.p}")
        if b.p != a.p - 1:
            raise MalformedNumeral(f"gap between places {a.p} and {b.p}")
    if dot_after is None:
        if digits[-1].p != 0:
            raise MalformedNumeral("integer numeral must end at place 0")
    else:
        before, after = digits[:dot_after], digits[dot_after:]
        if not before or before[-1].p != 0:
            raise MalformedNumeral("decimal point must follow place 0")
        if after and after[0].p != -1:
            raise MalformedNumeral("decimal point must precede place -1")
    scale = max(0, -digits[-1].p)
    scaled = sum(d.v * 10 ** (d.p + scale) for d in digits)
    value = Decimal(scaled).scaleb(-scale)
    return -value if negative else value


# --------------------------------------------------------------------------
# schema and vocabulary


@dataclass(frozen=True)
class PropertySpec:
    """Fixed numeral width for one property."""

    name: str
    int_digits: int = 1
    frac_digits: int = 3
    signed: bool = False

    def __post_init__(self):
        if self.int_digits < 1 or self.frac_digits < 0:
            raise ValueError(f"invalid width for property {self.name!r}")

    @property
    def width(self) -> int:
        """Numeral tokens for a non-negative value (digits plus dot)."""
        return self.int_digits + self.frac_digits + (1 if self.frac_digits else 0)

    def places(self) -> list[int | None]:
        """Decimal place of each numeral slot; ``None`` marks the dot."""
        places: list[int | None] = list(range(self.int_digits - 1, -1, -1))
        if self.frac_digits:
            places.append(None)
            places.extend(range(-1, -self.frac_digits - 1, -1))
        return places

    def quantize(self, value: float | Decimal | str) -> Decimal:
        try:
            dec = Decimal(str(value)) if not isinstance(value, Decimal) else value
            dec = dec.quantize(Decimal(1).scaleb(-self.frac_digits), rounding=ROUND_HALF_UP)
        except InvalidOperation as exc:
            raise ValueOutOfRange(f"{self.name}: cannot represent {value!r}") from exc
        if not dec.is_finite():
            raise ValueOutOfRange(f"{self.name}: non-finite value {value!r}")
        if dec < 0 and not self.signed:
            raise ValueOutOfRange(f"{self.name}: negative value {value} for unsigned property")
        if abs(dec) >= Decimal(10) ** self.int_digits:
            raise ValueOutOfRange(f"{self.name}: {value} exceeds {self.int_digits} integer digits")
        if dec == 0:
            dec = abs(dec)
        return dec

    def render(self, value: float | Decimal | str) -> str:
        """Zero-padded fixed-width decimal string, e.g. ``0.297``."""
        dec = self.quantize(value)
        sign = "-" if dec < 0 else ""
        width = self.int_digits + (self.frac_digits + 1 if self.frac_digits else 0)
        return sign + f"{abs(dec):0{width}.{self.frac_digits}f}"

    def to_dict(self) -> dict:
        return {"int_digits": self.int_digits, "frac_digits": self.frac_digits, "signed": self.signed}


class Vocabulary:
    """Dense bidirectional token/id map plus the property schema."""

    def __init__(self, tokens: Sequence[str], schema: Mapping[str, PropertySpec]):
        self.tokens = list(tokens)
        self.schema = dict(schema)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocabulary")
        for tok in SPECIAL_TOKENS:
            if tok not in self._ids:
                raise TokenizerError(f"vocabulary lacks special token {tok}")
        for name in self.schema:
            if property_tag(name) not in self._ids:
                raise TokenizerError(f"vocabulary lacks tag for property {name!r}")
        lo, hi = self.place_range
        for p in range(lo, hi + 1):
            for v in range(10):
                if numeric_token(v, p) not in self._ids:
                    raise TokenizerError(f"vocabulary lacks numeric token {numeric_token(v, p)}")

    @classmethod
    def build(cls, schema: Iterable[PropertySpec], text_symbols: Iterable[str]) -> Vocabulary:
        specs = {spec.name: spec for spec in schema}
        tokens = list(SPECIAL_TOKENS)
        if specs:
            p_max = max(s.int_digits for s in specs.values()) - 1
            p_min = -max(s.frac_digits for s in specs.values())
            for p in range(p_max, p_min - 1, -1):
                tokens.extend(numeric_token(v, p) for v in range(10))
        tokens.extend(property_tag(name) for name in specs)
        seen = set(tokens)
        for sym in text_symbols:
            if token_kind(sym) is not TokenKind.TEXT:
                raise TokenizerError(f"text symbol {sym!r} collides with a reserved token form")
            if sym in seen:
                continue
            seen.add(sym)
            tokens.append(sym)
        return cls(tokens, specs)

    # ids ------------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownSymbol(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise UnknownId(f"id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def mask_id(self) -> int:
        return self._ids[MASK]

    @property
    def place_range(self) -> tuple[int, int]:
        if not self.schema:
            return (0, -1)
        p_max = max(s.int_digits for s in self.schema.values()) - 1
        p_min = -max(s.frac_digits for s in self.schema.values())
        return (p_min, p_max)

    def text_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if token_kind(t) is TokenKind.TEXT]

    def place_ids(self, place: int) -> list[int]:
        return [self._ids[numeric_token(v, place)] for v in range(10)]

    def spec(self, name: str) -> PropertySpec:
        try:
            return self.schema[name]
        except KeyError:
            raise UnknownProperty(f"unknown property {name!r}") from None

    # persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": {name: spec.to_dict() for name, spec in self.schema.items()},
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> Vocabulary:
        schema = {name: PropertySpec(name=name, **fields) for name, fields in data["schema"].items()}
        return cls(data["tokens"], schema)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def fingerprint(self) -> str:
        from .data import fnv1a_64

        return f"{fnv1a_64(self.dumps().encode('utf-8')):016x}"


# --------------------------------------------------------------------------
# sequences


@dataclass
class TokenizedSequence:
    """Property tokens followed by text tokens."""

    prop_tokens: list[str] = field(default_factory=list)
    text_tokens: list[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.prop_tokens)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.text_tokens)

    @property
    def T(self) -> int:
        return self.k + self.l

    @property
    def tokens(self) -> list[str]:
        return self.prop_tokens + self.text_tokens

    def numeral_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.prop_tokens) if is_numeral_token(t) or t == MASK]

    def text_positions(self) -> list[int]:
        return list(range(self.k, self.T))

    def blocks(self) -> list[tuple[str, list[int]]]:
        """``(property name, numeral positions)`` per property block."""
        out = []
        current: tuple[str, list[int]] | None = None
        for i, tok in enumerate(self.prop_tokens):
            kind = token_kind(tok)
            if kind is TokenKind.PROPERTY_TAG:
                current = (tag_name(tok), [])
            elif kind is TokenKind.SEPARATOR:
                if current is None:
                    raise TokenizerError("separator without property tag")
                out.append(current)
                current = None
            elif current is not None:
                current[1].append(i)
            else:
                raise TokenizerError(f"token {tok!r} outside a property block")
        if current is not None:
            raise TokenizerError("unterminated property block")
        return out

    def properties(self) -> dict[str, float]:
        return {
            name: float(detokenize_number([self.prop_tokens[i] for i in pos]))
            for name, pos in self.blocks()
        }

    def render(self) -> str:
        """Paper-style line: ``<qed>0.297|[C] [O]``."""
        props = "".join(
            t if token_kind(t) is not TokenKind.NUMERIC else str(NumericToken.parse(t).v)
            for t in self.prop_tokens
        )
        return props + " ".join(self.text_tokens)


def check_layout(tokens: Sequence[str]) -> bool:
    """Linear scan: every tag is followed by a numeral run and then a separator."""
    i = 0
    n = len(tokens)
    while i < n and token_kind(tokens[i]) is TokenKind.PROPERTY_TAG:
        i += 1
        start = i
        while i < n and (is_numeral_token(tokens[i]) or tokens[i] == MASK):
            i += 1
        if i == start or i >= n or tokens[i] != SEPARATOR:
            return False
        i += 1
    return all(
        token_kind(t) not in (TokenKind.PROPERTY_TAG, TokenKind.SEPARATOR) for t in tokens[i:]
    )


def property_block(name: str, value: float | Decimal | str, vocab: Vocabulary) -> list[str]:
    spec = vocab.spec(name)
    lo, _ = vocab.place_range
    return [property_tag(name), *tokenize_number(spec.render(value), (lo, spec.int_digits - 1)), SEPARATOR]


def encode_sequence(
    props: Mapping[str, float | Decimal | str], text: Sequence[str], vocab: Vocabulary
) -> TokenizedSequence:
    """Lay out property blocks (in schema order) ahead of the text symbols."""
    for name in props:
        vocab.spec(name)
    prop_tokens: list[str] = []
    for name in vocab.schema:
        if name in props:
            prop_tokens.extend(property_block(name, props[name], vocab))
    for sym in text:
        if sym not in vocab or token_kind(sym) is not TokenKind.TEXT:
            raise UnknownSymbol(f"text symbol {sym!r} not in vocabulary")
    return TokenizedSequence(prop_tokens, list(text))


def sequence_from_tokens(tokens: Sequence[str]) -> TokenizedSequence:
    """Split a flat token list at the end of its leading property blocks."""
    tokens = [t for t in tokens if t not in (PAD, END)]
    split = 0
    for i, tok in enumerate(tokens):
        if tok == SEPARATOR:
            split = i + 1
    return TokenizedSequence(tokens[:split], tokens[split:])


def decode_sequence(ids: Sequence[int], vocab: Vocabulary) -> tuple[dict[str, float], list[str]]:
    tokens = [vocab.token(int(i)) for i in ids]
    seq = sequence_from_tokens(tokens)
    if not check_layout(seq.tokens):
        raise MalformedNumeral("token ids do not follow the property-block layout")
    return seq.properties(), seq.text_tokens


def split_symbols(text: str) -> list[str]:
    """Whitespace-separated symbols, else bracket atoms and single characters."""
    text = text.strip()
    if not text:
        return []
    if any(ch.isspace() for ch in text):
        return text.split()
    return _SYMBOL.findall(text)


def parse_line(line: str) -> tuple[dict[str, str], list[str]]:
    """Parse ``<name>value|...<name>value|text`` into raw property strings and symbols.

    Raises :class:`MalformedNumber` for a property value that is not a number.
    """
    props: dict[str, str] = {}
    pos = 0
    line = line.rstrip("\n")
    while True:
        match = _LINE_BLOCK.match(line, pos)
        if match is None:
            break
        name, raw = match.group(1), match.group(2).strip()
        if NUMBER_PATTERN.fullmatch(raw) is None:
            raise MalformedNumber(f"property {name!r} has malformed value {raw!r}")
        props[name] = raw
        pos = match.end()
    return props, split_symbols(line[pos:])


def infer_schema(raw_props: Iterable[Mapping[str, str]]) -> list[PropertySpec]:
    """Smallest fixed widths that hold every observed value."""
    widths: dict[str, list] = {}
    for props in raw_props:
        for name, raw in props.items():
            match = NUMBER_PATTERN.fullmatch(raw)
            if match is None:
                raise MalformedNumber(f"property {name!r} has malformed value {raw!r}")
            sign, int_part, _, frac = match.groups()
            cur = widths.setdefault(name, [1, 0, False])
            cur[0] = max(cur[0], len(int_part.lstrip("0")) or 1)
            cur[1] = max(cur[1], len(frac or ""))
            cur[2] = cur[2] or sign == "-"
    return [PropertySpec(name, i, f, s) for name, (i, f, s) in widths.items()]
