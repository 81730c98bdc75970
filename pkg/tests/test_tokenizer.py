from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regressformer.tokenizer import (
    DOT,
    NEGATIVE,
    SEPARATOR,
    MalformedNumber,
    MalformedNumeral,
    NumericToken,
    PlaceOutOfRange,
    PropertySpec,
    UnknownId,
    UnknownProperty,
    UnknownSymbol,
    ValueOutOfRange,
    Vocabulary,
    check_layout,
    decode_sequence,
    detokenize_number,
    encode_sequence,
    infer_schema,
    parse_line,
    split_numerics,
    split_symbols,
    tokenize_number,
)


@pytest.fixture
def vocab():
    schema = [PropertySpec("qed", 1, 3), PropertySpec("logp", 2, 2, signed=True)]
    return Vocabulary.build(schema, ["[C]", "[O]", "[N]", "A"])


# -- split_numerics ---------------------------------------------------------


def test_split_numerics_examples():
    assert [tuple(s) for s in split_numerics("qed 0.84")] == [("qed ", False), ("0.84", True)]
    assert split_numerics("") == []
    assert [tuple(s) for s in split_numerics("-12.30x")] == [("-12.30", True), ("x", False)]


@settings(max_examples=300)
@given(st.text())
def test_split_numerics_is_total(text):
    segments = split_numerics(text)
    assert "".join(s.text for s in segments) == text
    assert all(s.text for s in segments)


# -- numbers ----------------------------------------------------------------


def test_tokenize_number_examples():
    assert tokenize_number("12.3") == ["1_1", "2_0", DOT, "3_-1"]
    assert tokenize_number("0") == ["0_0"]
    assert tokenize_number("-0.50") == [NEGATIVE, "0_0", DOT, "5_-1", "0_-2"]


def test_tokenize_number_errors():
    with pytest.raises(MalformedNumber):
        tokenize_number("1.2.3")
    with pytest.raises(MalformedNumber):
        tokenize_number("abc")
    with pytest.raises(PlaceOutOfRange):
        tokenize_number("123.4", place_range=(-3, 1))


def test_detokenize_examples():
    assert detokenize_number(["1_1", "2_0", DOT, "3_-1"]) == Decimal("12.3")
    assert detokenize_number(["0_0"]) == 0
    assert detokenize_number([NEGATIVE, "9_0", DOT, "9_-1", "9_-2"]) == Decimal("-9.99")


@pytest.mark.parametrize(
    "tokens",
    [
        ["1_0", DOT, DOT, "2_-1"],
        ["1_0", "2_0"],
        ["1_1", "2_-1"],
        ["1_1"],
        ["1_1", DOT, "2_0"],
        [],
        [NEGATIVE],
    ],
)
def test_detokenize_rejects_malformed(tokens):
    with pytest.raises(MalformedNumeral):
        detokenize_number(tokens)


def test_numeric_token_render_parse():
    for v in range(10):
        for p in range(-4, 4):
            t = NumericToken(v, p)
            assert NumericToken.parse(t.render()) == t
    assert NumericToken(3, -1).render() == "3_-1"


def test_round_trip_random_decimals():
    rng = np.random.default_rng(1234)
    scaled = rng.integers(-999_999, 1_000_000, size=10_000)
    spec = PropertySpec("x", 3, 3, signed=True)
    for s in scaled:
        x = Decimal(int(s)).scaleb(-3)
        assert detokenize_number(tokenize_number(spec.render(x))) == x


@given(st.decimals(min_value="-999.999", max_value="999.999", places=3, allow_nan=False, allow_infinity=False))
def test_round_trip_property(x):
    spec = PropertySpec("x", 3, 3, signed=True)
    assert detokenize_number(tokenize_number(spec.render(x))) == x


def test_render_is_zero_padded():
    assert PropertySpec("qed").render(0.297) == "0.297"
    assert PropertySpec("qed").render(0.3) == "0.300"
    assert PropertySpec("v", 2, 1, signed=True).render(-3.25) == "-03.3"
    with pytest.raises(ValueOutOfRange):
        PropertySpec("qed").render(10)
    with pytest.raises(ValueOutOfRange):
        PropertySpec("qed").render(-0.5)


# -- vocabulary -------------------------------------------------------------


def test_vocab_contains_numeric_grid(vocab):
    assert vocab.place_range == (-3, 1)
    for p in range(-3, 2):
        for v in range(10):
            assert f"{v}_{p}" in vocab
    assert sorted(vocab.ids(vocab.tokens)) == list(range(len(vocab)))


def test_vocab_save_load_save_is_byte_identical(vocab, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    vocab.save(a)
    Vocabulary.load(a).save(b)
    assert a.read_bytes() == b.read_bytes()
    assert Vocabulary.load(a).tokens == vocab.tokens


def test_vocab_rejects_reserved_text_symbols():
    with pytest.raises(ValueError):
        Vocabulary.build([PropertySpec("q")], ["1_0"])
    with pytest.raises(ValueError):
        Vocabulary.build([PropertySpec("q")], ["<q2>"])


def test_unknown_id(vocab):
    with pytest.raises(UnknownId):
        vocab.token(len(vocab))


# -- sequences --------------------------------------------------------------


def test_encode_paper_layout(vocab):
    seq = encode_sequence({"qed": 0.297}, ["[C]", "[O]"], vocab)
    assert seq.tokens == ["<qed>", "0_0", DOT, "2_-1", "9_-2", "7_-3", SEPARATOR, "[C]", "[O]"]
    assert (seq.k, seq.l, seq.T) == (7, 2, 9)


def test_encode_without_properties(vocab):
    seq = encode_sequence({}, ["A"], vocab)
    assert seq.tokens == ["A"] and seq.k == 0


def test_encode_two_blocks_in_schema_order(vocab):
    seq = encode_sequence({"logp": -1.5, "qed": 0.5}, ["A"], vocab)
    assert seq.tokens == [
        "<qed>", "0_0", DOT, "5_-1", "0_-2", "0_-3", SEPARATOR,
        "<logp>", NEGATIVE, "0_1", "1_0", DOT, "5_-1", "0_-2", SEPARATOR,
        "A",
    ]  # fmt: skip
    assert [name for name, _ in seq.blocks()] == ["qed", "logp"]


def test_encode_errors(vocab):
    with pytest.raises(UnknownProperty):
        encode_sequence({"nope": 0.1}, ["A"], vocab)
    with pytest.raises(ValueOutOfRange):
        encode_sequence({"qed": 12}, ["A"], vocab)
    with pytest.raises(UnknownSymbol):
        encode_sequence({}, ["Z"], vocab)


@pytest.mark.parametrize(
    "props, text",
    [({"qed": 0.297}, ["[C]", "[O]"]), ({}, ["A"]), ({"qed": 0.5, "logp": -12.25}, ["[N]", "A"])],
)
def test_decode_inverts_encode(vocab, props, text):
    seq = encode_sequence(props, text, vocab)
    got_props, got_text = decode_sequence(vocab.ids(seq.tokens), vocab)
    assert got_text == text
    assert got_props == pytest.approx(props)


@given(
    st.decimals(min_value=0, max_value="9.999", places=3),
    st.decimals(min_value="-99.99", max_value="99.99", places=2),
    st.lists(st.sampled_from(["[C]", "[O]", "[N]", "A"]), min_size=1, max_size=12),
)
def test_layout_scan_holds_for_encoded_sequences(qed, logp, text):
    vocab = Vocabulary.build([PropertySpec("qed", 1, 3), PropertySpec("logp", 2, 2, True)], ["[C]", "[O]", "[N]", "A"])
    seq = encode_sequence({"qed": qed, "logp": logp}, text, vocab)
    assert check_layout(seq.tokens)
    assert seq.properties() == {"qed": float(qed), "logp": float(logp)}


def test_check_layout_rejects_broken_blocks():
    assert not check_layout(["<q>", "1_0", "A"])
    assert not check_layout(["<q>", SEPARATOR])
    assert not check_layout(["A", "<q>", "1_0", SEPARATOR])


def test_parse_line_and_schema():
    props, text = parse_line("<qed>0.297|[C][O]c1ccccc1")
    assert props == {"qed": "0.297"}
    assert text[:3] == ["[C]", "[O]", "c"]
    assert split_symbols("A B  C") == ["A", "B", "C"]
    schema = infer_schema([{"qed": "0.297"}, {"qed": "-12.5"}])
    assert schema == [PropertySpec("qed", 2, 3, True)]
    with pytest.raises(MalformedNumber):
        parse_line("<qed>0.2.9|C")
