"""Tokenizer and word-vector file tests."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from passageqa.text import (TokenSeq, VectorFileError, VectorTable, embed,
                            load_vectors, save_vectors, tokenize)


def test_trailing_question_mark_splits():
    seq = tokenize("Who wrote Hamlet?")
    assert seq.tokens == ("Who", "wrote", "Hamlet", "?")
    assert seq.offsets == ((0, 3), (4, 9), (10, 16), (16, 17))


def test_empty_and_whitespace_only():
    assert tokenize("").tokens == ()
    assert tokenize("  \t\n ").tokens == ()


def test_interior_punctuation_stays_attached():
    assert tokenize("state-of-the-art.").tokens == ("state-of-the-art", ".")
    assert tokenize("don't stop").tokens == ("don't", "stop")


def test_leading_and_trailing_punctuation_peel_in_order():
    assert tokenize("(hello)").tokens == ("(", "hello", ")")
    assert tokenize('"quoted," she said.').tokens == (
        '"', "quoted", ",", '"', "she", "said", ".")


def test_all_punctuation_chunk():
    assert tokenize("...").tokens == (".", ".", ".")


def test_span_text_round_trip():
    seq = tokenize("The river Nile is long")
    assert seq.span_text(2, 2) == "Nile"
    assert seq.span_text(1, 3) == "river Nile is"
    with pytest.raises(IndexError):
        seq.span_text(4, 5)
    with pytest.raises(IndexError):
        seq.span_text(3, 2)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_offsets_always_match_source_text(text):
    seq = tokenize(text)
    prev_end = 0
    for tok, (lo, hi) in zip(seq.tokens, seq.offsets):
        assert lo < hi
        assert lo >= prev_end
        assert text[lo:hi] == tok
        assert not tok[0].isspace() and not tok[-1].isspace()
        prev_end = hi


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd", "Po", "Zs")),
               max_size=40))
def test_tokens_cover_all_non_whitespace(text):
    seq = tokenize(text)
    covered = sum(hi - lo for lo, hi in seq.offsets)
    assert covered == sum(1 for ch in text if not ch.isspace())


# ---------------------------------------------------------------------------
# vector files


def write(tmp_path, content):
    path = tmp_path / "vectors.txt"
    path.write_text(content, encoding="utf-8")
    return str(path)


def test_load_vectors_round_trip(tmp_path):
    table = VectorTable(3, {"cat": np.array([1.0, 2.0, 3.0], dtype=np.float32),
                            "dog": np.array([-1.5, 0.25, 0.0], dtype=np.float32)})
    path = str(tmp_path / "v.txt")
    save_vectors(path, table)
    loaded = load_vectors(path)
    assert loaded.dim == 3 and len(loaded) == 2
    np.testing.assert_array_equal(loaded.get("cat"), table.get("cat"))
    np.testing.assert_array_equal(loaded.get("dog"), table.get("dog"))


def test_out_of_vocabulary_is_zeros(tmp_path):
    path = write(tmp_path, "1 2\nhello 0.5 -0.5\n")
    table = load_vectors(path)
    np.testing.assert_array_equal(table.get("missing"), np.zeros(2, dtype=np.float32))
    assert "missing" not in table
    assert "hello" in table


def test_duplicate_words_keep_first(tmp_path):
    path = write(tmp_path, "2 2\nword 1.0 1.0\nword 9.0 9.0\n")
    table = load_vectors(path)
    np.testing.assert_array_equal(table.get("word"), [1.0, 1.0])


def test_vectors_are_read_only(tmp_path):
    path = write(tmp_path, "1 2\nword 1.0 1.0\n")
    vec = load_vectors(path).get("word")
    with pytest.raises(ValueError):
        vec[0] = 5.0


def test_bad_header_reports_line_one(tmp_path):
    path = write(tmp_path, "not a header at all\n")
    with pytest.raises(VectorFileError, match="line 1"):
        load_vectors(path)
    path = write(tmp_path, "x 3\n")
    with pytest.raises(VectorFileError, match="line 1"):
        load_vectors(path)
    path = write(tmp_path, "1 0\n")
    with pytest.raises(VectorFileError, match="line 1"):
        load_vectors(path)


def test_bad_row_reports_its_line_number(tmp_path):
    path = write(tmp_path, "2 3\ngood 1 2 3\nshort 1 2\n")
    with pytest.raises(VectorFileError, match="line 3"):
        load_vectors(path)
    path = write(tmp_path, "1 2\nword 1.0 oops\n")
    with pytest.raises(VectorFileError, match="non-numeric"):
        load_vectors(path)


def test_embed_stacks_columns():
    table = VectorTable(2, {"a": np.array([1.0, 2.0], dtype=np.float32)})
    seq = tokenize("a b a")
    out = embed(seq, table)
    assert out.shape == (2, 3)
    np.testing.assert_array_equal(out[:, 0], [1.0, 2.0])
    np.testing.assert_array_equal(out[:, 1], [0.0, 0.0])
    np.testing.assert_array_equal(out[:, 2], [1.0, 2.0])
