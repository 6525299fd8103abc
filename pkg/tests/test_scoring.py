import pytest
from hypothesis import given
from hypothesis import strategies as st

from dspeech.errors import UndefinedRateError
from dspeech.scoring import cer, corpus_cer, corpus_wer, edit_distance, wer, word_errors

words = st.lists(st.sampled_from(["a", "b", "c", "dd"]), max_size=6).map(" ".join)


def test_wer_examples():
    assert wer("the cat sat", "the cat sat") == 0
    assert wer("the cat sat", "the bat sat") == pytest.approx(1 / 3)
    assert wer("a b", "") == 1.0
    assert wer("", "") == 0.0
    assert cer("abc", "abd") == pytest.approx(1 / 3)


def test_empty_reference_is_undefined():
    with pytest.raises(UndefinedRateError):
        wer("", "x")
    with pytest.raises(ZeroDivisionError):
        cer("", "x")


def test_edit_distance_small_cases():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance([], [1, 2]) == 2


@given(words, words)
def test_distance_symmetric_and_nonnegative(a, b):
    d = edit_distance(a.split(), b.split())
    assert d >= 0 and d == edit_distance(b.split(), a.split())
    assert (d == 0) == (a.split() == b.split())


@given(words)
def test_wer_of_identity_is_zero(a):
    assert word_errors(a, a)[0] == 0


def test_corpus_rate_is_edit_sum_over_word_sum():
    pairs = [("a b c d", "a b c d"), ("x", "y")]
    assert corpus_wer(pairs) == pytest.approx(1 / 5)
    assert corpus_wer(pairs) != pytest.approx((wer(*pairs[0]) + wer(*pairs[1])) / 2)
    assert corpus_cer([("ab", "ab"), ("cd", "ce")]) == pytest.approx(1 / 4)
