import math

import pytest

from speakstream.core.errors import EmptyReferenceError
from speakstream.core.metrics import cer, levenshtein, wer


def test_cer_known_cases():
    assert cer("abc", "abc") == 0.0
    assert math.isclose(cer("abc", "abd"), 1 / 3)
    assert cer("ab", "") == 1.0


def test_cer_counts_insertions():
    assert cer("ab", "abab") == 1.0
    assert levenshtein("kitten", "sitting") == 3


def test_cer_empty_reference():
    with pytest.raises(EmptyReferenceError):
        cer("", "a")


def test_wer_on_words():
    assert wer("ab cd ef", "ab cd ef") == 0.0
    assert math.isclose(wer("ab cd ef", "ab ce ef"), 1 / 3)
    with pytest.raises(EmptyReferenceError):
        wer("  ", "ab")
