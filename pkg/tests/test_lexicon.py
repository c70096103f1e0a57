import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from viraltweets.lexicon import (
    Lexicon,
    LexiconError,
    load_lexicon,
    load_lexicon_dir,
    score_hashtags,
    score_text,
    tokenize,
)

NINE = {
    "huliu",
    "jockers",
    "jockers_rinker",
    "loughran_mcdonald",
    "nrc",
    "senticnet",
    "sentiword",
    "slangsd",
    "socal_google",
}


def write(tmp_path, text, name="lex.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_two_entries(tmp_path):
    lex = load_lexicon(write(tmp_path, "good\t1.0\nbad\t-1.0"), "toy")
    assert dict(lex.entries) == {"good": 1.0, "bad": -1.0}
    assert lex.name == "toy"


def test_tokens_lower_cased(tmp_path):
    lex = load_lexicon(write(tmp_path, "# comment\nGOOD\t1.0\n"))
    assert dict(lex.entries) == {"good": 1.0}
    assert lex.name == "lex"


def test_bad_polarity_names_line(tmp_path):
    with pytest.raises(LexiconError, match=":1:"):
        load_lexicon(write(tmp_path, "good\tx"))


def test_empty_file_is_fatal(tmp_path):
    with pytest.raises(LexiconError):
        load_lexicon(write(tmp_path, "# nothing\n\n"))


def test_duplicate_last_wins(tmp_path, caplog):
    lex = load_lexicon(write(tmp_path, "good\t1\nGood\t2\n"))
    assert lex.entries["good"] == 2.0
    assert "duplicate" in caplog.text


def test_lexicon_rejects_upper_case_tokens():
    with pytest.raises(LexiconError):
        Lexicon("x", {"Good": 1.0})


def test_bundled_lexicons_have_the_nine_names(bundled_lexicons):
    assert {lex.name for lex in bundled_lexicons} == NINE


def test_directory_without_files(tmp_path):
    with pytest.raises(LexiconError):
        load_lexicon_dir(tmp_path)


@pytest.mark.parametrize(
    "text, tokens",
    [
        ("", []),
        ("Good, GOOD day! http://x.co", ["good", "good", "day"]),
        ("@user #Win win", ["win", "win"]),
        ("don't stop_now", ["don't", "stop", "now"]),
        ("https://a.b/c?d=1 ok", ["ok"]),
    ],
)
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


def test_score_text_examples(toy_lexicon):
    assert score_text("good good bad", toy_lexicon).value == 1.0
    assert score_text("meh zzz", toy_lexicon).value == 0.0
    assert score_text("meh zzz", toy_lexicon).lexicon_name == "toy"


def test_score_hashtags_examples():
    lex = Lexicon("t", {"good": 1.0})
    assert score_hashtags([], lex).value == 0.0
    assert score_hashtags(["good", "good"], lex).value == 2.0
    assert score_hashtags(["GoodDay"], lex).value == 0.0
    assert score_hashtags(["#GOOD"], lex).value == 1.0


def brute_force_score(text, entries):
    total = 0
    for token in tokenize(text):
        if token in entries:
            total = total + entries[token]
    return total


def test_random_text_matches_brute_force():
    rng = random.Random(42)
    vocab = [f"w{i}" for i in range(40)]
    entries = {w: rng.uniform(-2, 2) for w in rng.sample(vocab, 20)}
    lex = Lexicon("r", entries)
    text = " ".join(rng.choice(vocab) for _ in range(50))
    assert score_text(text, lex).value == brute_force_score(text, entries)


words = st.sampled_from(["good", "bad", "win", "meh", "Good", "BAD", "@who", "#win", "http://u.rl", "x1", "don't"])
texts = st.lists(words, max_size=15).map(" ".join)


@given(texts, texts)
def test_additive_over_concatenation(a, b):
    lex = Lexicon("toy", {"good": 1.0, "bad": -1.25, "win": 0.5, "don't": -0.75})
    joined = score_text(a + " " + b, lex).value
    assert joined == pytest.approx(score_text(a, lex).value + score_text(b, lex).value, abs=1e-12)


@given(texts)
def test_case_invariant(text):
    lex = Lexicon("toy", {"good": 1.0, "bad": -1.25, "win": 0.5})
    assert score_text(text.upper(), lex).value == score_text(text.lower(), lex).value


@given(texts)
def test_empty_lexicon_scores_zero(text):
    assert score_text(text, Lexicon("empty", {})).value == 0.0


def test_line_permutation_does_not_change_scores(tmp_path):
    lines = [f"w{i}\t{i * 0.25 - 1}" for i in range(12)]
    shuffled = lines[:]
    random.Random(1).shuffle(shuffled)
    a = load_lexicon(write(tmp_path, "\n".join(lines), "a.tsv"))
    b = load_lexicon(write(tmp_path, "\n".join(shuffled), "b.tsv"))
    text = " ".join(f"w{i % 12}" for i in range(30))
    assert score_text(text, a).value == pytest.approx(score_text(text, b).value, abs=1e-12)
