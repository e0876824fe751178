import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from delusion_audit.core import Outcome, QAItem
from delusion_audit.grading import answers_match, grade, is_rejection, load_lexicon, normalize_answer


@pytest.mark.parametrize(
    "text, canon",
    [
        ("The Eiffel Tower!", "eiffel tower"),
        ("  Paris. ", "paris"),
        ("", ""),
        ("An apple a day", "apple day"),
        ("Theater, the ANSWER", "theater answer"),
        ("«Straße»", "strasse"),
    ],
)
def test_normalize(text, canon):
    n = normalize_answer(text)
    assert n.canonical == canon
    assert n.original == text


@pytest.mark.parametrize(
    "text, rejected",
    [
        ("I don't know.", True),
        ("Paris", False),
        ("I do not know, sorry", True),
        ("There is not enough information to say.", True),
        ("I'm not sure of the answer.", True),
        ("I know it: Paris", False),
    ],
)
def test_is_rejection(text, rejected):
    assert is_rejection(text) is rejected


def test_default_lexicon_has_six_phrases():
    assert len(load_lexicon()) == 6


def test_custom_lexicon(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("# refusals\nno idea  # trailing comment\n\n")
    lex = load_lexicon(path)
    assert lex == ("no idea",)
    assert is_rejection("No idea, honestly.", lex)
    assert not is_rejection("I don't know", lex)


PARIS = QAItem("q", "Capital of France?", ("Paris",))


def test_grade_examples():
    assert grade("It is Paris, France", PARIS) is Outcome.CORRECT
    assert grade("London", PARIS) is Outcome.INCORRECT
    assert grade("I don't know but maybe Paris", PARIS) is Outcome.REJECTED
    assert grade("Paris, though I don't know for sure", PARIS) is Outcome.REJECTED


def test_containment_is_whole_token():
    assert grade("Parisian cafes", PARIS) is Outcome.INCORRECT
    item = QAItem("q", "?", ("New York",))
    assert grade("It's New York City", item) is Outcome.CORRECT
    assert grade("York, New", item) is Outcome.INCORRECT


def test_strict_em():
    assert grade("It is Paris", PARIS, strict=True) is Outcome.INCORRECT
    assert grade("The Paris.", PARIS, strict=True) is Outcome.CORRECT


def test_any_alias_matches():
    item = QAItem("q", "?", ("William Shakespeare", "Shakespeare"))
    assert grade("shakespeare wrote it", item) is Outcome.CORRECT


def test_answers_match():
    assert answers_match("Paris", "paris, france")
    assert answers_match("Paris, France", "Paris")
    assert not answers_match("Paris", "Paris, France", strict=True)
    assert not answers_match("", "")


words = st.text(
    st.characters(whitelist_categories=("Lu", "Ll", "Nd", "Po", "Zs"), max_codepoint=0xFF),
    min_size=0,
    max_size=25,
)


@given(words, st.lists(words, min_size=1, max_size=3))
def test_grade_case_insensitive(answer, aliases):
    assume(any(a.strip() for a in aliases))
    item = QAItem("q", "?", tuple(aliases))
    assert grade(answer, item) is grade(answer.upper(), item)


@given(words)
def test_alias_self_match(alias):
    canon = normalize_answer(alias).canonical
    assume(canon and not is_rejection(alias))
    assert grade(alias, QAItem("q", "?", (alias,))) is Outcome.CORRECT
