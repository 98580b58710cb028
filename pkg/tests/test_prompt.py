import pytest
from hypothesis import given
from hypothesis import strategies as st

from cott.errors import ArityMismatch, EmptyText, MalformedTemplate, UnknownSymbol, UnknownWord
from cott.prompt import (
    MASK,
    Slot,
    Verbalizer,
    compile_template,
    read_verbalizer,
    render_step1,
    render_step2,
    unverbalize,
    verbalize,
    write_verbalizer,
)

HC = "[T], the domain is [C], the area is [A]."
RE = "[T], the SUBJ [C] is [A] of the OBJ [C]."


def kinds(t):
    return [s.kind + (str(s.index) if s.kind == "C" else "") for s in t.slots]


def test_hc_template_slot_order():
    assert kinds(compile_template(HC)) == ["T", "C0", "A"]


def test_re_template_slot_order():
    assert kinds(compile_template(RE)) == ["T", "C0", "A", "C1"]


@pytest.mark.parametrize(
    "pattern",
    ["[T] [A]", "[A] is [C]", "[T] [T] [C] [A]", "[T] [C] [A] [A]", "[T] [C] [A", "[T] [C] [A] ]", "[T] [X] [C] [A]"],
)
def test_malformed_templates(pattern):
    with pytest.raises(MalformedTemplate):
        compile_template(pattern)


def test_segments_keep_literal_text():
    t = compile_template(HC)
    assert t.segments == (Slot("T"), ", the domain is ", Slot("C", 0), ", the area is ", Slot("A"), ".")


def test_step1_hc_masks():
    p = render_step1(compile_template(HC), ["rodents", "decline"])
    assert len(p.convertible_positions) == 1
    assert p.tokens[p.answer_position] == MASK
    assert p.tokens[p.convertible_positions[0]] == MASK
    assert len(p.masked_positions) == 2
    assert p.is_step_one


def test_step1_re_masks():
    p = render_step1(compile_template(RE), ["x", "y"], anchors={"SUBJ": ["john"], "OBJ": ["ceo"]})
    assert len(p.convertible_positions) == 2
    assert len(p.masked_positions) == 3
    assert "john" in p.tokens and "SUBJ" not in p.tokens


def test_step1_empty_text():
    with pytest.raises(EmptyText):
        render_step1(compile_template(HC), [])


def test_step2_hc_injects_step_word():
    v = Verbalizer.virtual(["Biochemistry", "CS"], "step0")
    p = render_step2(compile_template(HC), ["a", "b"], ("Biochemistry",), v)
    assert p.tokens[p.convertible_positions[0]] == "<step0:Biochemistry>"
    assert p.masked_positions == (p.answer_position,)
    assert p.fills == ("Biochemistry",)


def test_step2_re_injects_both():
    vs = [Verbalizer.virtual(["PERSON"], "s0"), Verbalizer.virtual(["TITLE"], "s1")]
    p = render_step2(compile_template(RE), ["a"], ("PERSON", "TITLE"), vs)
    assert [p.tokens[i] for i in p.convertible_positions] == ["<s0:PERSON>", "<s1:TITLE>"]


def test_step2_arity_mismatch():
    v = Verbalizer.virtual(["PERSON"], "s")
    with pytest.raises(ArityMismatch):
        render_step2(compile_template(RE), ["a"], ("PERSON",), v)


def test_step2_unknown_symbol():
    v = Verbalizer.virtual(["Bio"], "s")
    with pytest.raises(UnknownSymbol):
        render_step2(compile_template(HC), ["a"], ("Chem",), v)


def test_verbalizer_round_trip_and_injective():
    v = Verbalizer.virtual(["a", "b", "c"], "ns")
    assert [unverbalize(v, verbalize(v, s)) for s in v.symbols] == list(v.symbols)
    assert len(set(v.words)) == 3
    with pytest.raises(UnknownSymbol):
        v.verbalize("zzz")
    with pytest.raises(UnknownWord):
        v.unverbalize("zzz")


def test_verbalizer_rejects_non_injective():
    with pytest.raises(ValueError):
        Verbalizer(("a", "b"), ("w", "w"))


def test_verbalizer_two_column_file(tmp_path):
    v = Verbalizer(("Molecular biology", "CS"), ("<label:MB>", "computer"))
    write_verbalizer(v, tmp_path / "v.tsv")
    assert read_verbalizer(tmp_path / "v.tsv") == v


words = st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=5), min_size=1, max_size=10)


@given(words)
def test_render_deterministic_and_mask_counts(text):
    t = compile_template(RE)
    p1, p2 = render_step1(t, text), render_step1(t, text)
    assert p1 == p2
    assert len(p1.masked_positions) == t.num_convertible + 1
    vs = [Verbalizer.virtual(["P"], "a"), Verbalizer.virtual(["Q"], "b")]
    q = render_step2(t, text, ("P", "Q"), vs)
    assert len(q.masked_positions) == 1
    # single-token step words: no length change, so [A] stays put
    assert q.answer_position == p1.answer_position


@given(words, st.integers(min_value=1, max_value=4))
def test_answer_shift_matches_injected_length(text, n_words):
    t = compile_template(HC)
    word = " ".join(["cell"] * n_words)
    p1 = render_step1(t, text)
    p2 = render_step2(t, text, ("X",), Verbalizer(("X",), (word,)))
    assert p2.answer_position - p1.answer_position == n_words - 1
    assert len(p2.tokens) - len(p1.tokens) == n_words - 1
