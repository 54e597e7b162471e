import math

import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from diffcap.errors import EvalError
from diffcap.metrics import bleu4, cider, cider_scores, lcs_length, rouge_l

WORDS = st.sampled_from(list("abcdefg"))
SENT = st.lists(WORDS, min_size=1, max_size=8).map(" ".join)


def test_bleu_identical_is_one():
    corpus = {"1": ("a man is running", ["a man is running"]),
              "2": ("the cat sleeps on a mat", ["the cat sleeps on a mat"])}
    assert bleu4(corpus) == pytest.approx(1.0)


def test_bleu_no_shared_four_grams_is_zero():
    corpus = {"1": ("a b c d e", ["a b c x d e"])}
    assert bleu4(corpus) == 0.0
    assert bleu4(corpus, smooth=True) > 0.0


def test_bleu_hand_case():
    corpus = {"1": ("a b c d e", ["a b c d f"])}
    expected = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert bleu4(corpus) == pytest.approx(expected, abs=1e-12)
    assert abs(bleu4(corpus) - 0.6687) < 5e-4


def test_bleu_brevity_penalty():
    corpus = {"1": ("a b c d", ["a b c d e f g h"])}
    assert bleu4(corpus) == pytest.approx(math.exp(1 - 8 / 4))


def test_bleu_clipping():
    corpus = {"1": ("a a a a a", ["a b c d e"])}
    assert bleu4(corpus, smooth=True) < 0.5


def test_empty_corpus_errors():
    for fn in (bleu4, rouge_l, cider):
        with pytest.raises(EvalError):
            fn({})


def test_lcs():
    assert lcs_length("a c e".split(), "a b c d e".split()) == 3
    assert lcs_length([], ["a"]) == 0


def test_rouge_cases():
    assert rouge_l({"1": ("a b c", ["a b c"])}) == pytest.approx(1.0)
    assert rouge_l({"1": ("x y", ["a b c"])}) == 0.0
    p, r, b2 = 1.0, 3 / 5, 1.2 ** 2
    expected = (1 + b2) * p * r / (r + b2 * p)
    assert rouge_l({"1": ("a c e", ["a b c d e"])}) == pytest.approx(expected, abs=1e-12)
    assert round(rouge_l({"1": ("a c e", ["a b c d e"])}), 4) == 0.7176


def test_rouge_best_reference():
    corpus = {"1": ("a c e", ["x y z", "a b c d e"])}
    assert rouge_l(corpus) == pytest.approx(rouge_l({"1": ("a c e", ["a b c d e"])}))


def test_cider_needs_two_ids():
    with pytest.raises(EvalError):
        cider({"1": ("a b", ["a b"])})


def test_cider_identical_distinct_captions_is_maximal():
    caps = ["a man is running", "a woman is cooking food", "two dogs play in the snow"]
    corpus = {str(i): (c, [c]) for i, c in enumerate(caps)}
    assert cider(corpus) == pytest.approx(10.0)
    wrong = {str(i): (caps[(i + 1) % 3], [c]) for i, c in enumerate(caps)}
    assert cider(wrong) < cider(corpus)


def test_cider_no_shared_ngrams_is_zero():
    corpus = {"1": ("x y", ["a b"]), "2": ("z w", ["c d"])}
    assert cider(corpus) == 0.0


def test_cider_hand_table():
    # refs: "a b", "a d", "e f" -> df(a)=2, every other n-gram df=1, N=3
    corpus = {"1": ("a b", ["a b"]), "2": ("a c", ["a d"]), "3": ("e f", ["e f"])}
    w_a, w_rare = math.log(3) - math.log(2), math.log(3)
    # ids 1 and 3: unigram and bigram cosines are 1, no 3/4-grams
    s_same = 10 * (1 + 1 + 0 + 0) / 4
    # id 2: only the unigram "a" is shared; "c" has df 0 -> weight log 3
    cos1 = w_a ** 2 / (math.sqrt(w_a ** 2 + w_rare ** 2) * math.sqrt(w_a ** 2 + w_rare ** 2))
    s2 = 10 * cos1 / 4
    scores = cider_scores(corpus)
    assert scores["1"] == pytest.approx(s_same, abs=1e-12)
    assert scores["2"] == pytest.approx(s2, abs=1e-12)
    assert round(cider(corpus), 4) == round((2 * s_same + s2) / 3, 4)
    assert round(cider(corpus), 4) == 3.4332


def test_cider_length_penalty():
    corpus = {"1": ("a b c", ["a b c d e f g h i j"]), "2": ("x y", ["p q"])}
    unpenalized = cider_scores(corpus, sigma=1e9)["1"]
    assert cider_scores(corpus)["1"] == pytest.approx(
        unpenalized * math.exp(-(7 ** 2) / 72), rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(SENT, st.lists(SENT, min_size=1, max_size=3)), min_size=2, max_size=5),
       st.randoms())
def test_metrics_invariant_to_relabel_and_ref_order(items, rnd):
    corpus = {f"id{i}": (h, refs) for i, (h, refs) in enumerate(items)}
    keys = list(corpus)
    rnd.shuffle(keys)
    relabeled = {}
    for j, k in enumerate(keys):
        h, refs = corpus[k]
        refs = list(refs)
        rnd.shuffle(refs)
        relabeled[f"z{j}"] = (h, refs)
    for fn in (bleu4, rouge_l, cider):
        assert fn(relabeled) == pytest.approx(fn(corpus), abs=1e-12)
    assert 0.0 <= bleu4(corpus) <= 1.0 + 1e-12
    assert 0.0 <= rouge_l(corpus) <= 1.0 + 1e-12
    assert cider(corpus) >= 0.0
