import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_bleu, brute_lcs, brute_rouge_l, dp_levenshtein, loop_counts
from omniiml.metrics import (HashEmbedder, binary_f1, bleu, choice_accuracy, cosine_sim, evaluate_mask_corpus,
                             evaluate_text_corpus, lcs_length, levenshtein, load_word_vectors, mrb, ocr_accuracy,
                             pixel_counts, pixel_iou, rouge_l, rouge_n, score_interpretation, tokenize)

VOCAB = list("abcdef")


mask_pairs = st.tuples(st.integers(1, 10), st.integers(1, 10)).flatmap(
    lambda shape: st.tuples(arrays(np.uint8, shape, elements=st.integers(0, 1)),
                            arrays(np.uint8, shape, elements=st.integers(0, 1))))
token_lists = st.lists(st.sampled_from(VOCAB), min_size=0, max_size=8)


# ------------------------------------------------------------------ localization

def test_iou_f1_examples():
    pred = np.zeros((6, 6), np.uint8)
    gt = np.zeros((6, 6), np.uint8)
    pred[1:3, 1:3] = 1
    gt[1:3, 2:4] = 1
    assert (pixel_counts(pred, gt).tp, pixel_counts(pred, gt).fp, pixel_counts(pred, gt).fn) == (2, 2, 2)
    assert pixel_iou(pred, gt) == pytest.approx(1 / 3)
    assert binary_f1(pred, gt) == pytest.approx(0.5)
    assert pixel_iou(gt, gt) == 1.0 and binary_f1(gt, gt) == 1.0
    assert pixel_iou(pred, np.roll(pred, 3, axis=0)) == 0.0
    empty = np.zeros((4, 4))
    assert pixel_iou(empty, empty) == 1.0 and binary_f1(empty, empty) == 1.0
    with pytest.raises(ValueError):
        pixel_iou(np.zeros((2, 2)), np.zeros((2, 3)))


@given(mask_pairs)
def test_counts_match_loop_oracle(pair):
    pred, gt = pair
    c = pixel_counts(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == loop_counts(pred, gt)
    assert c.total == pred.size


@given(mask_pairs)
def test_f1_iou_identity_and_symmetry(pair):
    pred, gt = pair
    iou, f1 = pixel_iou(pred, gt), binary_f1(pred, gt)
    assert abs(f1 - 2 * iou / (1 + iou)) <= 1e-12
    assert iou == pixel_iou(gt, pred) and f1 == binary_f1(gt, pred)
    assert 0.0 <= iou <= f1 <= 1.0


# ------------------------------------------------------------------ text

def test_tokenize():
    assert tokenize("The cat, SAT!") == ["the", "cat", "sat"]
    assert tokenize(["A", "b"]) == ["A", "b"]


def test_rouge_examples():
    assert rouge_l("the cat", "the cat sat") == pytest.approx(0.8)
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("", "a") == 0.0


def test_bleu_examples():
    assert bleu("a b c d e", "a b c d e") == pytest.approx(1.0)
    assert bleu("", "a b") == 0.0
    expected = (3 / 4 * 2 / 3 * 1 / 2 * 1 / 2) ** 0.25
    assert bleu("a b c d", "a b c e") == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5946, abs=1e-4)


def test_bleu_matches_nltk_when_every_order_matches():
    from nltk.translate.bleu_score import sentence_bleu

    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(400):
        ref = list(rng.choice(VOCAB[:3], size=rng.integers(4, 10)))
        cand = list(rng.choice(VOCAB[:3], size=rng.integers(4, 10)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            expected = sentence_bleu([ref], cand)
        if expected > 1e-10:  # nltk reports a zero-match order as a denormal-sized score
            checked += 1
            assert bleu(cand, ref) == pytest.approx(expected, abs=1e-9)
    assert checked > 20


@given(token_lists, token_lists)
def test_rouge_and_bleu_match_brute_force(c, r):
    assert abs(rouge_l(c, r) - brute_rouge_l(c, r)) <= 1e-9
    assert abs(bleu(c, r) - brute_bleu(c, r)) <= 1e-9
    assert lcs_length(c, r) == brute_lcs(c, r) if c and r else lcs_length(c, r) == 0


@given(token_lists, token_lists)
def test_scores_bounded_and_rouge_symmetric(c, r):
    for value in (rouge_l(c, r), bleu(c, r), mrb(c, r), rouge_n(c, r)):
        assert 0.0 <= value <= 1.0 + 1e-12
    assert rouge_l(c, r) == pytest.approx(rouge_l(r, c))


def test_mrb_is_the_mean():
    assert mrb("a b c d", "a b c e") == pytest.approx((rouge_l("a b c d", "a b c e") + bleu("a b c d", "a b c e")) / 2)
    assert mrb("x y z w", "x y z w") == pytest.approx(1.0)


def test_rouge_2():
    assert rouge_n("a b c", "a b d", 2) == pytest.approx(0.5)


def test_ocr_accuracy_examples():
    assert ocr_accuracy("abc", "abc") == 1.0
    assert ocr_accuracy("abcd", "abce") == 0.75
    assert ocr_accuracy("zzzzzzzzzz", "ab") == 0.0
    assert ocr_accuracy("", "") == 1.0


@given(st.text("abc", max_size=7), st.text("abc", max_size=7))
def test_levenshtein_matches_table(a, b):
    assert levenshtein(a, b) == dp_levenshtein(a, b) == levenshtein(b, a)


def test_choice_accuracy():
    assert choice_accuracy(["Top left", "x"], [" top LEFT ", "x"]) == 1.0
    assert choice_accuracy(["a", "b", "c", "d"], ["a", "x", "y", "z"]) == 0.25
    assert choice_accuracy([{"A", "B"}], [{"B", "C"}], mode="multi") == pytest.approx(1 / 3)
    assert choice_accuracy([set()], [set()], mode="multi") == 1.0
    assert choice_accuracy([{"A", "B"}], [{"B", "A"}], mode="multi", strict=True) == 1.0
    assert choice_accuracy([{"A"}], [{"B", "A"}], mode="multi", strict=True) == 0.0
    with pytest.raises(ValueError):
        choice_accuracy(["a"], ["a", "b"])


def test_cosine_examples():
    assert cosine_sim("red edge halo", "red edge halo") == pytest.approx(1.0)
    table = {"a": np.array([1.0, 0.0]), "b": np.array([-1.0, 0.0]), "c": np.array([0.0, 1.0])}
    assert cosine_sim("a", "b", table.__getitem__) == pytest.approx(0.0)
    assert cosine_sim("a", "c", table.__getitem__) == pytest.approx(0.5)
    zero = lambda tok: np.zeros(2)  # noqa: E731
    assert cosine_sim("a", "b", zero) == 0.5


@given(st.text("abc ", max_size=20), st.text("abc ", max_size=20))
def test_cosine_symmetric_and_bounded(a, b):
    emb = HashEmbedder(16)
    value = cosine_sim(a, b, emb)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(cosine_sim(b, a, emb))


def test_word_vector_file(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("3 2\nred 1 0\nblue 0 1\n")
    emb = load_word_vectors(path)
    assert cosine_sim("red", "blue", emb) == pytest.approx(0.5)
    assert cosine_sim("red", "unknownword", emb) == 0.5


def test_corpus_reports():
    text = evaluate_text_corpus([{"id": 1, "prediction": "a b", "reference": "a b"}])
    assert text["count"] == 1 and text["rouge_l"] == 1.0
    masks = evaluate_mask_corpus([(np.ones((2, 2)), np.ones((2, 2))), (np.zeros((2, 2)), np.ones((2, 2)))])
    assert masks["iou"] == 0.5
    with pytest.raises(ValueError):
        evaluate_mask_corpus([])


REFERENCE = [{"Tampered Region": "red car", "Absolute Position": "Top left",
              "Relative Position": "next to the tree", "Artifacts": {"Edge Artifacts": "sharp halo"}}]


def test_interpretation_scoring():
    import json

    perfect = score_interpretation("Answer: " + json.dumps(REFERENCE), REFERENCE)
    assert perfect["parsed"] and perfect["region"] == pytest.approx(1.0) and perfect["absolute"] == 1.0
    assert perfect["artifact_titles"] == 1.0
    broken = score_interpretation("no structure here", REFERENCE)
    assert not broken["parsed"] and all(v == 0.0 for k, v in broken.items() if k != "parsed")
    two = score_interpretation(json.dumps(REFERENCE * 2), REFERENCE)
    assert two["absolute"] == 0.5
    ocr = score_interpretation(json.dumps([{**REFERENCE[0], "Tampered Region": "red cat"}]), REFERENCE,
                               text_task=True)
    assert ocr["region"] == pytest.approx(6 / 7)
