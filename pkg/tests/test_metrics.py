import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capdet.dataset import FAKE_GENERATORS, REAL_TAG, Manifest
from capdet.labels import Label
from capdet.metrics import (
    Confusion,
    EvalMatrix,
    accuracy,
    agreement_codes,
    codes_to_csv,
    confusion,
    evaluate_matrix,
    f1,
    precision,
    recall,
)

F, R = Label.FAKE, Label.REAL


def test_confusion_examples():
    assert confusion([F, F, R, R], [F, F, R, R]) == Confusion(tp=2, fp=0, tn=2, fn=0)
    assert confusion([F, F, R, R], [F, R, R, R]) == Confusion(tp=1, fp=1, tn=2, fn=0)
    assert confusion([R] * 5, [F] * 5) == Confusion(tp=0, fp=0, tn=0, fn=5)


@pytest.mark.parametrize("preds, golds", [([F], [F, R]), ([], [])])
def test_confusion_errors(preds, golds):
    with pytest.raises(ValueError):
        confusion(preds, golds)


def test_hand_evaluated_scores():
    c = Confusion(tp=1, fp=1, tn=2, fn=0)
    assert accuracy(c) == 0.75
    assert precision(c) == 0.5 and recall(c) == 1.0
    assert f1(c) == pytest.approx(2 / 3)


def test_perfect():
    c = confusion([F, R, F], [F, R, F])
    assert accuracy(c) == 1 and f1(c) == 1


def test_no_positives_anywhere():
    c = confusion([R, R], [R, R])
    assert accuracy(c) == 1 and f1(c) == 0


def test_empty_confusion():
    with pytest.raises(ValueError):
        accuracy(Confusion(0, 0, 0, 0))
    with pytest.raises(ValueError):
        f1(Confusion(0, 0, 0, 0))


def _brute(preds, golds):
    pairs = list(zip(preds, golds))
    tp = sum(p == 1 and g == 1 for p, g in pairs)
    fp = sum(p == 1 and g == 0 for p, g in pairs)
    fn = sum(p == 0 and g == 1 for p, g in pairs)
    acc = sum(p == g for p, g in pairs) / len(pairs)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return acc, (2 * prec * rec / (prec + rec) if prec + rec else 0.0)


def test_oracle_on_1000_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p, g = rng.integers(0, 2, n), rng.integers(0, 2, n)
        c = confusion(p, g)
        acc, f = _brute(p.tolist(), g.tolist())
        assert accuracy(c) == pytest.approx(acc, abs=1e-12)
        assert f1(c) == pytest.approx(f, abs=1e-12)
        assert c.total == n


pairs = st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(pairs, st.randoms(use_true_random=False))
def test_permutation_invariance(data, rnd):
    p, g = zip(*data)
    shuffled = list(data)
    rnd.shuffle(shuffled)
    q, h = zip(*shuffled)
    assert confusion(p, g) == confusion(q, h)


@settings(max_examples=200, deadline=None)
@given(pairs)
def test_bounds_and_f1_equality_condition(data):
    p, g = zip(*data)
    c = confusion(p, g)
    assert 0 <= accuracy(c) <= 1 and 0 <= f1(c) <= 1
    assert (f1(c) == 1) == (c.fp == 0 and c.fn == 0 and c.tp > 0)


# ---------------------------------------------------------------- matrix


def _const(label):
    return lambda imgs: np.full(len(imgs), int(label), np.int64)


def test_constant_predictors(small_corpus):
    m = evaluate_matrix({"always-fake": _const(F), "always-real": _const(R)}, small_corpus)
    assert m.cols == list(FAKE_GENERATORS) and len(m.cols) == 7
    for g in m.cols:
        assert m.acc["always-fake"][g] == 0.5 and m.f1["always-fake"][g] == pytest.approx(2 / 3)
        assert m.acc["always-real"][g] == 0.5 and m.f1["always-real"][g] == 0.0
    assert m.avg("always-fake") == pytest.approx((0.5, 2 / 3))
    text = m.to_text()
    assert "Avg" in text.splitlines()[1]
    assert all(g in text for g in FAKE_GENERATORS)


def test_avg_is_arithmetic_mean(small_corpus):
    # a predictor keyed on image content so cells differ
    def by_brightness(imgs):
        return (imgs.mean(axis=(1, 2, 3)) > 0.5).astype(np.int64)

    m = evaluate_matrix({"b": by_brightness}, small_corpus)
    a, f = m.avg("b")
    assert a == pytest.approx(np.mean([m.acc["b"][g] for g in m.cols]))
    assert f == pytest.approx(np.mean([m.f1["b"][g] for g in m.cols]))
    assert all(0 <= m.acc["b"][g] <= 1 for g in m.cols)


def test_real_pool_predicted_once(small_corpus):
    sizes = []

    def spy(imgs):
        sizes.append(len(imgs))
        return np.zeros(len(imgs), np.int64)

    evaluate_matrix({"spy": spy}, small_corpus)
    assert sizes == [8] + [8] * 7  # real pool first, then one call per generator


def test_matrix_json_round_trip(small_corpus):
    m = evaluate_matrix({"f": _const(F)}, small_corpus)
    m.meta["models"] = ["f"]
    back = EvalMatrix.from_dict(json.loads(m.to_json()))
    assert back.to_dict() == m.to_dict()
    assert back.corpus_seed == 42


def test_empty_subset(small_corpus):
    no_reals = Manifest([r for r in small_corpus if r.generator != REAL_TAG], 42, small_corpus.root)
    with pytest.raises(ValueError, match="REAL"):
        evaluate_matrix({"f": _const(F)}, no_reals)
    with pytest.raises(ValueError, match="G-X"):
        evaluate_matrix({"f": _const(F)}, small_corpus, generators=["G-X"])


def test_bold_marks_cells(small_corpus):
    m = evaluate_matrix({"f": _const(F), "r": _const(R)}, small_corpus)
    assert "*50.00 / 66.67*" in m.to_text(bold={"G-A": {"f"}})


# ---------------------------------------------------------------- agreement codes


def test_codes_on_real_image(small_corpus):
    reals = small_corpus.filter("test", REAL_TAG)
    models = {f"m{i}": _const(R) for i in range(4)} | {"m4": _const(F)}
    codes = agreement_codes(models, reals)
    assert len(codes) == len(reals)
    assert all(c.code == "00001" and len(c.bits) == 5 for c in codes)
    assert [c.path for c in codes] == [r.path for r in reals]


def test_all_correct_real_is_zero(small_corpus):
    reals = small_corpus.filter("test", REAL_TAG)
    assert {c.code for c in agreement_codes({"a": _const(R), "b": _const(R)}, reals)} == {"00"}


def test_code_length_matches_models(small_corpus):
    sub = small_corpus.filter("test", "G-C")
    for k in (1, 3, 7):
        codes = agreement_codes({f"m{i}": _const(F) for i in range(k)}, sub)
        assert {len(c.code) for c in codes} == {k}


def test_codes_need_a_model(small_corpus):
    with pytest.raises(ValueError):
        agreement_codes({}, small_corpus)


def test_codes_csv(small_corpus):
    sub = small_corpus.filter("test", "G-A")
    text = codes_to_csv(agreement_codes({"x": _const(F), "y": _const(R)}, sub), ["x", "y"])
    lines = text.splitlines()
    assert lines[0] == "# model order: x|y" and lines[1] == "path,code"
    assert lines[2] == f"{sub.records[0].path},10"
