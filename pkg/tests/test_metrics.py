import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rnada.metrics import action_topk, disagreement, evaluate_predictions, topk


def test_topk_examples():
    assert topk([[0.6, 0.4]], [0], 1) == 1.0
    assert topk([[0.4, 0.6]], [0], 1) == 0.0
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=20)
    assert topk(p, rng.integers(0, 4, 20), 4) == 1.0
    with pytest.raises(ValueError):
        topk([[0.5, 0.5]], [2], 1)
    with pytest.raises(ValueError):
        topk([[0.5, 0.5]], [0], 3)


def test_topk_ties_rank_lower_index_first():
    assert topk([[0.25, 0.25, 0.25, 0.25]], [0], 1) == 1.0
    assert topk([[0.25, 0.25, 0.25, 0.25]], [3], 3) == 0.0


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(0.01, 1.0), unique=True),
       st.integers(1, 5), st.lists(st.integers(0, 4), min_size=6, max_size=6))
def test_topk_monotone_invariance(p, k, labels):
    for f in (np.log, lambda x: x ** 3, lambda x: 2 * x + 7):
        assert topk(f(p), labels, k) == topk(p, labels, k)


def test_action_examples():
    one_v, one_n = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert action_topk(one_v, one_n, [0], [0], 1) == 0.0
    assert action_topk(one_v, one_n, [0], [1], 1) == 1.0
    uni = np.full((3, 2), 0.5)
    assert action_topk(uni, uni, [0, 1, 1], [1, 0, 1], 4) == 1.0
    with pytest.raises(ValueError):
        action_topk(uni, uni[:2], [0, 1, 1], [0, 1, 1], 1)


def test_action_top5_uses_product_ranking():
    vp = np.array([[0.5, 0.3, 0.2]])
    np_ = np.array([[0.6, 0.25, 0.15]])
    # .30 (0,0), .18 (1,0), .125 (0,1), .12 (2,0), then (0,2) and (1,1) tie at .075
    assert action_topk(vp, np_, [2], [0], 4) == 1.0
    assert action_topk(vp, np_, [0], [2], 5) == 1.0
    assert action_topk(vp, np_, [1], [1], 5) == 0.0
    assert action_topk(vp, np_, [1], [1], 6) == 1.0


def test_disagreement_examples():
    assert disagreement([[0, 1, 2], [0, 1, 2]]) == 0.0
    assert disagreement([[0, 1], [1, 1]]) == 0.5
    assert disagreement([[0, 1], [1, 0]]) == 1.0
    with pytest.raises(ValueError):
        disagreement([[0, 1]])


def test_report_invariants_and_per_kitchen_aggregation():
    rng = np.random.default_rng(4)
    n = 60
    vp, np_ = rng.dirichlet(np.ones(4), n), rng.dirichlet(np.ones(6), n)
    verbs, nouns = rng.integers(0, 4, n), rng.integers(0, 6, n)
    kitchens = rng.integers(0, 3, n)
    preds = (rng.integers(0, 4, (2, n)), rng.integers(0, 6, (2, n)))
    rep = evaluate_predictions(vp, np_, verbs, nouns, kitchens, preds)
    assert rep.verb_top1 <= rep.verb_top5 and rep.action_top1 <= rep.action_top5
    assert rep.action_top1 <= min(rep.verb_top1, rep.noun_top1)
    assert sorted(rep.per_kitchen) == [0, 1, 2]
    for field in ("verb_top1", "noun_top5", "action_top1", "action_top5", "disagreement"):
        agg = sum(getattr(r, field) * r.n_samples for r in rep.per_kitchen.values()) / n
        assert agg == pytest.approx(getattr(rep, field), abs=1e-12)


def test_report_serialization():
    rep = evaluate_predictions([[0.7, 0.3]], [[0.2, 0.8]], [0], [1], kitchens=[2])
    d = rep.to_dict()
    assert d["action"] == {"top1": 1.0, "top5": 1.0} and "2" in d["per_kitchen"]
    assert "disagreement" not in d
    lines = rep.to_csv().splitlines()
    assert lines[0] == "subset,verb_top1,noun_top1,action_top1,verb_top5,noun_top5,action_top5"
    assert lines[1].startswith("all,1.000000") and lines[2].startswith("kitchen_2,")
