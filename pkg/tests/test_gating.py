import math

import numpy as np
import pytest

from mmoe.gating import (FusionWeights, GatingConfig, GatingDecision, PredictionRecord, fuse, fusion_weights,
                         gate, parse_record_line, scatter_expert_probs, self_score, stop_decision, stop_mask,
                         weight_matrix)
from mmoe.nn import Network, parse_layers


def brute_stop(scores, i, threshold):
    best = -math.inf
    for k, s in enumerate(scores):
        if k != i and s > best:
            best = s
    return best - scores[i] >= threshold


def test_self_score_component():
    head = Network.build(parse_layers("flatten, fc:2"), (1, 2, 1), dtype=np.float64)
    head.params[1]["W"][:] = 0
    head.params[1]["b"][:] = [3.2, -1.0]
    assert self_score(0, head, np.ones((1, 2, 1))) == 3.2
    assert self_score(1, head, np.ones((1, 2, 1))) == -1.0


def test_self_score_zero_input():
    head = Network.build(parse_layers("flatten, fc:3"), (4,), seed=2, dtype=np.float64)
    head.params[1]["b"][:] = 0
    assert self_score(2, head, np.zeros(4)) == 0.0


def test_self_score_out_of_range():
    head = Network.build(parse_layers("flatten, fc:2"), (3,))
    with pytest.raises(ValueError):
        self_score(2, head, np.zeros(3))


def test_stop_examples():
    assert stop_decision([5.0, 1.0], 1, 3) is True
    assert stop_decision([5.0, 1.0], 0, 3) is False
    assert stop_decision([2.0, 2.0], 0, 0.5) is False
    assert stop_decision([2.0, 2.0], 1, 0.5) is False
    assert stop_decision([7.0], 0, 0.1) is False


def test_stop_at_exact_threshold():
    assert stop_decision([4.0, 1.0], 1, 3.0) is True


def test_gate_confident():
    d = gate([6.1, 1.8], GatingConfig(4))
    assert d.stopped == {1} and d.active == {0} and not d.mediator_invoked


def test_gate_both_active():
    d = gate([3.0, 2.5], GatingConfig(4))
    assert d.stopped == frozenset() and d.active == {0, 1} and d.mediator_invoked


def test_gate_single_expert():
    d = gate([-50.0], GatingConfig(0.01))
    assert d.active == {0} and not d.mediator_invoked


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_threshold_must_be_positive(t):
    with pytest.raises(ValueError):
        GatingConfig(t)


def test_mediator_weight_range():
    with pytest.raises(ValueError):
        GatingConfig(1.0, 1.5)


def test_scatter():
    out = scatter_expert_probs([0.7, 0.3], (5, 9), 10, False)
    expected = np.zeros(10)
    expected[5], expected[9] = 0.7, 0.3
    np.testing.assert_array_equal(out, expected)
    assert out.sum() == pytest.approx(1.0)


def test_scatter_stopped_is_zero():
    out = scatter_expert_probs([0.7, 0.3], (5, 9), 10, True)
    assert out.shape == (10,) and not out.any()


@pytest.mark.parametrize("mapping", [(5, 10), (3, 3), (-1, 2)])
def test_scatter_bad_mapping(mapping):
    with pytest.raises(ValueError):
        scatter_expert_probs([0.5, 0.5], mapping, 10, False)


def test_weights_single_active():
    w = fusion_weights(gate([9.0, 0.0], GatingConfig(4)), 0.6)
    np.testing.assert_array_equal(w.expert_weights, [1.0, 0.0])
    assert w.mediator_weight == 0.0


def test_weights_equal_scores():
    w = fusion_weights(gate([1.5, 1.5], GatingConfig(4)), 0.6)
    np.testing.assert_allclose(w.expert_weights, [0.2, 0.2], rtol=1e-15)
    assert w.mediator_weight == 0.6


def test_weights_softmax_hand_values():
    w = fusion_weights(gate([1.0, 0.0], GatingConfig(4)), 0.6)
    e = math.e
    np.testing.assert_allclose(w.expert_weights, [0.4 * e / (e + 1), 0.4 / (e + 1)], rtol=1e-14)
    np.testing.assert_allclose(w.expert_weights, [0.2924, 0.1076], atol=5e-5)
    assert w.total == pytest.approx(1.0, abs=1e-12)


def test_weights_shift_invariant():
    a = fusion_weights(gate([1.0, 0.3, -2.0], GatingConfig(2.5)), 0.6)
    b = fusion_weights(gate([101.0, 100.3, 98.0], GatingConfig(2.5)), 0.6)
    np.testing.assert_allclose(a.expert_weights, b.expert_weights, rtol=1e-12)


def test_fuse_single_expert_identity():
    v = scatter_expert_probs([0.1, 0.9], (0, 2), 4, False)
    out = fuse([v, np.zeros(4)], None, FusionWeights(np.array([1.0, 0.0]), 0.0))
    np.testing.assert_array_equal(out, v)


def test_fuse_hand_mixture():
    a = np.array([0.5, 0.5, 0.0, 0.0])
    b = np.array([0.0, 0.0, 0.25, 0.75])
    med = np.array([0.1, 0.2, 0.3, 0.4])
    out = fuse([a, b], med, FusionWeights(np.array([0.2, 0.2]), 0.6))
    # 0.2*a + 0.2*b + 0.6*med, by hand
    np.testing.assert_allclose(out, [0.16, 0.22, 0.23, 0.39], rtol=1e-14)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert set(np.flatnonzero(out)) == {0, 1, 2, 3}


def test_fuse_needs_mediator():
    with pytest.raises(ValueError):
        fuse([np.ones(2) / 2], None, FusionWeights(np.array([0.4]), 0.6))


def test_stop_mask_matches_per_sample_oracle():
    rng = np.random.default_rng(5)
    for n in range(1, 9):
        s = rng.normal(0, 3, size=(400, n))
        s[:50, :] = np.round(s[:50, :])  # ties
        t = float(rng.uniform(0.1, 6))
        mask = stop_mask(s, t)
        for b in range(len(s)):
            assert [brute_stop(s[b], i, t) for i in range(n)] == mask[b].tolist()


def test_weight_matrix_matches_per_sample():
    rng = np.random.default_rng(6)
    s = rng.normal(0, 3, size=(300, 4))
    stopped = stop_mask(s, 2.0)
    w, w_med = weight_matrix(s, stopped, 0.6)
    for b in range(len(s)):
        fw = fusion_weights(gate(s[b], GatingConfig(2.0)), 0.6)
        np.testing.assert_allclose(w[b], fw.expert_weights, rtol=1e-12, atol=1e-15)
        assert w_med[b] == fw.mediator_weight


def test_stopping_monotone_in_threshold():
    rng = np.random.default_rng(7)
    s = rng.normal(0, 3, size=(500, 3))
    prev = stop_mask(s, 0.1)
    for t in np.linspace(0.2, 12, 40):
        cur = stop_mask(s, t)
        assert not np.any(cur & ~prev)
        prev = cur
    gaps = s.max(axis=1) - s.min(axis=1)
    assert not stop_mask(s, gaps.max() + 1e-9).any()


def test_record_line_round_trip():
    d = GatingDecision(frozenset({0}), frozenset({1, 2}), False, (6.25, 1.5, -0.125))
    rec = PredictionRecord(17, 3, np.zeros(5), d, FusionWeights(np.array([1.0, 0, 0]), 0.0), 0, False, 4)
    line = rec.to_line()
    assert line == "17\t6.25,1.5,-0.125\t1,2\t0\t3\t4"
    back = parse_record_line(line)
    assert back["scores"] == d.scores and back["stopped"] == d.stopped
    assert back["predicted"] == 3 and back["true"] == 4 and back["mediator"] is False


def test_record_line_none_stopped():
    d = GatingDecision(frozenset({0, 1}), frozenset(), True, (1.0, 0.5))
    rec = PredictionRecord(0, 1, np.zeros(2), d, FusionWeights(np.array([0.2, 0.2]), 0.6), 0, True)
    assert rec.to_line().split("\t")[2:] == ["-", "1", "1", "-"]
