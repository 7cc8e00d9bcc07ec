import numpy as np
import pytest

from mmoe.gating import GatingConfig, predict_batch
from mmoe.harness import (MODES, collect, decisive_margins, evaluate, expected_param_load,
                          expected_params_formula, margin_stats, replay, shared_csv, shared_layers_sweep,
                          summarize_margins, sweep_csv, threshold_sweep)
from mmoe.partition import SuperclassMap
from mmoe.training import TrainConfig, build_and_train

THRESHOLDS = [0.25, 0.5, 1, 2, 3, 4, 6, 8, 12, 1e9]


def test_formula_synthetic():
    assert expected_params_formula(300, [100, 100], [0.5, 0.5], 0.25, 200) == 450.0


def test_margins_hand():
    margins = [6, 7, 5, 2, 1, 3]
    stats = summarize_margins(margins, [True, True, True, False, False, False])
    assert (stats.mean_correct, stats.mean_false) == (6.0, 2.0)
    assert stats.std_correct == pytest.approx(np.sqrt(2 / 3))
    assert (stats.n_correct, stats.n_false) == (3, 3)


def test_margins_empty_group_absent():
    stats = summarize_margins([1.0, 2.0], [True, True])
    assert stats.mean_false is None and stats.std_false is None and stats.n_false == 0


def test_decisive_margin():
    np.testing.assert_array_equal(decisive_margins([[1.0, 4.0, 2.5], [0.0, 0.0, -1.0]]), [1.5, 0.0])


def test_unknown_mode(synth_ensemble, synth_split):
    with pytest.raises(ValueError):
        evaluate(synth_ensemble, synth_split[1], mode="oracle")


@pytest.mark.parametrize("mode", MODES)
def test_rates_in_range(synth_ensemble, synth_split, mode):
    rep = evaluate(synth_ensemble, synth_split[1], GatingConfig(2.0), mode)
    assert 0 <= rep.top1 <= 1 and rep.n_samples == len(synth_split[1])
    for v in [*rep.p_stop, rep.false_stop_rate, rep.mediator_rate, rep.superclass_accuracy]:
        assert v is None or 0 <= v <= 1
    assert rep.expected_params > 0
    assert len(rep.to_csv().splitlines()) == 2


def test_p_stop_matches_records(synth_ensemble, synth_split):
    test = synth_split[1]
    cfg = GatingConfig(2.0)
    rep = evaluate(synth_ensemble, test, cfg, "mmoe")
    records = predict_batch(synth_ensemble, test.images, cfg).records(test.labels)
    for i, p in enumerate(rep.p_stop):
        assert p == pytest.approx(np.mean([i in r.decision.stopped for r in records]), abs=1e-12)
    assert rep.mediator_rate == pytest.approx(np.mean([r.mediator_run for r in records]), abs=1e-12)
    for r in records:
        assert r.mediator_run == (len(r.decision.active) > 1)
        assert abs(r.probs.sum() - 1) < 1e-9


def test_baseline_is_mediator(synth_ensemble, synth_split):
    from mmoe.training import accuracy
    rep = evaluate(synth_ensemble, synth_split[1], mode="baseline")
    assert rep.top1 == accuracy(synth_ensemble.mediator, synth_split[1])


def test_branching_uses_one_expert(synth_ensemble, synth_split):
    rep = evaluate(synth_ensemble, synth_split[1], mode="branching")
    assert sum(rep.p_stop) == pytest.approx(1.0)  # exactly one of two experts stops per sample
    assert rep.mediator_rate == 0.0
    assert rep.false_stop_rate == pytest.approx(1 - rep.superclass_accuracy)


def test_replay_matches_fresh_evaluation(synth_ensemble, synth_split):
    test = synth_split[1]
    cache = collect(synth_ensemble, test)
    for t in THRESHOLDS:
        for mode in ("mmoe", "unmediated"):
            a = replay(cache, GatingConfig(t), mode)
            b = evaluate(synth_ensemble, test, GatingConfig(t), mode)
            assert a.p_stop == b.p_stop and a.mediator_rate == b.mediator_rate
            assert a.false_stop_rate == b.false_stop_rate
            assert a.top1 == b.top1 and a.expected_params == b.expected_params


def test_sweep_monotone(synth_ensemble, synth_split):
    rows = threshold_sweep(synth_ensemble, synth_split[1], THRESHOLDS)
    for a, b in zip(rows, rows[1:]):
        assert b.expected_params >= a.expected_params
        assert b.false_stop_rate <= a.false_stop_rate
        assert all(pb <= pa for pa, pb in zip(a.p_stop, b.p_stop))


def test_large_threshold_limit(synth_ensemble, synth_split):
    rows = threshold_sweep(synth_ensemble, synth_split[1], [1e9])
    b = synth_ensemble.param_budget()
    shared = b.shared
    experts = sum(e.net.n_params(synth_ensemble.config.prefix_len) for e in synth_ensemble.experts)
    heads = sum(e.head.n_params() for e in synth_ensemble.experts)
    mediator = synth_ensemble.mediator.n_params(synth_ensemble.config.prefix_len)
    assert rows[0].expected_params == shared + experts + heads + mediator
    assert rows[0].mediator_rate == 1.0 and rows[0].p_stop == (0.0, 0.0)


def test_analytic_matches_empirical(synth_ensemble, synth_split):
    test = synth_split[1]
    for t in THRESHOLDS:
        cfg = GatingConfig(t)
        analytic = expected_param_load(synth_ensemble, test, cfg).expected
        empirical = predict_batch(synth_ensemble, test.images, cfg).params_touched.mean()
        assert abs(analytic - empirical) <= 1e-6 * empirical


def test_single_expert_load(synth_split, synth_cfg, fast_train):
    cfg = synth_cfg.with_(n_experts=1)
    ens = build_and_train(cfg, SuperclassMap((tuple(range(6)),)), synth_split[0], fast_train)
    load = expected_param_load(ens, synth_split[1], GatingConfig(1.0))
    assert load.p_mediator == 0.0
    assert load.expected == ens.experts[0].net.n_params() + ens.experts[0].head.n_params()
    with pytest.raises(ValueError):
        margin_stats(ens, synth_split[1])


def test_sweep_csv_header(synth_ensemble, synth_split):
    text = sweep_csv(threshold_sweep(synth_ensemble, synth_split[1], [1, 4]))
    lines = text.splitlines()
    assert lines[0] == "T,top1,p_stop_0,p_stop_1,false_stop,mediator_rate,expected_params"
    assert len(lines) == 3 and lines[1].startswith("1.0,")


def test_sweep_rejects_nonpositive(synth_ensemble, synth_split):
    with pytest.raises(ValueError):
        threshold_sweep(synth_ensemble, synth_split[1], [1, 0])


def test_shared_sweep_deterministic(synth_split, synth_cfg):
    cfg = TrainConfig(epochs=2, expert_epochs=1, confidence_epochs=1, batch_size=32)
    args = (synth_cfg, SuperclassMap.contiguous([3, 3]), *synth_split, [0, 2], cfg, GatingConfig(4.0))
    rows = shared_layers_sweep(*args)
    assert [k for k, _ in rows] == [0, 2]
    assert rows == shared_layers_sweep(*args)
    assert shared_csv(rows).splitlines()[0] == "k,top1"
