"""Evaluation: accuracy, stop statistics, parameter-load accounting and sweeps."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .builder import EnsembleConfig
from .data import LabeledDataset
from .gating import GatingConfig, confidence_scores, predict_batch, stop_mask, weight_matrix
from .nn import Network, run, softmax
from .partition import SuperclassMap
from .training import Ensemble, ParamBudget, TrainConfig, build_and_train

MODES = ("baseline", "branching", "unmediated", "mmoe")


@dataclass(frozen=True)
class MarginStats:
    mean_correct: Optional[float]
    std_correct: Optional[float]
    mean_false: Optional[float]
    std_false: Optional[float]
    n_correct: int
    n_false: int


@dataclass
class MetricsReport:
    mode: str
    threshold: Optional[float]
    top1: float
    n_samples: int
    superclass_accuracy: Optional[float] = None
    p_stop: tuple = ()
    false_stop_rate: Optional[float] = None
    mediator_rate: Optional[float] = None
    expected_params: Optional[float] = None
    margins: Optional[MarginStats] = None

    def header(self) -> list:
        return (["mode", "T", "top1", "superclass_acc"]
                + [f"p_stop_{i}" for i in range(len(self.p_stop))]
                + ["false_stop", "mediator_rate", "expected_params", "n",
                   "margin_correct_mean", "margin_correct_std", "margin_false_mean", "margin_false_std"])

    def row(self) -> list:
        m = self.margins or MarginStats(None, None, None, None, 0, 0)
        return ([self.mode, self.threshold, self.top1, self.superclass_accuracy, *self.p_stop,
                 self.false_stop_rate, self.mediator_rate, self.expected_params, self.n_samples,
                 m.mean_correct, m.std_correct, m.mean_false, m.std_false])

    def to_csv(self) -> str:
        return format_csv(self.header(), [self.row()])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def format_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


# ------------------------------------------------------------------ margins


def decisive_margins(scores) -> np.ndarray:
    """Gap between the best and second-best score per row."""
    s = np.sort(np.asarray(scores, dtype=np.float64), axis=1)
    return s[:, -1] - s[:, -2]


def summarize_margins(margins, correct) -> MarginStats:
    margins = np.asarray(margins, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)

    def stats(values):
        if len(values) == 0:
            return None, None
        return float(values.mean()), float(values.std())

    mc, sc = stats(margins[correct])
    mf, sf = stats(margins[~correct])
    return MarginStats(mc, sc, mf, sf, int(correct.sum()), int((~correct).sum()))


def margin_stats(ensemble: Ensemble, dataset: LabeledDataset) -> MarginStats:
    """Decisive score margin grouped by whether the top-scoring expert owns the sample."""
    if ensemble.partition.n_superclasses < 2:
        raise ValueError("margins need at least two experts")
    _, _, scores = confidence_scores(ensemble, dataset.images)
    truth = ensemble.partition.lookup[dataset.labels]
    return summarize_margins(decisive_margins(scores), scores.argmax(axis=1) == truth)


# ------------------------------------------------------------------ parameter load


def expected_params_formula(fixed: float, suffix: Sequence[float], p_stop: Sequence[float],
                            p_mediator: float, mediator: float) -> float:
    """``fixed + sum_i (1 - p_i) * suffix_i + P(mediator runs) * mediator``."""
    return float(fixed + sum((1.0 - p) * s for p, s in zip(p_stop, suffix)) + p_mediator * mediator)


@dataclass(frozen=True)
class ParamLoad:
    expected: float
    all_on: int
    traditional_moe: int
    single_model: int
    p_stop: tuple
    p_mediator: float


def expected_param_load(ensemble: Ensemble, dataset: LabeledDataset,
                        cfg: Optional[GatingConfig] = None) -> ParamLoad:
    cfg = cfg or ensemble.gating
    budget = ensemble.param_budget()
    _, _, scores = confidence_scores(ensemble, dataset.images)
    stopped = stop_mask(scores, cfg.threshold)
    p_stop = tuple(float(v) for v in stopped.mean(axis=0))
    multi = (~stopped).sum(axis=1) > 1
    p_med = float(multi.mean()) if cfg.mediator_weight > 0 else 0.0
    return ParamLoad(
        expected=expected_params_formula(budget.fixed, budget.suffix, p_stop, p_med, budget.mediator),
        all_on=budget.all_on,
        traditional_moe=budget.traditional_moe,
        single_model=ensemble.mediator.n_params(),
        p_stop=p_stop,
        p_mediator=p_med,
    )


# ------------------------------------------------------------------ evaluate


def _gated_report(mode, threshold, labels, truth, scores, stopped, probs, mediator_run, params) -> MetricsReport:
    n = len(labels)
    return MetricsReport(
        mode=mode,
        threshold=threshold,
        top1=float((probs.argmax(axis=1) == labels).mean()),
        n_samples=n,
        superclass_accuracy=float((scores.argmax(axis=1) == truth).mean()),
        p_stop=tuple(float(v) for v in stopped.mean(axis=0)),
        false_stop_rate=float(stopped[np.arange(n), truth].mean()),
        mediator_rate=float(mediator_run.mean()),
        expected_params=float(params.mean()),
        margins=summarize_margins(decisive_margins(scores), scores.argmax(axis=1) == truth)
        if scores.shape[1] > 1 else None,
    )


def evaluate(ensemble: Ensemble, dataset: LabeledDataset, cfg: Optional[GatingConfig] = None,
             mode: str = "mmoe", baseline: Optional[Network] = None) -> MetricsReport:
    """Run one evaluation mode over ``dataset``.

    baseline: a single full classifier (``baseline`` or else the mediator) alone.
    branching: the top-scoring expert alone decides, no mediator.
    unmediated: gating and fusion with the mediator weight forced to 0.
    mmoe: the full gated, mediated pipeline.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = cfg or ensemble.gating
    labels = dataset.labels
    if mode == "baseline":
        net = baseline or ensemble.mediator
        pred = run(net, dataset.images).argmax(axis=1)
        return MetricsReport("baseline", None, float((pred == labels).mean()), len(labels),
                             expected_params=float(net.n_params()))
    truth = ensemble.partition.lookup[labels]
    if mode == "branching":
        return _branching(ensemble, dataset, truth)
    if mode == "unmediated":
        cfg = GatingConfig(cfg.threshold, 0.0)
    bp = predict_batch(ensemble, dataset.images, cfg)
    return _gated_report(mode, cfg.threshold, labels, truth, bp.scores, bp.stopped, bp.probs,
                         bp.mediator_run, bp.params_touched)


def _branching(ensemble: Ensemble, dataset: LabeledDataset, truth) -> MetricsReport:
    arch = ensemble.config
    shared, acts, scores = confidence_scores(ensemble, dataset.images)
    chosen = scores.argmax(axis=1)
    budget = ensemble.param_budget()
    pred = np.empty(len(dataset), dtype=np.int64)
    params = np.full(len(dataset), budget.fixed, dtype=np.int64)
    for i, expert in enumerate(ensemble.experts):
        rows = np.flatnonzero(chosen == i)
        if len(rows):
            local = run(expert.net, acts[i][rows], arch.confidence_index).argmax(axis=1)
            pred[rows] = np.asarray(expert.local_to_global)[local]
            params[rows] += budget.suffix[i]
    n = len(dataset)
    stopped = chosen[:, None] != np.arange(scores.shape[1])[None, :]
    return MetricsReport(
        mode="branching", threshold=None, top1=float((pred == dataset.labels).mean()), n_samples=n,
        superclass_accuracy=float((chosen == truth).mean()),
        p_stop=tuple(float(v) for v in stopped.mean(axis=0)),
        false_stop_rate=float((chosen != truth).mean()), mediator_rate=0.0,
        expected_params=float(params.mean()),
        margins=summarize_margins(decisive_margins(scores), chosen == truth) if scores.shape[1] > 1 else None,
    )


# ------------------------------------------------------------------ threshold sweep


@dataclass
class ScoreCache:
    """Everything gating depends on, computed once per sample; T only changes the replay."""

    labels: np.ndarray
    truth: np.ndarray
    scores: np.ndarray  # (B, N)
    expert_probs: np.ndarray  # (B, N, K) scattered into global classes
    mediator_probs: np.ndarray  # (B, K)
    budget: ParamBudget


def collect(ensemble: Ensemble, dataset: LabeledDataset) -> ScoreCache:
    arch = ensemble.config
    shared, acts, scores = confidence_scores(ensemble, dataset.images)
    k = ensemble.n_classes
    expert_probs = np.zeros((len(dataset), len(ensemble.experts), k), dtype=np.float64)
    for i, expert in enumerate(ensemble.experts):
        logits = run(expert.net, acts[i], arch.confidence_index)
        expert_probs[:, i, list(expert.local_to_global)] = softmax(logits.astype(np.float64))
    mediator = softmax(run(ensemble.mediator, shared, arch.prefix_len).astype(np.float64))
    return ScoreCache(dataset.labels, ensemble.partition.lookup[dataset.labels], scores,
                      expert_probs, mediator, ensemble.param_budget())


def replay(cache: ScoreCache, cfg: GatingConfig, mode: str = "mmoe") -> MetricsReport:
    if mode == "unmediated":
        cfg = GatingConfig(cfg.threshold, 0.0)
    stopped = stop_mask(cache.scores, cfg.threshold)
    w, w_med = weight_matrix(cache.scores, stopped, cfg.mediator_weight)
    probs = np.zeros(cache.mediator_probs.shape, dtype=np.float64)
    for i in range(cache.scores.shape[1]):
        probs += w[:, i, None] * np.where(stopped[:, i, None], 0.0, cache.expert_probs[:, i])
    probs += w_med[:, None] * cache.mediator_probs
    b = cache.budget
    mediator_run = w_med > 0
    params = b.fixed + (~stopped * np.asarray(b.suffix)).sum(axis=1) + mediator_run * b.mediator
    return _gated_report(mode, cfg.threshold, cache.labels, cache.truth, cache.scores, stopped,
                         probs, mediator_run, params)


@dataclass
class SweepRow:
    threshold: float
    top1: float
    p_stop: tuple
    false_stop_rate: float
    mediator_rate: float
    expected_params: float


def sweep_header(n_experts: int) -> list:
    return ["T", "top1"] + [f"p_stop_{i}" for i in range(n_experts)] + \
        ["false_stop", "mediator_rate", "expected_params"]


def threshold_sweep(ensemble: Ensemble, dataset: LabeledDataset, thresholds: Sequence[float],
                    mediator_weight: Optional[float] = None, mode: str = "mmoe") -> list:
    if any(not t > 0 for t in thresholds):
        raise ValueError("all thresholds must be > 0")
    w = ensemble.gating.mediator_weight if mediator_weight is None else mediator_weight
    cache = collect(ensemble, dataset)
    rows = []
    for t in thresholds:
        rep = replay(cache, GatingConfig(t, w), mode)
        p_med = rep.mediator_rate
        expected = expected_params_formula(cache.budget.fixed, cache.budget.suffix, rep.p_stop,
                                           p_med, cache.budget.mediator)
        rows.append(SweepRow(float(t), rep.top1, rep.p_stop, rep.false_stop_rate, p_med, expected))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    n = len(rows[0].p_stop) if rows else 0
    return format_csv(sweep_header(n), [[r.threshold, r.top1, *r.p_stop, r.false_stop_rate,
                                         r.mediator_rate, r.expected_params] for r in rows])


# ------------------------------------------------------------------ shared-layer sweep


def shared_layers_sweep(config: EnsembleConfig, partition: SuperclassMap, train: LabeledDataset,
                        test: LabeledDataset, k_list: Sequence[int], train_cfg: TrainConfig,
                        gating: GatingConfig) -> list:
    """Retrain the whole ensemble for each shared-prefix depth k; returns ``[(k, top1)]``.

    Every k uses the same seeds, so rows differ only by k.
    """
    rows = []
    for k in k_list:
        ens = build_and_train(config.with_(shared_layers=k), partition, train, train_cfg, gating)
        rows.append((int(k), evaluate(ens, test, gating, "mmoe").top1))
    return rows


def shared_csv(rows) -> str:
    return format_csv(["k", "top1"], rows)
