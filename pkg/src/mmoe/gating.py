"""Confidence gating, early stopping of experts, and mediated softmax fusion.

An expert ``i`` stops when some other expert's self-score beats its own by at
least ``T``::

    max_{k != i} s[k] - s[i] >= T

Stopped experts contribute an all-zero distribution. The mediator runs only
when more than one expert is still active.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .nn import Network, run, softmax

if TYPE_CHECKING:
    from .training import Ensemble

DEFAULT_MEDIATOR_WEIGHT = 0.6


@dataclass(frozen=True)
class GatingConfig:
    threshold: float
    mediator_weight: float = DEFAULT_MEDIATOR_WEIGHT

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if not 0.0 <= self.mediator_weight <= 1.0:
            raise ValueError(f"mediator_weight must lie in [0, 1], got {self.mediator_weight}")


@dataclass(frozen=True)
class GatingDecision:
    active: frozenset
    stopped: frozenset
    mediator_invoked: bool
    scores: tuple


@dataclass(frozen=True)
class FusionWeights:
    expert_weights: np.ndarray
    mediator_weight: float

    @property
    def total(self) -> float:
        return float(self.expert_weights.sum()) + self.mediator_weight


def self_score(i: int, head: Network, activation) -> float:
    """Component ``i`` of the head's output on a single activation."""
    out = run(head, np.asarray(activation)[None])[0]
    if not 0 <= i < out.shape[0]:
        raise ValueError(f"expert id {i} outside head output of size {out.shape[0]}")
    return float(out[i])


def stop_decision(scores: Sequence[float], i: int, threshold: float) -> bool:
    others = [s for k, s in enumerate(scores) if k != i]
    if not others:
        return False
    return max(others) - scores[i] >= threshold


def gate(scores: Sequence[float], cfg: GatingConfig) -> GatingDecision:
    s = [float(v) for v in scores]
    stopped = frozenset(i for i in range(len(s)) if stop_decision(s, i, cfg.threshold))
    active = frozenset(range(len(s))) - stopped
    return GatingDecision(active, stopped, len(active) > 1, tuple(s))


def scatter_expert_probs(local_probs, local_to_global: Sequence[int], n_classes: int,
                         is_stopped: bool) -> np.ndarray:
    out = np.zeros(n_classes, dtype=np.float64)
    idx = np.asarray(local_to_global, dtype=np.int64)
    if len(set(idx.tolist())) != len(idx) or np.any((idx < 0) | (idx >= n_classes)):
        raise ValueError("local_to_global must be injective into [0, n_classes)")
    if len(idx) != len(local_probs):
        raise ValueError(f"{len(local_probs)} local probabilities for {len(idx)} mapped classes")
    if not is_stopped:
        out[idx] = local_probs
    return out


def normalize_scores(scores) -> np.ndarray:
    """Softmax over the given scores; the fusion's normalisation to [0, 1]."""
    return softmax(np.asarray(scores, dtype=np.float64))


def fusion_weights(decision: GatingDecision, mediator_weight: float) -> FusionWeights:
    n = len(decision.scores)
    weights = np.zeros(n, dtype=np.float64)
    w_med = mediator_weight if decision.mediator_invoked else 0.0
    active = sorted(decision.active)
    if active:
        weights[active] = normalize_scores([decision.scores[i] for i in active]) * (1.0 - w_med)
    return FusionWeights(weights, float(w_med))


def fuse(scattered, mediator_probs, weights: FusionWeights) -> np.ndarray:
    scattered = np.asarray(scattered, dtype=np.float64)
    if weights.mediator_weight > 0 and mediator_probs is None:
        raise ValueError("mediator distribution required when the mediator weight is non-zero")
    out = np.zeros(scattered.shape[1], dtype=np.float64)
    for w, probs in zip(weights.expert_weights, scattered):
        out += w * probs
    if weights.mediator_weight > 0:
        out += weights.mediator_weight * np.asarray(mediator_probs, dtype=np.float64)
    return out


# ------------------------------------------------------------------ batched forms


def stop_mask(scores, threshold: float) -> np.ndarray:
    """Boolean (B, N) matrix of stop decisions for a (B, N) score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[1] == 1:
        return np.zeros(s.shape, dtype=bool)
    order = np.argsort(-s, axis=1, kind="stable")
    rows = np.arange(len(s))
    top, second = s[rows, order[:, 0]], s[rows, order[:, 1]]
    best_other = np.where(np.arange(s.shape[1])[None, :] == order[:, :1], second[:, None], top[:, None])
    return best_other - s >= threshold


def weight_matrix(scores, stopped, mediator_weight: float) -> tuple:
    """Per-sample expert weights (B, N) and mediator weights (B,)."""
    s = np.asarray(scores, dtype=np.float64)
    active = ~stopped
    invoked = active.sum(axis=1) > 1
    w_med = np.where(invoked, mediator_weight, 0.0)
    masked = np.where(active, s, -np.inf)
    e = np.exp(masked - masked.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True) * (1.0 - w_med)[:, None]
    return w, w_med


# ------------------------------------------------------------------ prediction


@dataclass
class PredictionRecord:
    sample_id: int
    predicted: int
    probs: np.ndarray
    decision: GatingDecision
    weights: FusionWeights
    params_touched: int
    mediator_run: bool
    true_class: Optional[int] = None

    def to_line(self) -> str:
        """``id<TAB>scores<TAB>stopped<TAB>mediator<TAB>predicted<TAB>true``."""
        scores = ",".join(repr(float(s)) for s in self.decision.scores)
        stopped = ",".join(str(i) for i in sorted(self.decision.stopped)) or "-"
        true = "-" if self.true_class is None else str(self.true_class)
        return f"{self.sample_id}\t{scores}\t{stopped}\t{int(self.mediator_run)}\t{self.predicted}\t{true}"


RECORD_HEADER = "# sample_id\tscores\tstopped\tmediator\tpredicted\ttrue"


def parse_record_line(line: str) -> dict:
    sid, scores, stopped, med, pred, true = line.rstrip("\n").split("\t")
    return {
        "sample_id": int(sid),
        "scores": tuple(float(v) for v in scores.split(",")),
        "stopped": frozenset() if stopped == "-" else frozenset(int(v) for v in stopped.split(",")),
        "mediator": med == "1",
        "predicted": int(pred),
        "true": None if true == "-" else int(true),
    }


@dataclass
class BatchPrediction:
    scores: np.ndarray  # (B, N)
    stopped: np.ndarray  # (B, N) bool
    expert_weights: np.ndarray  # (B, N)
    mediator_weights: np.ndarray  # (B,)
    mediator_run: np.ndarray  # (B,) bool
    probs: np.ndarray  # (B, K) float64
    params_touched: np.ndarray  # (B,) int

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def records(self, labels=None, offset: int = 0) -> list:
        out = []
        for b in range(len(self.scores)):
            s = tuple(float(v) for v in self.scores[b])
            stopped = frozenset(np.flatnonzero(self.stopped[b]).tolist())
            active = frozenset(range(len(s))) - stopped
            out.append(PredictionRecord(
                sample_id=offset + b,
                predicted=int(self.predicted[b]),
                probs=self.probs[b],
                decision=GatingDecision(active, stopped, len(active) > 1, s),
                weights=FusionWeights(self.expert_weights[b], float(self.mediator_weights[b])),
                params_touched=int(self.params_touched[b]),
                mediator_run=bool(self.mediator_run[b]),
                true_class=None if labels is None else int(labels[b]),
            ))
        return out


def confidence_scores(ensemble: "Ensemble", x) -> tuple:
    """Shared-prefix output, per-expert activations at the confidence layer, and (B, N) scores."""
    cfg = ensemble.config
    p, j = cfg.prefix_len, cfg.confidence_index
    shared = run(ensemble.mediator, x, 0, p)
    acts, scores = [], []
    for i, expert in enumerate(ensemble.experts):
        a = run(expert.net, shared, p, j)
        acts.append(a)
        scores.append(run(expert.head, a)[:, i])
    return shared, acts, np.stack(scores, axis=1).astype(np.float64)


def predict_batch(ensemble: "Ensemble", x, cfg: Optional[GatingConfig] = None) -> BatchPrediction:
    """Gated ensemble prediction for a batch.

    The shared prefix runs once, every expert runs up to the confidence layer,
    only active experts run their remaining layers, and the mediator runs only
    for samples with more than one active expert (and a non-zero mediator weight).
    """
    if not ensemble.experts or len(ensemble.experts) != ensemble.partition.n_superclasses:
        raise ValueError("ensemble has missing experts")
    if any(e.head is None for e in ensemble.experts):
        raise ValueError("ensemble has experts without confidence heads")
    cfg = cfg or ensemble.gating
    arch = ensemble.config
    p, j = arch.prefix_len, arch.confidence_index
    budget = ensemble.param_budget()
    x = np.asarray(x, dtype=ensemble.mediator.dtype)
    n_classes = ensemble.n_classes

    shared, acts, scores = confidence_scores(ensemble, x)
    stopped = stop_mask(scores, cfg.threshold)
    w, w_med = weight_matrix(scores, stopped, cfg.mediator_weight)
    med_rows = np.flatnonzero(w_med > 0)

    probs = np.zeros((len(x), n_classes), dtype=np.float64)
    touched = np.full(len(x), budget.fixed, dtype=np.int64)
    for i, expert in enumerate(ensemble.experts):
        rows = np.flatnonzero(~stopped[:, i])
        if len(rows) == 0:
            continue
        logits = run(expert.net, acts[i][rows], j)
        local = softmax(logits.astype(np.float64))
        probs[np.ix_(rows, list(expert.local_to_global))] += w[rows, i, None] * local
        touched[rows] += budget.suffix[i]
    mediator_run = np.zeros(len(x), dtype=bool)
    if len(med_rows):
        med = softmax(run(ensemble.mediator, shared[med_rows], p).astype(np.float64))
        probs[med_rows] += w_med[med_rows, None] * med
        mediator_run[med_rows] = True
        touched[med_rows] += budget.mediator
    return BatchPrediction(scores, stopped, w, w_med, mediator_run, probs, touched)


def predict(ensemble: "Ensemble", x, cfg: Optional[GatingConfig] = None) -> PredictionRecord:
    """Single-sample prediction; ``x`` has the per-sample input shape."""
    return predict_batch(ensemble, np.asarray(x)[None], cfg).records()[0]
