"""Training procedures for the mediator, experts, confidence heads and incremental growth."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .builder import (EnsembleConfig, attach_confidence_head, build_expert, build_mediator,
                      extend_output_layer, share_prefix)
from .data import LabeledDataset
from .gating import GatingConfig
from .nn import Network, backward, forward, run, sgd_step, softmax_cross_entropy
from .partition import PartitionError, SuperclassMap, relabel_superclass, restrict_to_superclass

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.8
    seed: int = 0
    expert_epochs: int = 8
    confidence_epochs: int = 6
    confidence_finetune_epochs: int = 3
    mediator_finetune_epochs: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if min(self.epochs, self.expert_epochs, self.confidence_epochs,
               self.confidence_finetune_epochs, self.mediator_finetune_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def csv(self) -> str:
        rows = ["epoch,mean_loss,train_accuracy"]
        rows += [f"{e + 1},{l!r},{a!r}" for e, (l, a) in enumerate(zip(self.losses, self.accuracies))]
        return "\n".join(rows) + "\n"


@dataclass
class Expert:
    net: Network
    head: Optional[Network]
    local_to_global: tuple


@dataclass(frozen=True)
class ParamBudget:
    """Parameter counts used by the per-sample accounting.

    ``fixed`` is what every prediction touches: the shared prefix once plus each
    expert's layers up to the confidence layer and its head. ``suffix[i]`` is
    expert i's remaining layers, ``mediator`` the mediator's non-shared layers.
    """

    shared: int
    prefix: tuple
    heads: tuple
    suffix: tuple
    mediator: int

    @property
    def fixed(self) -> int:
        return self.shared + sum(self.prefix) + sum(self.heads)

    @property
    def all_on(self) -> int:
        return self.fixed + sum(self.suffix) + self.mediator

    @property
    def traditional_moe(self) -> int:
        """All experts run in full, no heads, no mediator (shared prefix counted once)."""
        return self.shared + sum(self.prefix) + sum(self.suffix)


@dataclass
class Ensemble:
    config: EnsembleConfig
    partition: SuperclassMap
    mediator: Network
    experts: list = field(default_factory=list)
    gating: GatingConfig = field(default_factory=lambda: GatingConfig(4.0))

    @property
    def n_classes(self) -> int:
        return self.mediator.output_shape[0]

    @property
    def shared_params(self) -> list:
        return self.mediator.params[: self.config.prefix_len]

    def param_budget(self) -> ParamBudget:
        p, j = self.config.prefix_len, self.config.confidence_index
        return ParamBudget(
            shared=self.mediator.n_params(0, p),
            prefix=tuple(e.net.n_params(p, j) for e in self.experts),
            heads=tuple(e.head.n_params() if e.head is not None else 0 for e in self.experts),
            suffix=tuple(e.net.n_params(j) for e in self.experts),
            mediator=self.mediator.n_params(p),
        )


def train_network(net: Network, dataset: LabeledDataset, cfg: TrainConfig, epochs: Optional[int] = None,
                  seed: Optional[int] = None, name: str = "net",
                  on_epoch: Optional[Callable] = None) -> TrainResult:
    """Minibatch momentum SGD on softmax cross-entropy; mutates ``net`` in place.

    The shuffle order comes from ``seed`` only, so reruns are bit-identical.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    net.velocity.clear()
    result = TrainResult()
    lr = cfg.lr
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            trace = forward(net, dataset.images[idx])
            logits = trace.acts[-1]
            loss, grad = softmax_cross_entropy(logits, dataset.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch + 1, loss)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == dataset.labels[idx]).sum())
            sgd_step(net, backward(net, trace, grad), lr, cfg.momentum, cfg.weight_decay)
        result.losses.append(total / len(dataset))
        result.accuracies.append(correct / len(dataset))
        log.info("%s epoch %d: loss %.4f acc %.4f", name, epoch + 1, result.losses[-1], result.accuracies[-1])
        if on_epoch is not None:
            on_epoch(epoch, result)
        lr *= cfg.lr_decay
    return result


def accuracy(net: Network, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float((run(net, dataset.images).argmax(axis=1) == dataset.labels).mean())


def new_ensemble(config: EnsembleConfig, partition: SuperclassMap, gating: Optional[GatingConfig] = None,
                 seed: int = 0, dtype=np.float32) -> Ensemble:
    if partition.n_superclasses != config.n_experts:
        raise PartitionError(f"{partition.n_superclasses} superclasses but n_experts={config.n_experts}")
    mediator = build_mediator(config, partition.n_classes, seed=seed, dtype=dtype)
    return Ensemble(config, partition, mediator, [], gating or GatingConfig(4.0))


def train_mediator(ensemble: Ensemble, dataset: LabeledDataset, cfg: TrainConfig) -> TrainResult:
    if ensemble.experts:
        raise RuntimeError("the mediator must be trained before experts share its prefix")
    if dataset.n_classes != ensemble.n_classes:
        raise PartitionError(f"dataset has {dataset.n_classes} classes, mediator {ensemble.n_classes}")
    result = train_network(ensemble.mediator, dataset, cfg, name="mediator")
    share_prefix(ensemble.config, ensemble.mediator)
    return result


def train_expert(ensemble: Ensemble, i: int, dataset: LabeledDataset, cfg: TrainConfig) -> TrainResult:
    """Build expert ``i`` from the mediator and train it on its superclass only."""
    share_prefix(ensemble.config, ensemble.mediator)
    local, members, _ = restrict_to_superclass(dataset, ensemble.partition, i)
    net = build_expert(ensemble.config, ensemble.mediator, len(members), seed=cfg.seed + 1000 + i)
    result = train_network(net, local, cfg, epochs=cfg.expert_epochs, seed=cfg.seed + 1000 + i,
                           name=f"expert{i}")
    expert = Expert(net, None, members)
    if i < len(ensemble.experts):
        ensemble.experts[i] = expert
    elif i == len(ensemble.experts):
        ensemble.experts.append(expert)
    else:
        raise IndexError(f"expert {i} cannot be trained before expert {len(ensemble.experts)}")
    return result


def train_experts(ensemble: Ensemble, dataset: LabeledDataset, cfg: TrainConfig) -> list:
    return [train_expert(ensemble, i, dataset, cfg) for i in range(ensemble.partition.n_superclasses)]


def _head_inputs(ensemble: Ensemble, dataset: LabeledDataset) -> list:
    p, j = ensemble.config.prefix_len, ensemble.config.confidence_index
    shared = run(ensemble.mediator, dataset.images, 0, p)
    return [run(e.net, shared, p, j) for e in ensemble.experts]


def train_confidence_heads(ensemble: Ensemble, dataset: LabeledDataset, cfg: TrainConfig,
                           epochs: Optional[int] = None, fresh: bool = True) -> list:
    """Fit each expert's confidence head on superclass labels over the full dataset.

    Backbones are frozen: activations at the confidence layer are computed once
    and only the head's single FC layer is trained.
    """
    if len(ensemble.experts) != ensemble.partition.n_superclasses:
        raise RuntimeError("train every expert before the confidence heads")
    labels = relabel_superclass(dataset, ensemble.partition).labels
    n = ensemble.partition.n_superclasses
    j = ensemble.config.confidence_index
    results = []
    for i, (expert, acts) in enumerate(zip(ensemble.experts, _head_inputs(ensemble, dataset))):
        seed = cfg.seed + 2000 + i
        if fresh or expert.head is None:
            expert.head = attach_confidence_head(expert.net, j, n, seed=seed)
        results.append(train_network(expert.head, LabeledDataset(acts, labels), cfg,
                                     epochs=cfg.confidence_epochs if epochs is None else epochs,
                                     seed=seed, name=f"confidence{i}"))
    return results


def add_expert_incremental(ensemble: Ensemble, dataset: LabeledDataset, new_classes: Sequence[int],
                           cfg: TrainConfig) -> dict:
    """Add superclass ``new_classes`` (fine ids following the existing ones).

    ``dataset`` holds old and new classes. Trains one new expert on the new
    subset, grows every confidence head to N+1 outputs and finetunes them for
    ``confidence_finetune_epochs``, then grows the mediator's output layer and
    finetunes it. Existing experts' backbones are not touched.
    """
    new_classes = sorted(int(c) for c in new_classes)
    old = ensemble.partition
    if set(new_classes) & set(old.mapping):
        raise PartitionError(f"classes {sorted(set(new_classes) & set(old.mapping))} already belong to a superclass")
    if new_classes != list(range(old.n_classes, old.n_classes + len(new_classes))):
        raise PartitionError(f"new classes must be {old.n_classes}..{old.n_classes + len(new_classes) - 1}")
    if any(e.head is None for e in ensemble.experts) or len(ensemble.experts) != old.n_superclasses:
        raise RuntimeError("incremental addition needs a fully trained ensemble")

    ensemble.partition = old.extended(new_classes)
    ensemble.config = ensemble.config.with_(n_experts=ensemble.partition.n_superclasses)
    n_new = ensemble.partition.n_superclasses
    i_new = n_new - 1
    results = {"expert": train_expert(ensemble, i_new, dataset, cfg)}

    j = ensemble.config.confidence_index
    for i, expert in enumerate(ensemble.experts):
        if i == i_new:
            expert.head = attach_confidence_head(expert.net, j, n_new, seed=cfg.seed + 2000 + i)
        else:
            expert.head = extend_output_layer(expert.head, 1, seed=cfg.seed + 3000 + i)
    results["confidence"] = train_confidence_heads(ensemble, dataset, cfg,
                                                   epochs=cfg.confidence_finetune_epochs, fresh=False)

    ensemble.mediator = extend_output_layer(ensemble.mediator, len(new_classes), seed=cfg.seed + 4000)
    results["mediator"] = train_network(ensemble.mediator, dataset, cfg, epochs=cfg.mediator_finetune_epochs,
                                        seed=cfg.seed + 4000, name="mediator-increment")
    return results


def build_and_train(config: EnsembleConfig, partition: SuperclassMap, dataset: LabeledDataset,
                    cfg: TrainConfig, gating: Optional[GatingConfig] = None) -> Ensemble:
    """Full pipeline: mediator, then experts from the mediator, then confidence heads."""
    ensemble = new_ensemble(config, partition, gating, seed=cfg.seed)
    train_mediator(ensemble, dataset, cfg)
    train_experts(ensemble, dataset, cfg)
    train_confidence_heads(ensemble, dataset, cfg)
    return ensemble
