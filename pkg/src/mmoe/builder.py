"""Building mediator, experts and confidence heads from one architecture description."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .nn import (Conv2D, Flatten, FullyConnected, MaxPool, Network, ReLU, ShapeError,
                 init_params, parse_layers, resolve_spec)


class ConfigError(ValueError):
    pass


EXPERT_INITS = ("mediator", "fresh")
DEFAULT_LAYERS = "conv:8:5, relu, pool:2, conv:16:5, relu, pool:2, flatten, fc:64, relu, fc:10"


@dataclass(frozen=True)
class EnsembleConfig:
    """Architecture of a mediated ensemble.

    ``base_spec`` is the full layer list; every hidden FullyConnected width is
    replaced by ``mediator_head_width`` / ``expert_head_width`` and the last
    layer's width by the class count. ``shared_layers`` counts the lowest conv
    layers shared with (and frozen to) the mediator. ``confidence_layer`` is a
    trace index: the head sees the output of the first ``confidence_layer``
    layers; ``None`` means right after the last conv block.
    """

    base_spec: tuple
    input_shape: tuple = (1, 28, 28)
    n_experts: int = 2
    shared_layers: int = 0
    confidence_layer: Optional[int] = None
    expert_head_width: int = 64
    mediator_head_width: int = 64
    expert_init: str = "mediator"

    def __post_init__(self):
        if self.expert_init not in EXPERT_INITS:
            raise ConfigError(f"expert_init must be one of {EXPERT_INITS}")
        object.__setattr__(self, "base_spec", tuple(self.base_spec))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not self.base_spec or not isinstance(self.base_spec[-1], FullyConnected):
            raise ConfigError("base_spec must end with a FullyConnected output layer")
        if not 0 <= self.shared_layers <= self.n_conv:
            raise ConfigError(f"shared_layers={self.shared_layers} outside [0, {self.n_conv}] conv layers")
        j = self.confidence_index
        if not 0 < j < len(self.base_spec):
            raise ConfigError(f"confidence_layer={j} must lie in [1, {len(self.base_spec) - 1}]")
        if j < self.prefix_len:
            raise ConfigError(f"confidence_layer={j} lies inside the shared prefix ({self.prefix_len} layers)")
        resolve_spec(self.base_spec, self.input_shape)

    @classmethod
    def from_text(cls, layers: str = DEFAULT_LAYERS, **kw) -> "EnsembleConfig":
        return cls(tuple(parse_layers(layers)), **kw)

    @property
    def n_conv(self) -> int:
        return sum(isinstance(layer, Conv2D) for layer in self.base_spec)

    @property
    def prefix_len(self) -> int:
        """Layers in the shared prefix: through the k-th conv plus its trailing ReLU/pool."""
        return conv_block_end(self.base_spec, self.shared_layers)

    @property
    def confidence_index(self) -> int:
        if self.confidence_layer is not None:
            return self.confidence_layer
        return conv_block_end(self.base_spec, self.n_conv)

    def with_(self, **kw) -> "EnsembleConfig":
        return replace(self, **kw)


def conv_block_end(spec, k: int) -> int:
    if k == 0:
        return 0
    seen, end = 0, 0
    for i, layer in enumerate(spec):
        if isinstance(layer, Conv2D):
            seen += 1
            if seen > k:
                break
            end = i + 1
        elif isinstance(layer, (ReLU, MaxPool)) and seen == k:
            end = i + 1
        elif seen == k:
            break
    return end


def specialize(spec, hidden_width: int, n_out: int) -> list:
    """Set hidden FC widths to ``hidden_width`` and the output layer to ``n_out``."""
    out = []
    for i, layer in enumerate(spec):
        if isinstance(layer, FullyConnected):
            width = n_out if i == len(spec) - 1 else hidden_width
            layer = FullyConnected(width)
        elif isinstance(layer, Conv2D):
            layer = replace(layer, in_channels=None)
        out.append(layer)
    return out


def build_mediator(cfg: EnsembleConfig, n_classes: int, seed: int = 0, dtype=np.float32) -> Network:
    if n_classes < 2:
        raise ConfigError("the mediator needs at least 2 classes")
    spec = specialize(cfg.base_spec, cfg.mediator_head_width, n_classes)
    return Network.build(spec, cfg.input_shape, seed=seed, dtype=dtype)


def share_prefix(cfg: EnsembleConfig, mediator: Network) -> None:
    """Mark the mediator's lowest ``k`` conv blocks frozen: they become shared storage."""
    for i in range(cfg.prefix_len):
        mediator.frozen[i] = True


def build_expert(cfg: EnsembleConfig, mediator: Network, superclass_size: int, seed: int = 0) -> Network:
    """Expert built on the mediator.

    The shared prefix reuses the mediator's parameter dicts by reference and is
    frozen. With ``expert_init="mediator"`` later layers copy the mediator's
    weights where shapes match and are freshly initialised otherwise (always the
    case for the output layer unless the superclass holds every class); with
    ``"fresh"`` they are all freshly initialised.
    """
    if superclass_size < 1:
        raise ConfigError("superclass_size must be >= 1")
    if cfg.shared_layers > cfg.n_conv:
        raise ConfigError(f"cannot share {cfg.shared_layers} of {cfg.n_conv} conv layers")
    spec, _ = resolve_spec(specialize(cfg.base_spec, cfg.expert_head_width, superclass_size),
                           cfg.input_shape)
    params, frozen = [], []
    for i, layer in enumerate(spec):
        src = mediator.params[i]
        if i < cfg.prefix_len:
            params.append(src)
            frozen.append(True)
            continue
        fresh = init_params(layer, np.random.default_rng([seed, i]), mediator.dtype)
        copy_ok = fresh is not None and src is not None and all(
            src[k].shape == fresh[k].shape for k in fresh)
        if cfg.expert_init == "mediator" and copy_ok:
            fresh = {k: v.copy() for k, v in src.items()}
        params.append(fresh)
        frozen.append(False)
    return Network(spec, cfg.input_shape, params, frozen, mediator.dtype)


def attach_confidence_head(expert: Network, j: int, n_superclasses: int, seed: int = 0) -> Network:
    """One FC layer from the flattened activation at trace index ``j`` to N outputs."""
    if not 0 <= j < len(expert):
        raise ShapeError(f"confidence layer index {j} out of range [0, {len(expert)})")
    if n_superclasses < 1:
        raise ConfigError("n_superclasses must be >= 1")
    return Network.build([Flatten(), FullyConnected(n_superclasses)], expert.shapes[j],
                         seed=seed, dtype=expert.dtype)


def extend_output_layer(net: Network, extra_units: int, seed: int = 0) -> Network:
    """Append ``extra_units`` outputs to the final FC layer.

    Old rows are copied bit-for-bit; new rows use the fresh-layer init. All
    other layers keep their parameter dicts (by reference) and frozen flags.
    """
    if extra_units < 1:
        raise ConfigError("extra_units must be >= 1")
    last = net.spec[-1]
    if not isinstance(last, FullyConnected):
        raise ConfigError("final layer is not FullyConnected")
    grown = FullyConnected(last.out_features + extra_units, last.in_features)
    fresh = init_params(FullyConnected(extra_units, last.in_features),
                        np.random.default_rng([seed, len(net) - 1, last.out_features]), net.dtype)
    old = net.params[-1]
    params = list(net.params[:-1]) + [{
        "W": np.concatenate([old["W"], fresh["W"]]),
        "b": np.concatenate([old["b"], fresh["b"]]),
    }]
    return Network(list(net.spec[:-1]) + [grown], net.input_shape, params, list(net.frozen), net.dtype)
