"""Architecture shorthand: parse/render strings like "C(64)-C(128)-FC-Sm"
and build runnable models from them.

Grammar (case-insensitive for FC, whitespace ignored):

    spec  := block ("-" block)*
    block := "C(" int ")" | "FC" | "Sm"

Exactly one "Sm" is required and it must come last. Hyperparameters that
the shorthand does not encode (convolutions per block, kernel length,
pooling, expert count, head implementation) live on ModelSpec with
overridable defaults.
"""

import re
from dataclasses import dataclass, replace

import numpy as np

from . import condconv as cc
from . import layers as ly
from .errors import ArchitectureError, ConfigError

# Seed-stream tags so model init and the training loop never share draws.
_LAYER_STREAM = 0xC0


@dataclass(frozen=True)
class ConvBlock:
    filters: int


@dataclass(frozen=True)
class FullyConnected:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    pass


@dataclass
class ModelSpec:
    """Parsed architecture plus the hyperparameters needed to build it."""

    blocks: tuple
    convs_per_block: int = 2
    kernel_length: int = 5
    pool: tuple | None = (2, 2)  # (size, stride) after each conv block, or None
    n_experts: int = 1
    condconv_mask: tuple | None = None  # per-conv-layer on/off; None = all on
    head: str = "dense"  # "dense" | "pointwise-condconv"
    routing_activation: str = "sigmoid"
    dropout_rate: float = 0.5
    pin_routing: bool = False

    def conv_filter_counts(self):
        return [b.filters for b in self.blocks if isinstance(b, ConvBlock)]

    def n_conv_layers(self):
        """Conv layers the mask must cover: block convs plus a condconv head."""
        count = len(self.conv_filter_counts()) * self.convs_per_block
        if self.head == "pointwise-condconv":
            count += 1
        return count

    def with_overrides(self, **kw):
        return replace(self, **kw)


_TOKEN = re.compile(r"C\((\d+)\)|FC|SM", re.IGNORECASE)


def parse_shorthand(text, **overrides):
    """Parse a shorthand string into a ModelSpec.

    Keyword overrides set the non-shorthand hyperparameters (kernel_length,
    n_experts, ...).
    """
    compact = re.sub(r"\s+", "", text)
    if not compact:
        raise ConfigError("empty architecture string")
    blocks = []
    position = 0
    for piece in compact.split("-"):
        if not piece:
            raise ConfigError(f"empty block at position {position}")
        match = _TOKEN.fullmatch(piece)
        if match is None:
            raise ConfigError(f"unknown block {piece!r} at position {position}")
        if match.group(1) is not None:
            filters = int(match.group(1))
            if filters <= 0:
                raise ConfigError(f"filter count must be positive at position {position}")
            blocks.append(ConvBlock(filters))
        elif piece.upper() == "FC":
            blocks.append(FullyConnected())
        else:
            blocks.append(SoftmaxHead())
        position += len(piece) + 1

    heads = [i for i, b in enumerate(blocks) if isinstance(b, SoftmaxHead)]
    if len(heads) != 1:
        raise ConfigError(f"expected exactly one Sm block, found {len(heads)}")
    if heads[0] != len(blocks) - 1:
        raise ConfigError("Sm must be the last block")
    if sum(isinstance(b, FullyConnected) for b in blocks) > 1:
        raise ConfigError("at most one FC block is supported")
    return ModelSpec(blocks=tuple(blocks), **overrides)


def render_shorthand(spec):
    """Canonical string form; inverse of parse_shorthand on canonical specs."""
    parts = []
    for block in spec.blocks:
        if isinstance(block, ConvBlock):
            parts.append(f"C({block.filters})")
        elif isinstance(block, FullyConnected):
            parts.append("FC")
        else:
            parts.append("Sm")
    return "-".join(parts)


def _pool_for_block(spec, block_index):
    pool = spec.pool
    if pool is None:
        return None
    if isinstance(pool, (list, tuple)) and pool and isinstance(pool[0], (list, tuple, type(None))):
        pool = pool[block_index] if block_index < len(pool) else None
    return tuple(pool) if pool is not None else None


def build_model(spec, input_shape, n_classes, seed=0):
    """Materialize a ModelSpec into a Model for (T, C) inputs.

    Every conv block expands to convs_per_block x [conv -> BN -> ReLU]
    (optionally CondConv per the mask), followed by that block's pool if
    configured. The classifier is a dense layer on time-averaged features
    or a 1x1 CondConv head, with the single dropout layer immediately
    before it and softmax last.
    """
    t, channels = input_shape
    if t < 1 or channels < 1:
        raise ArchitectureError(f"input shape must be positive, got {input_shape}")
    if spec.head not in ("dense", "pointwise-condconv"):
        raise ConfigError(f"unknown head {spec.head!r}")

    mask = spec.condconv_mask
    if mask is None:
        mask = (True,) * spec.n_conv_layers()
    elif len(mask) != spec.n_conv_layers():
        raise ConfigError(
            f"condconv_mask has {len(mask)} entries, model has "
            f"{spec.n_conv_layers()} convolution layers"
        )

    conv_blocks = spec.conv_filter_counts()
    fc_positions = [i for i, b in enumerate(spec.blocks) if isinstance(b, FullyConnected)]
    if fc_positions and fc_positions[0] != len(spec.blocks) - 2:
        raise ArchitectureError("FC must sit immediately before Sm")

    model_layers = []
    layer_seed = 0

    def stream():
        nonlocal layer_seed
        rng = np.random.default_rng([seed, _LAYER_STREAM, layer_seed])
        layer_seed += 1
        return rng

    conv_index = 0
    for b, filters in enumerate(conv_blocks):
        if t < spec.kernel_length:
            raise ArchitectureError(
                f"block {b}: temporal length {t} fell below kernel length "
                f"{spec.kernel_length}"
            )
        for j in range(spec.convs_per_block):
            name = f"b{b}.conv{j}"
            if mask[conv_index]:
                conv = cc.CondConv(
                    channels, filters, spec.kernel_length, spec.n_experts, stream(),
                    routing_activation=spec.routing_activation,
                    pin_routing=spec.pin_routing, name=name,
                )
            else:
                conv = ly.TemporalConv(channels, filters, spec.kernel_length, stream(), name=name)
            conv_index += 1
            model_layers.append(conv)
            model_layers.append(ly.BatchNorm(filters, name=f"b{b}.bn{j}"))
            model_layers.append(ly.ReLU(name=f"b{b}.relu{j}"))
            channels = filters
        pool = _pool_for_block(spec, b)
        if pool is not None:
            size, stride = pool
            if size > t:
                raise ArchitectureError(
                    f"block {b}: pool size {size} exceeds temporal length {t}"
                )
            t = (t - size) // stride + 1
            model_layers.append(ly.MaxPool(size, stride, name=f"b{b}.pool"))
        if t < 1:
            raise ArchitectureError(f"block {b}: temporal axis collapsed to {t}")

    if spec.head == "pointwise-condconv":
        if not fc_positions:
            raise ArchitectureError("pointwise-condconv head requires an FC block")
        model_layers.append(ly.Dropout(spec.dropout_rate, name="drop"))
        model_layers.append(cc.PointwiseCondConvHead(
            channels, n_classes, spec.n_experts, stream(),
            routing_activation=spec.routing_activation,
            pin_routing=spec.pin_routing, name="head",
        ))
    elif fc_positions:
        model_layers.append(ly.GlobalAvgPool(name="gap"))
        model_layers.append(ly.Dropout(spec.dropout_rate, name="drop"))
        model_layers.append(ly.Dense(channels, n_classes, stream(), name="head"))
    else:
        # Head-only degenerate spec: softmax over pooled channels.
        if channels != n_classes:
            raise ArchitectureError(
                f"spec has no FC block and {channels} channels != {n_classes} classes"
            )
        model_layers.append(ly.GlobalAvgPool(name="gap"))
        model_layers.append(ly.Dropout(spec.dropout_rate, name="drop"))
    model_layers.append(ly.Softmax(name="sm"))

    meta = {
        "shorthand": render_shorthand(spec),
        "input_shape": (int(input_shape[0]), int(input_shape[1])),
        "n_classes": int(n_classes),
        "seed": int(seed),
        "spec": spec_to_dict(spec),
    }
    return ly.Model(model_layers, meta=meta)


def spec_to_dict(spec):
    if spec.pool is None:
        pool = None
    elif _is_per_block(spec.pool):
        pool = [list(p) if p is not None else None for p in spec.pool]
    else:
        pool = list(spec.pool)
    return {
        "shorthand": render_shorthand(spec),
        "convs_per_block": spec.convs_per_block,
        "kernel_length": spec.kernel_length,
        "pool": pool,
        "n_experts": spec.n_experts,
        "condconv_mask": None if spec.condconv_mask is None else list(spec.condconv_mask),
        "head": spec.head,
        "routing_activation": spec.routing_activation,
        "dropout_rate": spec.dropout_rate,
        "pin_routing": spec.pin_routing,
    }


def _is_per_block(pool):
    return isinstance(pool, (list, tuple)) and pool and isinstance(
        pool[0], (list, tuple, type(None))
    )


def spec_from_dict(d):
    keys = ("convs_per_block", "kernel_length", "n_experts", "head",
            "routing_activation", "dropout_rate", "pin_routing")
    overrides = {k: d[k] for k in keys if k in d}
    if "pool" in d:
        pool = d["pool"]
        if pool is not None:
            pool = tuple(tuple(p) if p is not None else None for p in pool) \
                if _is_per_block(pool) else tuple(pool)
        overrides["pool"] = pool
    if d.get("condconv_mask") is not None:
        overrides["condconv_mask"] = tuple(bool(v) for v in d["condconv_mask"])
    return parse_shorthand(d["shorthand"], **overrides)
