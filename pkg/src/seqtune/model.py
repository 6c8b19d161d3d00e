"""Dense-block classification network split into freezable layer groups.

A network is a stem convolution followed by dense blocks, 1x1 transition
layers with 2x2 average pooling between blocks, global average pooling and a
fully connected head. Each weighted layer (conv or FC) together with the batch
norm adjacent to it forms one :class:`LayerGroup`; groups are indexed from the
input (0) to the head (last index) and are the unit the freeze schedule works on.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class DenseNetConfig:
    input_channels: int = 1
    input_size: tuple[int, int] = (16, 16)
    initial_conv: tuple[int, int, int] = (3, 1, 8)  # kernel, stride, out_channels
    num_blocks: int = 2
    layers_per_block: tuple[int, ...] = (2, 2)
    growth_rate: int = 4
    transition_compression: float = 0.5
    num_classes: int = 3
    # width multiplier of an optional 1x1 bottleneck conv in each dense layer
    # (DenseNet-BC uses 4); 0 disables it
    bottleneck_width: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "initial_conv", tuple(self.initial_conv))
        object.__setattr__(self, "layers_per_block", tuple(self.layers_per_block))

    def validate(self) -> None:
        if len(self.layers_per_block) != self.num_blocks:
            raise ConfigurationError(
                f"layers_per_block has {len(self.layers_per_block)} entries "
                f"but num_blocks={self.num_blocks}"
            )
        if self.growth_rate < 1:
            raise ConfigurationError(f"growth_rate must be >= 1, got {self.growth_rate}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 < self.transition_compression <= 1:
            raise ConfigurationError(
                f"transition_compression must lie in (0, 1], got {self.transition_compression}"
            )
        if self.input_channels < 1 or min(self.input_size) < 1:
            raise ConfigurationError("input_channels and input_size must be positive")
        kernel, stride, out = self.initial_conv
        if kernel < 1 or stride < 1 or out < 1:
            raise ConfigurationError(f"invalid initial_conv {self.initial_conv}")
        if any(count < 0 for count in self.layers_per_block) or self.bottleneck_width < 0:
            raise ConfigurationError("layer counts must be non-negative")

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_size": list(self.input_size),
            "initial_conv": list(self.initial_conv),
            "num_blocks": self.num_blocks,
            "layers_per_block": list(self.layers_per_block),
            "growth_rate": self.growth_rate,
            "transition_compression": self.transition_compression,
            "num_classes": self.num_classes,
            "bottleneck_width": self.bottleneck_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetConfig":
        return cls(**d)


def densenet121_config(num_classes: int = 1000, input_size=(224, 224)) -> DenseNetConfig:
    """Layer layout of DenseNet-121 (stem without max pooling)."""
    return DenseNetConfig(
        input_channels=3,
        input_size=input_size,
        initial_conv=(7, 2, 64),
        num_blocks=4,
        layers_per_block=(6, 12, 24, 16),
        growth_rate=32,
        transition_compression=0.5,
        num_classes=num_classes,
        bottleneck_width=4,
    )


# --------------------------------------------------------------------- layers


class BatchNorm:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        # a frozen norm layer behaves as at inference: running statistics,
        # buffers untouched
        use_batch = training and self.gamma.requires_grad
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, use_batch)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class Conv:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, rng):
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.weight = Tensor(w, requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight


class Linear:
    def __init__(self, in_features: int, out_features: int, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class DenseLayer:
    norm: BatchNorm
    conv: Conv
    bottleneck_norm: BatchNorm | None = None
    bottleneck: Conv | None = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.bottleneck is not None:
            x = self.bottleneck(T.relu(self.bottleneck_norm(x, training)))
        return self.conv(T.relu(self.norm(x, training)))


@dataclass
class Transition:
    norm: BatchNorm
    conv: Conv

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.avg_pool2d(self.conv(T.relu(self.norm(x, training))), 2, 2)


@dataclass
class LayerGroup:
    index: int
    name: str
    parameters: list[Tensor]
    parameter_names: list[str]
    is_head: bool = False
    buffers: list[str] = field(default_factory=list)


# -------------------------------------------------------------------- network


class Network:
    """Use :func:`build_densenet_lite` to construct one."""

    def __init__(self, config: DenseNetConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        kernel, stride, stem_out = config.initial_conv
        h, w = config.input_size
        pad = kernel // 2
        if kernel > h + 2 * pad or kernel > w + 2 * pad:
            raise ConfigurationError(f"stem kernel {kernel} does not fit input {h}x{w}")
        h, w = (h + 2 * pad - kernel) // stride + 1, (w + 2 * pad - kernel) // stride + 1

        self.stem = Conv(config.input_channels, stem_out, kernel, stride, pad, rng)
        self.stem_norm = BatchNorm(stem_out)
        self.blocks: list[list[DenseLayer]] = []
        self.transitions: list[Transition] = []
        self.block_input_channels: list[int] = []
        channels = stem_out
        for b, n_layers in enumerate(config.layers_per_block):
            self.block_input_channels.append(channels)
            layers = []
            for j in range(n_layers):
                in_ch = channels + j * config.growth_rate
                if config.bottleneck_width:
                    mid = config.bottleneck_width * config.growth_rate
                    layers.append(
                        DenseLayer(
                            BatchNorm(mid),
                            Conv(mid, config.growth_rate, 3, 1, 1, rng),
                            BatchNorm(in_ch),
                            Conv(in_ch, mid, 1, 1, 0, rng),
                        )
                    )
                else:
                    layers.append(DenseLayer(BatchNorm(in_ch), Conv(in_ch, config.growth_rate, 3, 1, 1, rng)))
            self.blocks.append(layers)
            channels += n_layers * config.growth_rate
            if b < config.num_blocks - 1:
                out_ch = int(np.floor(config.transition_compression * channels))
                if out_ch < 1:
                    raise ConfigurationError(f"transition {b + 1} compresses {channels} channels to 0")
                if h < 2 or w < 2:
                    raise ConfigurationError(
                        f"spatial size {h}x{w} too small for pooling after block {b + 1}"
                    )
                self.transitions.append(Transition(BatchNorm(channels), Conv(channels, out_ch, 1, 1, 0, rng)))
                channels = out_ch
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        self.final_norm = BatchNorm(channels) if config.num_blocks > 0 else None
        self.feature_channels = channels
        self.head = Linear(channels, config.num_classes, rng)
        self.groups = self._build_groups()

    def _build_groups(self) -> list[LayerGroup]:
        entries: list[tuple[str, list[tuple[str, object]], list[tuple[str, np.ndarray]]]] = []

        def unit(name, *parts):
            params, bufs = [], []
            for prefix, mod in parts:
                params.extend(mod.named_parameters(prefix))
                if isinstance(mod, BatchNorm):
                    bufs.extend(mod.named_buffers(prefix))
            entries.append((name, params, bufs))

        unit("stem", ("stem.conv", self.stem), ("stem.norm", self.stem_norm))
        for b, layers in enumerate(self.blocks):
            for j, layer in enumerate(layers):
                base = f"block{b + 1}.layer{j + 1}"
                if layer.bottleneck is not None:
                    unit(f"{base}.bottleneck", (f"{base}.bottleneck_norm", layer.bottleneck_norm),
                         (f"{base}.bottleneck", layer.bottleneck))
                unit(base, (f"{base}.norm", layer.norm), (f"{base}.conv", layer.conv))
            if b < len(self.transitions):
                base = f"transition{b + 1}"
                unit(base, (f"{base}.norm", self.transitions[b].norm), (f"{base}.conv", self.transitions[b].conv))
        if self.final_norm is not None:
            # final norm sits right after the last conv, so it joins that group
            _, params, bufs = entries[-1]
            params.extend(self.final_norm.named_parameters("final_norm"))
            bufs.extend(self.final_norm.named_buffers("final_norm"))
        unit("head", ("head", self.head))
        return [
            LayerGroup(
                index=i,
                name=name,
                parameters=[t for _, t in params],
                parameter_names=[name for name, _ in params],
                is_head=(i == len(entries) - 1),
                buffers=[name for name, _ in bufs],
            )
            for i, (name, params, bufs) in enumerate(entries)
        ]

    # ------------------------------------------------------------------ access

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def head_group(self) -> LayerGroup:
        return self.groups[-1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for g in self.groups:
            yield from zip(g.parameter_names, g.parameters)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def _norm_layers(self) -> Iterator[tuple[str, BatchNorm]]:
        yield "stem.norm", self.stem_norm
        for b, layers in enumerate(self.blocks):
            for j, layer in enumerate(layers):
                base = f"block{b + 1}.layer{j + 1}"
                if layer.bottleneck_norm is not None:
                    yield f"{base}.bottleneck_norm", layer.bottleneck_norm
                yield f"{base}.norm", layer.norm
            if b < len(self.transitions):
                yield f"transition{b + 1}.norm", self.transitions[b].norm
        if self.final_norm is not None:
            yield "final_norm", self.final_norm

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, norm in self._norm_layers():
            yield from norm.named_buffers(prefix)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and running statistics, in group order."""
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        buffers = dict(self.named_buffers())
        for g in self.groups:
            for name in g.buffers:
                state[name] = buffers[name].copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DimensionError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != value.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != model shape {target.shape}")
            target[...] = value

    # ----------------------------------------------------------------- forward

    def forward(self, batch, training: bool = False) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        c = self.config
        expected = (c.input_channels, *c.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"forward: batch shape {x.shape} does not match [N, {expected}]")
        x = T.relu(self.stem_norm(self.stem(x), training))
        for b, layers in enumerate(self.blocks):
            for layer in layers:
                x = T.concat_channels(x, layer(x, training))
            if b < len(self.transitions):
                x = self.transitions[b](x, training)
        if self.final_norm is not None:
            x = T.relu(self.final_norm(x, training))
        return self.head(T.global_avg_pool(x))

    __call__ = forward


def build_densenet_lite(config: DenseNetConfig, seed: int) -> Network:
    """Seeded He-initialized network; batch norm starts at gamma=1, beta=0."""
    return Network(config, np.random.default_rng(seed))


def forward(network: Network, batch, training: bool = False) -> Tensor:
    return network.forward(batch, training)


def count_weighted_layers(network: Network) -> int:
    """Number of conv and fully connected layers; batch norm is not counted."""
    count = 2  # stem conv and head
    per_layer = 2 if network.config.bottleneck_width else 1
    count += per_layer * sum(len(layers) for layers in network.blocks)
    return count + len(network.transitions)


def replace_head(network: Network, new_num_classes: int, seed: int) -> Network:
    """Copy of ``network`` with a freshly initialized head for ``new_num_classes``."""
    if new_num_classes < 2:
        raise ConfigurationError(f"new_num_classes must be >= 2, got {new_num_classes}")
    new = copy.deepcopy(network)
    new.config = replace(network.config, num_classes=new_num_classes)
    new.head = Linear(new.feature_channels, new_num_classes, np.random.default_rng(seed))
    head = new.groups[-1]
    head.parameters = [new.head.weight, new.head.bias]
    return new
