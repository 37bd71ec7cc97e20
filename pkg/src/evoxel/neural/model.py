"""ECA-enhanced bottleneck encoder and voxel-logit decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .layers import (
    Bottleneck,
    BatchNorm3d,
    Conv3d,
    ConvTranspose3d,
    Dropout,
    GlobalAvgPool,
    Linear,
    Module,
    ReLU,
    Reshape,
    Sequential,
)


@dataclass
class NetworkConfig:
    in_channels: int = 1
    stem_channels: int = 8
    stem_stride: tuple[int, int, int] = (1, 2, 2)
    widths: tuple[int, ...] = (16, 32)
    blocks: tuple[int, ...] = (2, 2)
    bottleneck_ratio: int = 4
    stage_stride: tuple[int, int, int] = (2, 2, 2)
    resolution: int = 32
    decoder_channels: tuple[int, int, int, int] = (32, 32, 16, 8)
    dropout: float = 0.25
    bn_momentum: float = 0.1
    # initial occupancy probability encoded in the head bias; None starts at 0.5
    head_prior: Optional[float] = 0.01

    def __post_init__(self):
        self.stem_stride = tuple(self.stem_stride)
        self.stage_stride = tuple(self.stage_stride)
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if min(self.blocks) < 1 or min(self.widths) < 1 or self.in_channels < 1:
            raise ValueError("block counts, widths and channels must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.resolution % 8 or self.resolution < 8:
            raise ValueError("resolution must be a positive multiple of 8")
        if self.head_prior is not None and not 0.0 < self.head_prior < 1.0:
            raise ValueError("head_prior must be in (0, 1) or None")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoder_channels needs a seed width and three upsampling widths")

    @classmethod
    def desk(cls, **kw) -> "NetworkConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "NetworkConfig":
        """ResNet-152 stage layout (3/8/36/3 bottlenecks)."""
        base = dict(
            stem_channels=64,
            widths=(256, 512, 1024, 2048),
            blocks=(3, 8, 36, 3),
            bottleneck_ratio=4,
            decoder_channels=(256, 128, 64, 32),
        )
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class Network(Module):
    """Encoder: stem conv, bottleneck+ECA stages, dropout.
    Decoder: global pool, linear seed volume at D/8, three transposed-conv
    upsamplings to D, 1x1x1 logit head."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float64, materialize: bool = True):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed) if materialize else None
        kw = dict(rng=rng, dtype=dtype)
        c = config

        layers = [
            Conv3d(c.in_channels, c.stem_channels, 3, c.stem_stride, 1, **kw),
            BatchNorm3d(c.stem_channels, c.bn_momentum, dtype=dtype),
            ReLU(),
        ]
        in_ch = c.stem_channels
        for width, count in zip(c.widths, c.blocks):
            mid = max(1, width // c.bottleneck_ratio)
            for b in range(count):
                stride = c.stage_stride if b == 0 else 1
                layers.append(Bottleneck(in_ch, width, mid, stride, bn_momentum=c.bn_momentum, **kw))
                in_ch = width
        self.dropout = Dropout(c.dropout)
        layers.append(self.dropout)
        self.encoder = self.add("encoder", Sequential(*layers))
        # the stem's input gradient is never used
        layers[0].need_input_grad = False

        seed_ch, *ups = c.decoder_channels
        s = c.resolution // 8
        dec = [GlobalAvgPool(), Linear(in_ch, seed_ch * s**3, **kw), ReLU(), Reshape((seed_ch, s, s, s))]
        prev = seed_ch
        for ch in ups:
            dec += [ConvTranspose3d(prev, ch, 4, 2, 1, **kw), BatchNorm3d(ch, c.bn_momentum, dtype=dtype), ReLU()]
            prev = ch
        self.head = Conv3d(prev, 1, 1, bias=True, **kw)
        if c.head_prior is not None and materialize:
            # most voxels are empty; starting near the prior keeps early focal
            # gradients on the occupied ones instead of on shifting the bias
            self.head.params["bias"][...] = -math.log((1 - c.head_prior) / c.head_prior)
        dec.append(self.head)
        self.decoder = self.add("decoder", Sequential(*dec))
        self.feature_channels = in_ch

    def encoder_forward(self, x: np.ndarray) -> np.ndarray:
        """(N, C, T, H, W) or a single (C, T, H, W) stack -> feature volume."""
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected input with {self.config.in_channels} channels, got shape {x.shape}")
        return self.encoder.forward(np.asarray(x, dtype=self.dtype))

    def decoder_forward(self, features: np.ndarray) -> np.ndarray:
        out = self.decoder.forward(features)
        return out[:, 0]

    def forward(self, x):
        return self.decoder_forward(self.encoder_forward(x))

    def backward(self, grad_logits: np.ndarray):
        g = self.decoder.backward(np.asarray(grad_logits, dtype=self.dtype)[:, None])
        return self.encoder.backward(g)

    def parameter_count(self) -> int:
        return int(sum(np.prod(mod.params[k].shape) for _, mod, k in self.named_parameters()))

    def state(self) -> dict[str, np.ndarray]:
        out = {name: mod.params[k] for name, mod, k in self.named_parameters()}
        out.update({name: mod.buffers[k] for name, mod, k in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, mod, k in list(self.named_parameters()):
            mod.params[k] = np.array(state[name], dtype=self.dtype).reshape(mod.params[k].shape)
        for name, mod, k in list(self.named_buffers()):
            mod.buffers[k] = np.array(state[name], dtype=self.dtype).reshape(mod.buffers[k].shape)


def count_parameters(config: NetworkConfig) -> int:
    """Parameter count without allocating weights."""
    return Network(config, materialize=False).parameter_count()
