"""Layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = False

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, "Module", str]]:
        for prefix, mod in self.named_modules():
            for key in mod.params:
                yield (f"{prefix}.{key}" if prefix else key), mod, key

    def named_buffers(self) -> Iterator[tuple[str, "Module", str]]:
        for prefix, mod in self.named_modules():
            for key in mod.buffers:
                yield (f"{prefix}.{key}" if prefix else key), mod, key

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, mod in self.named_modules():
            for key, p in mod.params.items():
                mod.grads[key] = np.zeros_like(p)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad


def he_normal(rng: Optional[np.random.Generator], shape, fan_in: int, dtype) -> np.ndarray:
    if rng is None:
        # shape-only placeholder for parameter counting
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, bias=False, *, rng, dtype=np.float64):
        super().__init__()
        k = F._triple(kernel)
        self.stride, self.padding = F._triple(stride), F._triple(padding)
        self.params["weight"] = he_normal(rng, (out_ch, in_ch) + k, in_ch * int(np.prod(k)), dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.need_input_grad = True
        self._x = None

    def forward(self, x):
        self._x = x
        y, self._cols = F.conv3d_forward(x, self.params["weight"], self.stride, self.padding,
                                         self.params.get("bias"), return_cols=True)
        return y

    def backward(self, grad):
        gx, gw, gb = F.conv3d_backward(self._x, self.params["weight"], grad, self.stride, self.padding,
                                       self.need_input_grad, cols=self._cols)
        self.grads["weight"] += gw
        if "bias" in self.params:
            self.grads["bias"] += gb
        return gx


class ConvTranspose3d(Module):
    def __init__(self, in_ch, out_ch, kernel=4, stride=2, padding=1, bias=False, *, rng, dtype=np.float64):
        super().__init__()
        k = F._triple(kernel)
        self.stride, self.padding = F._triple(stride), F._triple(padding)
        # fan-in of each output voxel is in_ch * prod(kernel / stride)
        fan_in = max(1, in_ch * int(np.prod(k)) // int(np.prod(self.stride)))
        self.params["weight"] = he_normal(rng, (in_ch, out_ch) + k, fan_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self._x = None

    def forward(self, x):
        self._x = x
        return F.conv_transpose3d_forward(x, self.params["weight"], self.stride, self.padding, self.params.get("bias"))

    def backward(self, grad):
        gx, gw, gb = F.conv_transpose3d_backward(self._x, self.params["weight"], grad, self.stride, self.padding)
        self.grads["weight"] += gw
        if "bias" in self.params:
            self.grads["bias"] += gb
        return gx


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x):
        if self.training:
            mean = x.mean(axis=(0, 2, 3, 4))
            var = x.var(axis=(0, 2, 3, 4))
            m = x.size / x.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - self.momentum
            rm += self.momentum * mean.astype(rm.dtype)
            rv *= 1 - self.momentum
            rv += self.momentum * unbiased.astype(rv.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        y, xhat, inv = F.batchnorm_forward(x, self.params["gamma"], self.params["beta"], mean, var, self.eps)
        self._cache = (xhat, inv, self.training)
        return y

    def backward(self, grad):
        xhat, inv, batch_stats = self._cache
        gx, gg, gb = F.batchnorm_backward(grad, xhat, inv, self.params["gamma"], batch_stats)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        return gx


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class ECA(Module):
    """Efficient channel attention with a zero-initialised circular 1D conv."""

    def __init__(self, channels, kernel_size: Optional[int] = None, *, dtype=np.float64):
        super().__init__()
        k = kernel_size or F.adaptive_kernel_size(channels)
        if k < 1 or k % 2 == 0:
            raise ValueError("ECA kernel size must be odd and >= 1")
        self.channels = channels
        self.params["weight"] = np.zeros(k, dtype=dtype)
        self._cache = None

    @property
    def kernel_size(self) -> int:
        return len(self.params["weight"])

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"ECA expects {self.channels} channels, got {x.shape[1]}")
        y, self._cache = F.eca_forward(x, self.params["weight"])
        return y

    def attention(self) -> np.ndarray:
        return self._cache[2]

    def backward(self, grad):
        gx, gw = F.eca_backward(grad, self.params["weight"], self._cache)
        self.grads["weight"] += gw
        return gx


class Dropout(Module):
    """Inverted dropout; ``rng`` must be set by the caller before a training forward."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng: Optional[np.random.Generator] = None
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        if self.rng is None:
            raise RuntimeError("Dropout.rng is not set")
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype)
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class GlobalAvgPool(Module):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, grad):
        N, C, D, H, W = self._shape
        return np.broadcast_to(grad[:, :, None, None, None] / (D * H * W), self._shape).copy()


class Linear(Module):
    def __init__(self, in_features, out_features, *, rng, dtype=np.float64):
        super().__init__()
        self.params["weight"] = he_normal(rng, (in_features, out_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] += self._x.T @ grad
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T


class Reshape(Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._in)


class Bottleneck(Module):
    """1x1x1 reduce -> 3x3x3 (strided) -> 1x1x1 expand, residual add, ReLU, then ECA."""

    def __init__(self, in_ch, out_ch, mid_ch, stride=1, *, rng, dtype=np.float64, bn_momentum=0.1):
        super().__init__()
        kw = dict(rng=rng, dtype=dtype)
        self.conv1 = self.add("conv1", Conv3d(in_ch, mid_ch, 1, **kw))
        self.bn1 = self.add("bn1", BatchNorm3d(mid_ch, bn_momentum, dtype=dtype))
        self.relu1 = ReLU()
        self.conv2 = self.add("conv2", Conv3d(mid_ch, mid_ch, 3, stride, 1, **kw))
        self.bn2 = self.add("bn2", BatchNorm3d(mid_ch, bn_momentum, dtype=dtype))
        self.relu2 = ReLU()
        self.conv3 = self.add("conv3", Conv3d(mid_ch, out_ch, 1, **kw))
        self.bn3 = self.add("bn3", BatchNorm3d(out_ch, bn_momentum, dtype=dtype))
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = self.add(
                "downsample",
                Sequential(Conv3d(in_ch, out_ch, 1, stride, **kw), BatchNorm3d(out_ch, bn_momentum, dtype=dtype)),
            )
        self.relu_out = ReLU()
        self.eca = self.add("eca", ECA(out_ch, dtype=dtype))

    def forward(self, x):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        h = self.relu2.forward(self.bn2.forward(self.conv2.forward(h)))
        h = self.bn3.forward(self.conv3.forward(h))
        skip = self.downsample.forward(x) if self.downsample is not None else x
        return self.eca.forward(self.relu_out.forward(h + skip))

    def backward(self, grad):
        g = self.relu_out.backward(self.eca.backward(grad))
        g_skip = self.downsample.backward(g) if self.downsample is not None else g
        h = self.conv3.backward(self.bn3.backward(g))
        h = self.conv2.backward(self.bn2.backward(self.relu2.backward(h)))
        h = self.conv1.backward(self.bn1.backward(self.relu1.backward(h)))
        return h + g_skip
