"""Parameter containers and layer building blocks on top of the tensor engine."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A tracked leaf tensor registered by Modules."""

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32), track_grad=True)


class Module:
    """Minimal parameter registry with nested state_dict support."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        """Non-trainable state carried in the state_dict (e.g. BN statistics)."""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _set_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p.data
        for name, buf in self._buffers.items():
            out[prefix + name] = buf
        for cname, child in self._children.items():
            out.update(child.state_dict(prefix + cname + "."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self._params.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key}")
            if state[key].shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {key}: {state[key].shape} vs {p.data.shape}")
            p.data = state[key].astype(np.float32, copy=True)
        for name in list(self._buffers):
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing buffer {key}")
            self._set_buffer(name, state[key].copy())
        for cname, child in self._children.items():
            child.load_state_dict(state, prefix + cname + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods: Sequence[Module] = ()):
        super().__init__()
        self._order = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._order)), m)
        self._order.append(m)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._order[i]


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Zero-mean gaussian, variance 2 / fan_in."""
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.w = Parameter(xavier_uniform(rng, (d_in, d_out), d_in, d_out))
        self.b = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y if self.b is None else T.add(y, self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True):
        super().__init__()
        fan_in = c_in * k * k
        self.w = Parameter(kaiming_normal(rng, (c_out, c_in, k, k), fan_in))
        self.b = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None
        self.stride, self.pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """Kernel-size == stride transposed convolution (exact upsampler)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 2):
        super().__init__()
        fan_in = c_in * k * k
        self.w = Parameter(kaiming_normal(rng, (c_in, c_out, k, k), fan_in))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.w, stride=self.stride)


class BatchNorm2d(Module):
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with current batch statistics and updates running
    estimates with momentum 0.1; eval mode uses the running estimates.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.eps, self.momentum = eps, momentum

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise T.DimensionError("BatchNorm2d expects NCHW input")
        c = x.shape[1]
        if self.training:
            mean = T.mean_(x, axis=(0, 2, 3), keepdims=True)
            centered = T.sub(x, mean)
            var = T.mean_(T.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            with T.no_grad():
                m = self.momentum
                self._set_buffer(
                    "running_mean",
                    ((1 - m) * self.running_mean + m * mean.data.reshape(c)
                     ).astype(np.float32))
                self._set_buffer(
                    "running_var",
                    ((1 - m) * self.running_var + m * var.data.reshape(c)
                     ).astype(np.float32))
            inv = T.div(1.0, T.sqrt(T.add(var, self.eps)))
            xhat = T.mul(centered, inv)
        else:
            mean = self.running_mean.reshape(1, c, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = T.mul(T.sub(x, mean), inv.reshape(1, c, 1, 1).astype(np.float32))
        g = T.reshape(self.gamma, (1, c, 1, 1))
        b = T.reshape(self.beta, (1, c, 1, 1))
        return T.add(T.mul(xhat, g), b)
