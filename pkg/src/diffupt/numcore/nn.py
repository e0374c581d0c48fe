"""Tiny layer library on top of the tensor engine."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .optim import Parameter
from .rng import RngStream
from .serial import load_state, save_state
from .tensor import Tensor


class Module:
    """Base class tracking parameters, buffers, and submodules by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)
        object.__setattr__(self, name, self._buffers[name])

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = [(prefix + name, p) for name, p in self._params.items()]
        for name, mod in self._modules.items():
            out.extend(mod.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + name, b) for name, b in self._buffers.items()]
        for name, mod in self._modules.items():
            out.extend(mod.named_buffers(prefix + name + "."))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.tensor.data) for n, p in self.named_parameters()] + self.named_buffers()

    def save(self, path) -> None:
        save_state(path, self.state_arrays())

    def load(self, path) -> None:
        state = load_state(path)
        for name, p in self.named_parameters():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch loading {name}: file {arr.shape} vs model {p.shape}")
            p.tensor.data[...] = arr
        for name, buf in self.named_buffers():
            if name in state:
                buf[...] = state[name]

    def copy_weights_from(self, other: "Module") -> None:
        mine = dict(self.named_parameters())
        for name, p in other.named_parameters():
            mine[name].tensor.data[...] = p.tensor.data
        mine_buf = dict(self.named_buffers())
        for name, b in other.named_buffers():
            mine_buf[name][...] = b

    def weight_bytes(self) -> bytes:
        """Canonical byte image of all parameters and buffers (for handoff checks)."""
        return b"".join(arr.astype("<f8").tobytes() for _, arr in self.state_arrays())


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        name = str(len(self._items))
        self._modules[name] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """Dense layer x @ w + b with He-scaled init."""

    def __init__(self, in_dim: int, out_dim: int, rng: RngStream, bias: bool = True):
        super().__init__()
        std = math.sqrt(2.0 / in_dim)
        self.w = Parameter(rng.normal((in_dim, out_dim), sd=std))
        self.b = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w.tensor)
        if self.b is not None:
            out = out + self.b.tensor
        return out


class Conv2d(Module):
    """3x3-ish convolution layer with stride/pad baked in at construction."""

    def __init__(self, cin: int, cout: int, k: int, rng: RngStream, stride: int = 1, pad: int = 0, bias: bool = True):
        super().__init__()
        std = math.sqrt(2.0 / (cin * k * k))
        self.w = Parameter(rng.normal((cout, cin, k, k), sd=std))
        self.b = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w.tensor, None if self.b is None else self.b.tensor, stride=self.stride, pad=self.pad)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: RngStream):
        super().__init__()
        self.table = Parameter(rng.normal((n, dim), sd=1.0 / math.sqrt(dim)))

    def __call__(self, idx: np.ndarray) -> Tensor:
        return T.embedding(self.table.tensor, idx)
