"""Parameter containers and the basic trainable layers.

A :class:`Module` tracks parameters (Tensors), buffers (plain arrays, e.g.
batch-norm running statistics), and child modules by attribute name, giving
every entry a stable hierarchical name for checkpoints.  Mode ("train" /
"eval") is passed through ``forward`` calls instead of being stored, so a
frozen network can serve concurrent inference.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .nn_ops import ConvSpec, batch_norm, conv2d, transposed_conv2d
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal ---------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Convert parameters in place (buffers stay float32). Returns self."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    # -- state -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise ShapeError(f"state dict missing entries: {missing[:5]}")
        extra = sorted(set(state) - set(own))
        if extra:
            raise ShapeError(f"state dict has unknown entries: {extra[:5]}")
        for name, p in self.named_parameters():
            value = state[name]
            if tuple(value.shape) != p.shape:
                raise ShapeError(f"{name}: stored shape {tuple(value.shape)} != expected {p.shape}")
            p.data = np.array(value, dtype=p.dtype)
        for name, b in self.named_buffers():
            value = state[name]
            if tuple(value.shape) != b.shape:
                raise ShapeError(f"{name}: stored shape {tuple(value.shape)} != expected {b.shape}")
            b[...] = value


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, idx: int) -> Module:
        return self._items[idx]

    def __len__(self) -> int:
        return len(self._items)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, dilation=1, groups=1, bias=True):
        super().__init__()
        self.spec = ConvSpec(kernel=kernel, stride=stride, padding=padding, dilation=dilation, groups=groups)
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Tensor(_kaiming(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, dilation=1, groups=1, bias=True):
        super().__init__()
        self.spec = ConvSpec(kernel=kernel, stride=stride, padding=padding, dilation=dilation, groups=groups)
        fan_in = (out_ch // groups) * kernel * kernel
        self.weight = Tensor(_kaiming(rng, (in_ch, out_ch // groups, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return transposed_conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, mode, momentum=self.momentum, eps=self.eps
        )
