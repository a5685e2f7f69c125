"""Layer containers, parameter registration, and the SGD optimizer.

Modules register child modules and requires_grad tensors automatically on
attribute assignment, in assignment order, so parameter traversal (and
therefore initialization, checkpoint layout, and updates) is deterministic
for a fixed architecture.
"""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .errors import DataError, DimensionError
from .ops import BNState, batch_norm, conv2d, prelu, relu, uniform_fan_init
from .tensor import Tensor


class Module:
    """Base class holding parameters and submodules in registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    # ---- traversal ----

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffer_slots(self, prefix: str = ""):
        """Yield (name, get, set) for persistent non-parameter state."""
        for name, child in self._children.items():
            yield from child.named_buffer_slots(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # ---- mode ----

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    # ---- state ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, get, _ in self.named_buffer_slots():
            out[name] = get()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = dict(self.named_parameters())
        setters = {name: st for name, _, st in self.named_buffer_slots()}
        unknown = set(arrays) - set(expected) - set(setters)
        if unknown:
            raise DataError(f"checkpoint has unknown entries: {sorted(unknown)}")
        missing = (set(expected) | set(setters)) - set(arrays)
        if missing:
            raise DataError(f"checkpoint is missing entries: {sorted(missing)}")
        for name, p in expected.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise DataError(f"checkpoint entry {name} has shape {tuple(arr.shape)}, expected {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
        for name, setter in setters.items():
            setter(arrays[name])


class ModuleList(Module):
    """Sequence of submodules registered under their indices."""

    def __init__(self, items: Iterable[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in items:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = Tensor(uniform_fan_init(rng, (out_features, in_features), in_features),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(uniform_fan_init(rng, (out_features,), in_features),
                               requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        from .ops import fc
        return fc(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(
            uniform_fan_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
            requires_grad=True)
        if bias:
            self.bias = Tensor(uniform_fan_init(rng, (out_channels,), fan_in), requires_grad=True)
        else:
            self.bias = None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch normalization over axis 1 of 2-D or 4-D input."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.state = BNState(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training=self.training)

    def named_buffer_slots(self, prefix: str = ""):
        st = self.state

        def set_mean(a):
            st.running_mean = np.ascontiguousarray(a, dtype=st.running_mean.dtype)

        def set_var(a):
            st.running_var = np.ascontiguousarray(a, dtype=st.running_var.dtype)

        def set_flag(a):
            st.populated = bool(np.asarray(a).reshape(-1)[0] > 0.5)

        yield prefix + "running_mean", (lambda: st.running_mean), set_mean
        yield prefix + "running_var", (lambda: st.running_var), set_var
        yield (prefix + "populated",
               (lambda: np.array([1.0 if st.populated else 0.0], dtype=np.float32)),
               set_flag)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.slope = Tensor(np.full(channels, init, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


class ConvBNReLU(Module):
    """3x3 (or 1x1) convolution, batch norm, ReLU; the workhorse block."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, padding: int = 0):
        super().__init__()
        # bias folds into the batch-norm shift, so the conv runs without one
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng,
                           padding=padding, bias=False)
        self.bn = BatchNorm(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if not self.params:
            raise DimensionError("SGD received no parameters")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
