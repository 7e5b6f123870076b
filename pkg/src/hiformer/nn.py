"""Layer library: modules, parameter registration, initialization, SGD.

A Module discovers children and parameters by walking its instance
attributes, so plain assignment (`self.proj = Linear(...)`) is the whole
registration story. Attribute names become dotted parameter names
("stage1.blocks.0.attn.qkv.weight") used by checkpoints and the
parameter report.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import BadGroupCount, ShapeMismatch
from .tensor import Parameter, Tensor


class Module:
    """Base class; children/parameters found by attribute walk."""

    def __init__(self):
        self.training = True

    # -- traversal -----------------------------------------------------------

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (prefix + name, value)
        for cname, child in self.named_children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        """Non-learnable state (batch-norm running statistics)."""
        buffers = getattr(self, "_buffers", None)
        if buffers:
            for name in buffers:
                yield (prefix + name, getattr(self, name))
        for cname, child in self.named_children():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self):
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    # -- mode / grad ---------------------------------------------------------

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self.items = list(items)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def append(self, m):
        self.items.append(m)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


# -- basic layers ------------------------------------------------------------


class Linear(Module):
    """y = x @ weight + bias with weight stored (in_features, out_features)."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter((in_features, out_features))
        self.bias = Parameter((out_features,), init="zeros") if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size,
                 stride=1, padding=0, bias=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            (out_channels, in_channels, kernel_size, kernel_size),
            init="he_normal",
        )
        self.bias = Parameter((out_channels,), init="zeros") if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding)


class MaxPool2d(Module):
    def __init__(self, kernel_size=3, stride=2, padding=1):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.max_pool2d(x, self.kernel_size, self.stride, self.padding)


class LayerNorm(Module):
    """Normalization over the last axis with learned affine."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.weight = Parameter((dim,), init="ones")
        self.bias = Parameter((dim,), init="zeros")

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(f"LayerNorm({self.dim}) got last dim {x.shape[-1]}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xhat = xc / T.sqrt(var + self.eps)
        return xhat * self.weight + self.bias


class GroupNorm(Module):
    """Per-sample normalization over channel groups of an NCHW tensor."""

    def __init__(self, num_groups, num_channels, eps=1e-5):
        super().__init__()
        if num_channels % num_groups != 0:
            raise BadGroupCount(
                f"{num_channels} channels not divisible into {num_groups} groups"
            )
        self.num_groups = num_groups
        self.num_channels = num_channels
        self.eps = eps
        self.weight = Parameter((num_channels,), init="ones")
        self.bias = Parameter((num_channels,), init="zeros")

    def forward(self, x):
        N, C, H, W = x.shape
        if C != self.num_channels:
            raise ShapeMismatch(f"GroupNorm({self.num_channels}) got {C} channels")
        g = self.num_groups
        xg = x.reshape(N, g, (C // g) * H * W)
        mu = xg.mean(axis=-1, keepdims=True)
        xc = xg - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xhat = (xc / T.sqrt(var + self.eps)).reshape(N, C, H, W)
        w = self.weight.reshape(1, C, 1, 1)
        b = self.bias.reshape(1, C, 1, 1)
        return xhat * w + b


def largest_group_count(channels, cap=32):
    """Largest divisor of `channels` that is <= cap."""
    for g in range(min(cap, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class BatchNorm2d(Module):
    """Batch normalization with running statistics.

    Training mode normalizes by batch moments and updates the running
    buffers; eval mode (and `frozen=True`) uses the buffers. Buffers are
    serialized with checkpoints but never counted as parameters.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, frozen=False):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.frozen = frozen
        self.weight = Parameter((num_features,), init="ones")
        self.bias = Parameter((num_features,), init="zeros")
        self.running_mean = np.zeros(num_features, dtype=np.float64)
        self.running_var = np.ones(num_features, dtype=np.float64)
        self._buffers = ("running_mean", "running_var")

    def forward(self, x):
        N, C, H, W = x.shape
        if C != self.num_features:
            raise ShapeMismatch(f"BatchNorm2d({self.num_features}) got {C} channels")
        use_batch = self.training and not self.frozen
        if use_batch:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
            n = N * H * W
            unbias = n / max(n - 1, 1)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.data.reshape(-1).astype(np.float64))
            self.running_var = ((1 - m) * self.running_var
                                + m * unbias * var.data.reshape(-1).astype(np.float64))
            xhat = xc / T.sqrt(var + self.eps)
        else:
            mu = self.running_mean.astype(x.dtype).reshape(1, C, 1, 1)
            var = self.running_var.astype(x.dtype).reshape(1, C, 1, 1)
            xhat = (x - Tensor(mu)) / T.sqrt(Tensor(var) + self.eps)
        w = self.weight.reshape(1, C, 1, 1)
        b = self.bias.reshape(1, C, 1, 1)
        return xhat * w + b


class Mlp(Module):
    """Two-layer token MLP with GELU, hidden width = ratio * dim."""

    def __init__(self, dim, hidden_dim, out_dim=None):
        super().__init__()
        self.fc1 = Linear(dim, hidden_dim)
        self.fc2 = Linear(hidden_dim, out_dim if out_dim is not None else dim)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


# -- initialization ----------------------------------------------------------


def _trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) resampled until every entry lies within bound*std."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out


def init_parameters(model, seed):
    """Fill every parameter from its init tag, in registration order.

    Deterministic given the seed; dtype follows each parameter so a
    float64 rebuild of the same architecture initializes identically up
    to rounding.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        p.name = name
        kind = p.init_kind
        if kind == "trunc_normal":
            p.data[...] = _trunc_normal(rng, p.data.shape).astype(p.data.dtype)
        elif kind == "he_normal":
            # Fan-in scaled for conv weights (keeps activation variance
            # of ReLU stacks near 1, which the gradient checker relies on).
            fan_in = int(np.prod(p.data.shape[1:]))
            std = float(np.sqrt(2.0 / fan_in))
            p.data[...] = rng.normal(0.0, std, size=p.data.shape).astype(p.data.dtype)
        elif kind == "normal":
            p.data[...] = rng.normal(0.0, 0.02, size=p.data.shape).astype(p.data.dtype)
        elif kind == "zeros":
            p.data[...] = 0
        elif kind == "ones":
            p.data[...] = 1
        else:
            raise ValueError(f"unknown init kind '{kind}' on {name}")
    return model


# -- optimizer ---------------------------------------------------------------


class SGD:
    """SGD with classical momentum and coupled weight decay.

    v <- momentum * v + (grad + weight_decay * p)
    p <- p - lr * v
    """

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        """Momentum buffers keyed by parameter name (checkpoint payload)."""
        return {f"opt.{p.name}": v for p, v in zip(self.params, self.velocity)}

    def load_state_arrays(self, arrays):
        for p, v in zip(self.params, self.velocity):
            key = f"opt.{p.name}"
            if key in arrays:
                v[...] = arrays[key].reshape(v.shape)
