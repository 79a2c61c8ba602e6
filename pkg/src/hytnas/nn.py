"""Neural-network building blocks on top of the autodiff tensor.

Convolutions are cross-correlations (no kernel flip) and carry no bias,
since batch normalization follows every convolution in this codebase.
The 3D convolution lowers to an im2col matrix product; its backward pass
is one matmul for the kernel gradient plus a col2im scatter over kernel
offsets for the input gradient.
"""

from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, Tensor, _acc, _node, leaky_relu

logger = logging.getLogger(__name__)


def same_padding(kernel):
    return tuple((k - 1) // 2 for k in kernel)


def conv_out_extent(n, k, s, p):
    out = (n + 2 * p - k) // s + 1
    if out < 1:
        raise ValueError(f"convolution output extent {out} < 1 (in={n}, k={k}, s={s}, p={p})")
    return out


def init_conv_weight(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional ops


def conv3d(x, weight, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Dense 3D cross-correlation.

    x: (B, C, D, H, W); weight: (Cout, Cin, kd, kh, kw) -> (B, Cout, D', H', W').
    """
    xd, wd = x.data, weight.data
    B, C, D, H, W = xd.shape
    Co, Ci, kd, kh, kw = wd.shape
    if C != Ci:
        raise ValueError(f"input has {C} channels, kernel expects {Ci}")
    sd, sh, sw = stride
    pd, ph, pw = padding
    Do = conv_out_extent(D, kd, sd, pd)
    Ho = conv_out_extent(H, kh, sh, ph)
    Wo = conv_out_extent(W, kw, sw, pw)

    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else xd
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    K = C * kd * kh * kw
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * Do * Ho * Wo, K)
    w2d = wd.reshape(Co, K)
    out = (cols @ w2d.T).reshape(B, Do, Ho, Wo, Co).transpose(0, 4, 1, 2, 3)

    def back(node):
        g2d = node.grad.transpose(0, 2, 3, 4, 1).reshape(B * Do * Ho * Wo, Co)
        if weight.requires_grad or weight._prev:
            _acc(weight, (g2d.T @ cols).reshape(wd.shape))
        if x.requires_grad or x._prev:
            gcols = g2d @ w2d
            gc = gcols.reshape(B, Do, Ho, Wo, C, kd, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
            gp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gp[:, :,
                           i : i + sd * (Do - 1) + 1 : sd,
                           j : j + sh * (Ho - 1) + 1 : sh,
                           k : k + sw * (Wo - 1) + 1 : sw] += gc[..., i, j, k]
            if any(padding):
                gp = gp[:, :, pd : pd + D, ph : ph + H, pw : pw + W]
            _acc(x, gp)

    return _node(np.ascontiguousarray(out), (x, weight), back)


def depthwise_conv3d(x, weight, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Per-channel 3D cross-correlation. weight: (C, kd, kh, kw)."""
    xd, wd = x.data, weight.data
    B, C, D, H, W = xd.shape
    Cw, kd, kh, kw = wd.shape
    if C != Cw:
        raise ValueError(f"input has {C} channels, depthwise kernel expects {Cw}")
    sd, sh, sw = stride
    pd, ph, pw = padding
    Do = conv_out_extent(D, kd, sd, pd)
    Ho = conv_out_extent(H, kh, sh, ph)
    Wo = conv_out_extent(W, kw, sw, pw)

    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if any(padding) else xd
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    K = kd * kh * kw
    # one matvec per channel: (C, B*P, K) @ (C, K, 1)
    cols = win.transpose(1, 0, 2, 3, 4, 5, 6, 7).reshape(C, B * Do * Ho * Wo, K)
    out = (cols @ wd.reshape(C, K, 1)).reshape(C, B, Do, Ho, Wo).transpose(1, 0, 2, 3, 4)

    def back(node):
        g = node.grad
        if weight.requires_grad or weight._prev:
            gt = g.transpose(1, 0, 2, 3, 4).reshape(C, B * Do * Ho * Wo, 1)
            _acc(weight, (cols.transpose(0, 2, 1) @ gt).reshape(wd.shape))
        if x.requires_grad or x._prev:
            gp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gp[:, :,
                           i : i + sd * (Do - 1) + 1 : sd,
                           j : j + sh * (Ho - 1) + 1 : sh,
                           k : k + sw * (Wo - 1) + 1 : sw] += g * wd[:, i, j, k].reshape(1, C, 1, 1, 1)
            if any(padding):
                gp = gp[:, :, pd : pd + D, ph : ph + H, pw : pw + W]
            _acc(x, gp)

    return _node(np.ascontiguousarray(out), (x, weight), back)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5, channel_axis=1, update_stats=True):
    """Batch normalization over all axes except ``channel_axis``.

    Train mode normalizes with biased batch statistics and (optionally)
    folds them into the running buffers in place; eval mode uses the
    running buffers only.
    """
    xd = x.data
    channel_axis = channel_axis % xd.ndim
    C = xd.shape[channel_axis]
    axes = tuple(a for a in range(xd.ndim) if a != channel_axis)
    bshape = [1] * xd.ndim
    bshape[channel_axis] = C
    bshape = tuple(bshape)
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(C)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(C)
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gam * xhat + bet
    m = int(np.prod([xd.shape[a] for a in axes]))

    def back(node):
        g = node.grad
        if gamma.requires_grad or gamma._prev:
            _acc(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad or beta._prev:
            _acc(beta, g.sum(axis=axes))
        if x.requires_grad or x._prev:
            if training:
                gsum = g.sum(axis=axes, keepdims=True)
                gdot = (g * xhat).sum(axis=axes, keepdims=True)
                _acc(x, gam * inv_std * (g - gsum / m - xhat * gdot / m))
            else:
                _acc(x, g * gam * inv_std)

    return _node(out, (x, gamma, beta), back)


def hardswish(x):
    from .tensor import hardswish as _hs

    return _hs(x)


# ---------------------------------------------------------------------------
# module system


class Module:
    """Container tracking parameters, submodules and running buffers."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def bind_names(self, prefix=""):
        """Stamp hierarchical names onto parameters; names must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name
        return self

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        for name, p in own_params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        for name, b in own_buffers.items():
            if name not in state:
                raise KeyError(f"missing buffer {name!r} in state")
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise ValueError(f"shape mismatch for buffer {name!r}: {arr.shape} vs {b.shape}")
            b[...] = arr.astype(b.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._list)), module)
        self._list.append(module)
        return self

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1, 1), padding="same", rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = same_padding(kernel) if padding == "same" else tuple(padding)
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * int(np.prod(kernel))
        from .tensor import default_dtype

        data = init_conv_weight(rng, (out_channels, in_channels) + self.kernel, fan_in, default_dtype())
        self.weight = Parameter(data)

    def forward(self, x):
        return conv3d(x, self.weight, self.stride, self.padding)


class DepthwiseConv3d(Module):
    def __init__(self, channels, kernel, stride=(1, 1, 1), padding="same", rng=None):
        super().__init__()
        self.channels = channels
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = same_padding(kernel) if padding == "same" else tuple(padding)
        rng = rng or np.random.default_rng(0)
        fan_in = int(np.prod(kernel))
        from .tensor import default_dtype

        data = init_conv_weight(rng, (channels,) + self.kernel, fan_in, default_dtype())
        self.weight = Parameter(data)

    def forward(self, x):
        return depthwise_conv3d(x, self.weight, self.stride, self.padding)


class SepConv3d(Module):
    """Depthwise convolution followed by a 1x1x1 pointwise projection."""

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1, 1), padding="same", rng=None):
        super().__init__()
        self.depthwise = DepthwiseConv3d(in_channels, kernel, stride, padding, rng=rng)
        self.pointwise = Conv3d(in_channels, out_channels, (1, 1, 1), rng=rng)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class BatchNorm(Module):
    """Normalizes over every axis except ``channel_axis``."""

    def __init__(self, channels, channel_axis=1, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.channel_axis = channel_axis
        self.momentum = momentum
        self.eps = eps
        from .tensor import default_dtype

        dt = default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))
        self.register_buffer("num_batches", np.zeros(1, dtype=dt))

    def forward(self, x):
        if self.training:
            self.num_batches += 1.0
        elif self.num_batches[0] == 0:
            logger.debug("eval-mode batch norm before any training batch; using init stats")
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps, self.channel_axis)


class Linear(Module):
    """Channel projection over the trailing axis, optionally with bias.

    Weights draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the tighter
    scale keeps stacked projections stable under large learning rates.
    """

    def __init__(self, in_features, out_features, bias=False, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        from .tensor import default_dtype

        dt = default_dtype()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound,
                                            size=(in_features, out_features)).astype(dt))
        self.bias = Parameter(np.zeros(out_features, dtype=dt)) if bias else None

    def forward(self, x):
        lead = x.shape[:-1]
        flat = x.reshape((int(np.prod(lead)), self.in_features))
        out = flat @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(lead + (self.out_features,))


class LeakyReLU(Module):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)


class Hardswish(Module):
    def forward(self, x):
        return hardswish(x)


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    """Maps every input to zeros of the same shape."""

    def forward(self, x):
        return Tensor(np.zeros_like(x.data))


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.steps = ModuleList(modules)

    def forward(self, x):
        for m in self.steps:
            x = m(x)
        return x
