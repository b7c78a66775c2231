"""Neural-net layers, the AdamW optimizer, and learning-rate schedules."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import Tensor


class Module:
    """Base class; children and parameters are discovered from attributes."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            if name.startswith("_"):  # private refs (e.g. borrowed tensors) are not owned
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def train(self, mode=True):
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        """Flat name -> ndarray copy of parameters plus buffers."""
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        buffers = self._buffer_slots()
        for key, value in state.items():
            if key in params:
                if params[key].shape != value.shape:
                    raise ShapeError(f"parameter {key}: shape {value.shape} != {params[key].shape}")
                params[key].data = np.array(value, dtype=np.float64)
            elif key in buffers:
                owner, attr = buffers[key]
                setattr(owner, attr, np.array(value, dtype=np.float64))
            else:
                raise ConfigError(f"unknown state entry {key!r}")

    def named_buffers(self, prefix=""):
        out = {}
        for key, (owner, attr) in self._buffer_slots(prefix).items():
            out[key] = np.array(getattr(owner, attr), dtype=np.float64).copy()
        return out

    def _buffer_slots(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                out.update(value._buffer_slots(prefix=key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item._buffer_slots(prefix=f"{key}.{i}."))
        for name in getattr(self, "_buffers", ()):
            out[f"{prefix}{name}"] = (self, name)
        return out


def normal_init(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_init(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, std=None):
        super().__init__()
        if std is None:
            std = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = normal_init(rng, (out_features, in_features), std)
        self.bias = zeros_init((out_features,)) if bias else None
        self._stats_hook = None

    def forward(self, x):
        flat = x if x.ndim == 2 else T.reshape(x, (-1, self.in_features))
        if self._stats_hook is not None:
            self._stats_hook(flat.data)
        out = T.matmul(flat, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = out + self.bias
        if x.ndim != 2:
            out = T.reshape(out, x.shape[:-1] + (self.out_features,))
        return out

    __call__ = forward


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True, std=None):
        super().__init__()
        k = kernel_size
        fan_in = in_channels * k * k
        if std is None:
            std = 1.0 / np.sqrt(fan_in)
        self.stride = stride
        self.padding = padding
        self.weight = normal_init(rng, (out_channels, in_channels, k, k), std)
        self.bias = zeros_init((out_channels,)) if bias else None
        self._stats_hook = None

    def forward(self, x):
        return T.conv2d(
            x,
            self.weight,
            bias=self.bias,
            stride=self.stride,
            padding=self.padding,
            stats_hook=self._stats_hook,
        )

    __call__ = forward


class BatchNorm(Module):
    """Batch normalization over 2-d [B,F] or 4-d [B,C,H,W] inputs.

    Running statistics use momentum 0.1; eps 1e-5. Training mode requires
    a batch extent of at least 2.
    """

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gain = Tensor(np.ones(num_features), requires_grad=True)
        self.bias = zeros_init((num_features,))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._buffers = ("running_mean", "running_var")

    def forward(self, x):
        if x.ndim == 4:
            axes = (0, 2, 3)
            view = (1, self.num_features, 1, 1)
        elif x.ndim == 2:
            axes = (0,)
            view = (1, self.num_features)
        else:
            raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
        if self.training:
            if x.shape[0] < 2:
                raise DataError("batch_norm training mode needs batch size >= 2")
            mu = T.tmean(x, axis=axes, keepdims=True)
            var = T.tmean((x - mu) ** 2.0, axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = (x - mu) * ((var + self.eps) ** -0.5)
        else:
            mu = Tensor(self.running_mean.reshape(view))
            std = Tensor(np.sqrt(self.running_var + self.eps).reshape(view))
            xhat = (x - mu) * (std ** -1.0)
        return xhat * T.reshape(self.gain, view) + T.reshape(self.bias, view)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = zeros_init((dim,))

    def forward(self, x):
        mu = T.tmean(x, axis=-1, keepdims=True)
        var = T.tmean((x - mu) ** 2.0, axis=-1, keepdims=True)
        xhat = (x - mu) * ((var + self.eps) ** -0.5)
        return xhat * self.gain + self.bias

    __call__ = forward


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over [B, L, D] (or [L, D]) inputs."""

    def __init__(self, d_model, heads, rng, causal=False, std=0.02):
        super().__init__()
        if d_model % heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.causal = causal
        self.wq = Linear(d_model, d_model, rng, bias=False, std=std)
        self.wk = Linear(d_model, d_model, rng, bias=False, std=std)
        self.wv = Linear(d_model, d_model, rng, bias=False, std=std)
        self.wo = Linear(d_model, d_model, rng, bias=False, std=std)

    def forward(self, x):
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, l, d = x.shape
        h = self.heads
        dh = d // h

        def split(t):
            return T.transpose(T.reshape(t, (b, l, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if self.causal:
            mask = np.triu(np.full((l, l), -1e30), k=1)
            scores = scores + Tensor(mask)
        attn = T.softmax(scores)
        ctx = T.matmul(attn, v)  # [B,H,L,dh]
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
        out = self.wo(merged)
        if squeeze:
            out = T.reshape(out, (l, d))
        return out

    __call__ = forward


def multi_head_attention(x, heads, params):
    """Functional form over an existing MultiHeadSelfAttention module."""
    if not isinstance(params, MultiHeadSelfAttention):
        raise ContractError("params must be a MultiHeadSelfAttention module")
    if params.heads != heads:
        raise ConfigError(f"module has {params.heads} heads, requested {heads}")
    return params(x)


class Embedding(Module):
    def __init__(self, vocab, dim, rng, std=0.02):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.table = normal_init(rng, (vocab, dim), std)

    def forward(self, ids):
        return T.embedding(self.table, np.asarray(ids))

    __call__ = forward


# -- optimization -------------------------------------------------------------------


def clip_grad_norm(params, max_norm):
    """Scale all grads so the global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad ** 2).sum())
    norm = np.sqrt(sq)
    if max_norm is not None and norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay and global grad clipping."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, max_grad_norm=None):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        clip_grad_norm(self.params, self.max_grad_norm)
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """Linear warmup to base_lr, then cosine decay to 0 at total_steps."""
    if warmup_steps > total_steps:
        raise ConfigError(f"warmup_steps {warmup_steps} exceeds total_steps {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))


def staged_lr(epoch, base_lr):
    """Staged rate used for the image router: base, doubled, then base again."""
    if 5 <= epoch < 10:
        return 2.0 * base_lr
    return base_lr
