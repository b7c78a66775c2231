"""Router architectures and the routing decision function.

The image router: a small MLP on global channel statistics whose output is
broadcast-added to the image, a three-stage squeeze-excitation residual
trunk, and multi-head self-attention over the flattened feature map.

The text router: a projection of the shared (frozen) token embeddings, a
transformer encoder block, a refinement self-attention block, mean pooling,
and an output MLP. It never owns or updates the embedding table.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint, nn, tensor as T
from .errors import ConfigError, IntegrityError, ShapeError
from .tensor import Tensor
from .util import array_digest, substream


@dataclass
class RoutingRecord:
    probs: np.ndarray
    chosen: int
    entropy: float
    oracle: int = None


@dataclass(frozen=True)
class CvRouterConfig:
    n_experts: int
    in_channels: int = 4
    image_size: int = 32
    mlp: tuple = (8, 8, 4)
    se_channels: tuple = (4, 8, 16)
    se_strides: tuple = (1, 2, 2)
    attention_heads: int = 8

    def __post_init__(self):
        if len(self.se_channels) != 3 or len(self.se_strides) != 3:
            raise ConfigError("exactly 3 SE stages are required")
        if len(self.mlp) != 3:
            raise ConfigError("the global-feature MLP has exactly 3 layers")
        if self.mlp[-1] != self.in_channels:
            raise ConfigError("last MLP width must equal the image channel count")
        if self.se_channels[-1] % self.attention_heads != 0:
            raise ConfigError(
                f"trunk width {self.se_channels[-1]} not divisible by {self.attention_heads} heads")
        if self.n_experts < 2:
            raise ConfigError("routing needs at least 2 experts")

    def to_dict(self):
        d = asdict(self)
        for k in ("mlp", "se_channels", "se_strides"):
            d[k] = list(d[k])
        d["router_kind"] = "cv"
        return d


@dataclass(frozen=True)
class NlpRouterConfig:
    n_experts: int
    d_model: int = 64  # must equal the base embedding width
    d_router: int = 8
    encoder_layers: int = 1
    attention_heads: int = 4
    mlp_hidden: int = 16
    context: int = 128

    def __post_init__(self):
        if self.d_router % self.attention_heads != 0:
            raise ConfigError(
                f"router width {self.d_router} not divisible by {self.attention_heads} heads")
        if self.n_experts < 2:
            raise ConfigError("routing needs at least 2 experts")

    def to_dict(self):
        d = asdict(self)
        d["router_kind"] = "nlp"
        return d


def _config_from_dict(d):
    d = dict(d)
    kind = d.pop("router_kind")
    if kind == "cv":
        for k in ("mlp", "se_channels", "se_strides"):
            d[k] = tuple(d[k])
        return CvRouterConfig(**d)
    if kind == "nlp":
        return NlpRouterConfig(**d)
    raise ConfigError(f"unknown router kind {kind!r}")


class _SEStage(nn.Module):
    """Residual conv block with squeeze-excitation channel gating."""

    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm(cout)
        hidden = max(cout // 4, 2)
        self.fc1 = nn.Linear(cout, hidden, rng)
        self.fc2 = nn.Linear(hidden, cout, rng)
        self.skip = None
        self.skip_bn = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.skip_bn = nn.BatchNorm(cout)

    def forward(self, x):
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        squeeze = T.tmean(h, axis=(2, 3))  # [B, C]
        gate = T.sigmoid(self.fc2(T.relu(self.fc1(squeeze))))
        b, c = gate.shape
        h = h * T.reshape(gate, (b, c, 1, 1))
        s = x if self.skip is None else self.skip_bn(self.skip(x))
        return T.relu(h + s)

    __call__ = forward


class CvRouter(nn.Module):
    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        rng = substream(seed, "cv-router-init")
        c = config.in_channels
        w1, w2, w3 = config.mlp
        self.mlp1 = nn.Linear(2 * c, w1, rng, std=0.02)
        self.mlp_bn1 = nn.BatchNorm(w1)
        self.mlp2 = nn.Linear(w1, w2, rng, std=0.02)
        self.mlp_bn2 = nn.BatchNorm(w2)
        self.mlp3 = nn.Linear(w2, w3, rng, std=0.02)
        self.mlp_bn3 = nn.BatchNorm(w3)
        stages = []
        cin = c
        for cout, stride in zip(config.se_channels, config.se_strides):
            stages.append(_SEStage(cin, cout, stride, rng))
            cin = cout
        self.stages = stages
        self.attn = nn.MultiHeadSelfAttention(config.se_channels[-1], config.attention_heads,
                                              rng, std=0.02)
        self.out = nn.Linear(config.se_channels[-1], config.n_experts, rng, std=0.02)

    @property
    def n_experts(self):
        return self.config.n_experts

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B,{self.config.in_channels},H,W] images, got {x.shape}")
        b = x.shape[0]
        mu = T.tmean(x, axis=(2, 3))
        var = T.tmean((x - T.reshape(mu, (b, -1, 1, 1))) ** 2.0, axis=(2, 3))
        feats = _concat_cols(mu, (var + 1e-8) ** 0.5)
        g = T.relu(self.mlp_bn1(self.mlp1(feats)))
        g = T.relu(self.mlp_bn2(self.mlp2(g)))
        g = T.relu(self.mlp_bn3(self.mlp3(g)))
        h = x + T.reshape(g, (b, self.config.in_channels, 1, 1))
        for stage in self.stages:
            h = stage(h)
        bb, c, hh, ww = h.shape
        seq = T.transpose(T.reshape(h, (bb, c, hh * ww)), (0, 2, 1))  # [B, P, C]
        ctx = self.attn(seq)
        pooled = T.tmean(ctx, axis=1)
        return self.out(pooled)

    __call__ = forward

    def flops_estimate(self):
        cfg = self.config
        s = cfg.image_size
        macs = 0
        widths = [2 * cfg.in_channels] + list(cfg.mlp)
        for a, b in zip(widths, widths[1:]):
            macs += a * b
        cin = cfg.in_channels
        for cout, stride in zip(cfg.se_channels, cfg.se_strides):
            s = s // stride
            macs += (cin * cout * 9 + cout * cout * 9 + cin * cout) * s * s
            macs += cout * max(cout // 4, 2) * 2
            cin = cout
        p = s * s
        d = cfg.se_channels[-1]
        macs += 4 * d * d * p + 2 * p * p * d
        macs += d * cfg.n_experts
        return macs


def _concat_cols(a, b):
    """Column-wise concat of two [B, F] tensors via the autodiff primitives."""
    ba, fa = a.shape
    _, fb = b.shape
    pad_a = Tensor(np.concatenate([np.eye(fa), np.zeros((fa, fb))], axis=1))
    pad_b = Tensor(np.concatenate([np.zeros((fb, fa)), np.eye(fb)], axis=1))
    return T.matmul(a, pad_a) + T.matmul(b, pad_b)


class _EncoderBlock(nn.Module):
    def __init__(self, d, heads, rng):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadSelfAttention(d, heads, rng, std=0.02)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 2 * d, rng, std=0.02)
        self.fc2 = nn.Linear(2 * d, d, rng, std=0.02)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(T.relu(self.fc1(self.ln2(x))))

    __call__ = forward


class NlpRouter(nn.Module):
    """Routes from the base model's shared embeddings; the table is read-only here."""

    def __init__(self, config, shared_embedding, seed=0):
        super().__init__()
        if shared_embedding.shape[1] != config.d_model:
            raise ConfigError(
                f"router d_model {config.d_model} != embedding width {shared_embedding.shape[1]}")
        self.config = config
        rng = substream(seed, "nlp-router-init")
        self._embedding_ref = shared_embedding  # never a parameter of this module
        self.embedding_digest = array_digest(shared_embedding.data)
        self.proj = nn.Linear(config.d_model, config.d_router, rng, std=0.02)
        self.pos = nn.Embedding(config.context, config.d_router, rng, std=0.02)
        self.encoder = [_EncoderBlock(config.d_router, config.attention_heads, rng)
                        for _ in range(config.encoder_layers)]
        self.refine = nn.MultiHeadSelfAttention(config.d_router, config.attention_heads,
                                                rng, std=0.02)
        self.mlp1 = nn.Linear(config.d_router, config.mlp_hidden, rng, std=0.02)
        self.mlp2 = nn.Linear(config.mlp_hidden, config.n_experts, rng, std=0.02)

    @property
    def n_experts(self):
        return self.config.n_experts

    def forward(self, embeddings):
        """embeddings: [B, L, d_model] (or [L, d_model]) from the shared table."""
        if not isinstance(embeddings, Tensor):
            embeddings = Tensor(np.asarray(embeddings, dtype=np.float64))
        squeeze = embeddings.ndim == 2
        if squeeze:
            embeddings = T.reshape(embeddings, (1,) + embeddings.shape)
        b, l, d = embeddings.shape
        if d != self.config.d_model:
            raise ShapeError(f"embedding width {d} != configured {self.config.d_model}")
        x = self.proj(embeddings)
        pos = self.pos(np.arange(l))
        x = x + T.reshape(pos, (1, l, self.config.d_router))
        for block in self.encoder:
            x = block(x)
        x = self.refine(x)
        pooled = T.tmean(x, axis=1)
        out = self.mlp2(T.relu(self.mlp1(pooled)))
        return out

    __call__ = forward

    def flops_estimate(self, seq_len=None):
        cfg = self.config
        l = seq_len or cfg.context
        d = cfg.d_router
        macs = cfg.d_model * d * l
        per_block = 4 * d * d * l + 2 * l * l * d + 4 * d * d * l
        macs += cfg.encoder_layers * per_block
        macs += 4 * d * d * l + 2 * l * l * d
        macs += d * cfg.mlp_hidden + cfg.mlp_hidden * cfg.n_experts
        return macs


def build_cv_router(config, seed=0):
    return CvRouter(config, seed=seed)


def build_nlp_router(config, shared_embedding, seed=0):
    return NlpRouter(config, shared_embedding, seed=seed)


def route(router, input_repr):
    """RoutingRecords for a batch; deterministic, ties broken to the lowest index."""
    with T.no_grad():
        logits = router(input_repr)
    probs = T.softmax(Tensor(logits.data)).data
    records = []
    for p in probs:
        ent = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
        records.append(RoutingRecord(probs=p, chosen=int(p.argmax()), entropy=ent))
    return records


def save_router(path, router, registry_digest=None, extra=None):
    header = {"kind": "router", "config": router.config.to_dict()}
    if registry_digest is not None:
        header["registry_digest"] = registry_digest
    if isinstance(router, NlpRouter):
        header["embedding_digest"] = router.embedding_digest
    if extra:
        header["extra"] = extra
    entries = [(name, "f64", arr) for name, arr in sorted(router.state_dict().items())]
    return checkpoint.save(path, header, entries)


def load_router(path, shared_embedding=None, expect_registry_digest=None):
    header, entries = checkpoint.load(path)
    if header.get("kind") != "router":
        raise IntegrityError(f"{path} is not a router checkpoint")
    if expect_registry_digest is not None and header.get("registry_digest") != expect_registry_digest:
        raise IntegrityError("router was trained against a different expert registry")
    config = _config_from_dict(header["config"])
    if isinstance(config, NlpRouterConfig):
        if shared_embedding is None:
            raise ConfigError("loading a text router requires the shared embedding table")
        if array_digest(shared_embedding.data) != header["embedding_digest"]:
            raise IntegrityError("shared embedding table does not match the router checkpoint")
        router = NlpRouter(config, shared_embedding)
    else:
        router = CvRouter(config)
    router.load_state_dict({name: arr for name, _, arr in entries})
    router.eval()
    return router, header
