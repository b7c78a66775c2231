"""Desk-scale base models: a residual image classifier and a byte-level causal LM."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint, data as data_mod, nn, tensor as T
from .errors import ConfigError, ShapeError, TrainingError
from .tensor import Tensor, no_grad
from .util import substream


def tokenize(text):
    """bytes (or str, encoded utf-8) -> int64 token ids, one per byte."""
    if isinstance(text, str):
        text = text.encode()
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids):
    return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class ColumnStats:
    """Per-input-column activation statistics from a calibration pass."""

    mean_abs: np.ndarray
    mean_sq: np.ndarray
    count: int


class _StatsAccumulator:
    def __init__(self):
        self.sum_abs = None
        self.sum_sq = None
        self.count = 0

    def __call__(self, cols):
        if self.sum_abs is None:
            self.sum_abs = np.zeros(cols.shape[1])
            self.sum_sq = np.zeros(cols.shape[1])
        self.sum_abs += np.abs(cols).sum(axis=0)
        self.sum_sq += (cols ** 2).sum(axis=0)
        self.count += cols.shape[0]

    def stats(self):
        if self.count == 0:
            raise ConfigError("calibration pass saw no activations")
        return ColumnStats(self.sum_abs / self.count, self.sum_sq / self.count, self.count)


class _QuantizableMixin:
    """Shared capture / weight-replacement machinery for both base models."""

    def quantizable_layers(self):
        """name -> layer whose .weight is quantized (conv or linear)."""
        raise NotImplementedError

    def named_quantizable(self):
        return {name: layer.weight for name, layer in self.quantizable_layers().items()}

    def collect_column_stats(self, batch_inputs):
        accs = {name: _StatsAccumulator() for name in self.quantizable_layers()}
        layers = self.quantizable_layers()
        for name, layer in layers.items():
            layer._stats_hook = accs[name]
        try:
            with no_grad():
                self.forward(batch_inputs)
        finally:
            for layer in layers.values():
                layer._stats_hook = None
        return {name: acc.stats() for name, acc in accs.items()}

    def set_weights(self, mapping):
        layers = self.quantizable_layers()
        for name, values in mapping.items():
            w = layers[name].weight
            values = np.asarray(values, dtype=np.float64)
            if values.shape != w.shape:
                raise ShapeError(f"{name}: weight shape {values.shape} != {w.shape}")
            w.data = values.copy()


@dataclass(frozen=True)
class CvModelConfig:
    in_channels: int = 4
    image_size: int = 32
    classes: int = 10
    widths: tuple = (24, 48, 96)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["arch"] = "cv"
        return d


class _ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm(cout)
        self.skip = None
        self.skip_bn = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.skip_bn = nn.BatchNorm(cout)

    def forward(self, x):
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        s = x if self.skip is None else self.skip_bn(self.skip(x))
        return T.relu(h + s)

    __call__ = forward


class CvBaseModel(nn.Module, _QuantizableMixin):
    """Conv stem + two residual blocks + global average pool + linear head."""

    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or CvModelConfig()
        rng = substream(seed, "cv-model-init")
        w0, w1, w2 = self.config.widths
        self.stem = nn.Conv2d(self.config.in_channels, w0, 3, rng, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm(w0)
        self.block1 = _ResidualBlock(w0, w1, 2, rng)
        self.block2 = _ResidualBlock(w1, w2, 2, rng)
        self.head = nn.Linear(w2, self.config.classes, rng)

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h = T.relu(self.stem_bn(self.stem(x)))
        h = self.block2(self.block1(h))
        pooled = T.tmean(h, axis=(2, 3))
        return self.head(pooled)

    __call__ = forward

    def quantizable_layers(self):
        layers = {
            "stem": self.stem,
            "block1.conv1": self.block1.conv1,
            "block1.conv2": self.block1.conv2,
            "block1.skip": self.block1.skip,
            "block2.conv1": self.block2.conv1,
            "block2.conv2": self.block2.conv2,
            "block2.skip": self.block2.skip,
            "head": self.head,
        }
        return {k: v for k, v in layers.items() if v is not None}

    def flops_estimate(self):
        """MAC count of one forward pass on a single image."""
        s = self.config.image_size
        w0, w1, w2 = self.config.widths
        c = self.config.in_channels
        macs = c * w0 * 9 * s * s
        s1 = s // 2
        macs += (w0 * w1 * 9 + w1 * w1 * 9 + w0 * w1) * s1 * s1
        s2 = s1 // 2
        macs += (w1 * w2 * 9 + w2 * w2 * 9 + w1 * w2) * s2 * s2
        macs += w2 * self.config.classes
        return macs


@dataclass(frozen=True)
class LmModelConfig:
    vocab: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    context: int = 128
    mlp_ratio: int = 2

    def to_dict(self):
        d = asdict(self)
        d["arch"] = "lm"
        return d


class _LmBlock(nn.Module):
    def __init__(self, cfg, rng):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadSelfAttention(d, cfg.n_heads, rng, causal=True)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d * cfg.mlp_ratio, rng)
        self.fc2 = nn.Linear(d * cfg.mlp_ratio, d, rng)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(T.relu(self.fc1(self.ln2(x))))

    __call__ = forward


class LmBaseModel(nn.Module, _QuantizableMixin):
    """Tiny causal LM; the token embedding table stays full-precision and is
    shared with the routing layer, so the forward path is split at the
    embedding boundary."""

    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or LmModelConfig()
        cfg = self.config
        rng = substream(seed, "lm-model-init")
        self.tok_emb = nn.Embedding(cfg.vocab, cfg.d_model, rng)
        self.pos_emb = nn.Embedding(cfg.context, cfg.d_model, rng)
        self.blocks = [_LmBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab, rng, bias=False)
        self.gather_count = 0

    def embed(self, token_ids):
        """Single shared gather from the full-precision embedding table."""
        ids = np.asarray(token_ids)
        if ids.size and ids.max() >= self.config.vocab:
            raise IndexError(f"token id out of range [0, {self.config.vocab})")
        self.gather_count += 1
        return self.tok_emb(ids)

    def forward_from_embeddings(self, emb):
        if emb.ndim == 2:
            emb = T.reshape(emb, (1,) + emb.shape)
        b, l, d = emb.shape
        if l > self.config.context:
            raise ShapeError(f"sequence length {l} exceeds context {self.config.context}")
        pos = self.pos_emb(np.arange(l))
        x = emb + T.reshape(pos, (1, l, d))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def forward(self, token_ids):
        return self.forward_from_embeddings(self.embed(token_ids))

    __call__ = forward

    def quantizable_layers(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out[f"blocks.{i}.attn.wq"] = block.attn.wq
            out[f"blocks.{i}.attn.wk"] = block.attn.wk
            out[f"blocks.{i}.attn.wv"] = block.attn.wv
            out[f"blocks.{i}.attn.wo"] = block.attn.wo
            out[f"blocks.{i}.fc1"] = block.fc1
            out[f"blocks.{i}.fc2"] = block.fc2
        out["head"] = self.head
        return out

    def flops_estimate(self, seq_len=None):
        """MAC count per forward pass of one sequence."""
        cfg = self.config
        l = seq_len or cfg.context
        d = cfg.d_model
        per_block = 4 * d * d * l + 2 * l * l * d + 2 * d * d * cfg.mlp_ratio * l
        return cfg.n_layers * per_block + l * d * cfg.vocab


def build_model(config_dict, seed=0):
    cfg = dict(config_dict)
    arch = cfg.pop("arch")
    if arch == "cv":
        cfg["widths"] = tuple(cfg["widths"])
        return CvBaseModel(CvModelConfig(**cfg), seed=seed)
    if arch == "lm":
        return LmBaseModel(LmModelConfig(**cfg), seed=seed)
    raise ConfigError(f"unknown model arch {arch!r}")


def model_loss(model, batch):
    """Task loss of a base model (or expert model) on one batch."""
    if batch.kind == data_mod.CV_KIND:
        logits = model(Tensor(batch.inputs))
        return T.cross_entropy(logits, batch.targets)
    logits = model(batch.inputs)
    b, l, v = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * l, v)), batch.targets.reshape(-1))


def train_base(model, train_data, epochs, seed, lr=1e-3, batch_size=32, log=None):
    """Deterministic supervised training of a base model.

    Raises TrainingError with the failing step index if the loss goes NaN.
    """
    opt = nn.AdamW(model.parameters(), lr=lr, max_grad_norm=1.0)
    history = []
    step = 0
    model.train()
    for epoch in range(epochs):
        rng = substream(seed, f"base-epoch-{epoch}")
        losses = []
        for batch in train_data.batches(batch_size, rng=rng):
            if len(batch) < 2:
                continue
            opt.zero_grad()
            loss = model_loss(model, batch)
            if not np.isfinite(loss.data):
                raise TrainingError(f"training loss diverged at step {step}", step=step)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        history.append(record)
        if log:
            log(record)
    model.eval()
    return history


def evaluate_accuracy(model, dataset, batch_size=64):
    """Top-1 accuracy (cv) or exp(mean token loss) perplexity (nlp)."""
    model.eval()
    if dataset.kind == data_mod.CV_KIND:
        hits = 0
        with no_grad():
            for batch in dataset.batches(batch_size):
                logits = model(Tensor(batch.inputs))
                hits += int((logits.data.argmax(axis=1) == batch.targets).sum())
        return hits / len(dataset)
    total_nll, total_tok = 0.0, 0
    with no_grad():
        for batch in dataset.batches(batch_size):
            loss = model_loss(model, batch)
            n_tok = batch.targets.size
            total_nll += loss.item() * n_tok
            total_tok += n_tok
    return float(np.exp(total_nll / total_tok))


def save_base_model(path, model, seed=None):
    header = {"kind": "base-model", "model_config": model.config.to_dict()}
    if seed is not None:
        header["seed"] = seed
    entries = [(name, "f64", arr) for name, arr in sorted(model.state_dict().items())]
    return checkpoint.save(path, header, entries)


def load_base_model(path, expect_digest=None):
    header, entries = checkpoint.load(path, expect_digest=expect_digest)
    if header.get("kind") != "base-model":
        raise ConfigError(f"{path} is not a base-model checkpoint")
    model = build_model(header["model_config"])
    model.load_state_dict({name: arr for name, _, arr in entries})
    model.eval()
    return model
