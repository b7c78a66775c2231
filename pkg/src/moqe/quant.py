"""Five quantization schemes producing heterogeneous experts from one base model.

All schemes operate on a weight matrix viewed as [out_channels, in_columns]
(conv kernels are unfolded along the input dimension). Ties in
round-to-nearest resolve to even, which numpy's round already does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .util import array_digest, sha256_hex

SCHEMES = ("rtn_per_tensor", "affine_per_channel", "blockwise", "activation_aware", "error_feedback")
CALIB_SCHEMES = ("activation_aware", "error_feedback")

# Equalization clamp for activation_aware; avoids scale blowup on dead channels.
EQ_CLAMP = (1e-3, 1e3)


@dataclass(frozen=True)
class QuantSpec:
    scheme: str
    bits: int
    block_size: Optional[int] = None
    calib_samples: Optional[int] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.bits not in (4, 8):
            raise ConfigError(f"bits must be 4 or 8, got {self.bits}")
        if self.scheme == "blockwise":
            if self.block_size is None or self.block_size < 2:
                raise ConfigError("blockwise requires block_size >= 2")
        if self.scheme in CALIB_SCHEMES and not self.calib_samples:
            raise ConfigError(f"{self.scheme} requires calib_samples >= 1")

    def to_dict(self):
        return {"scheme": self.scheme, "bits": self.bits,
                "block_size": self.block_size, "calib_samples": self.calib_samples}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scheme"], d["bits"], d.get("block_size"), d.get("calib_samples"))


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int8, shape [out, K]
    scale: np.ndarray
    zero_point: np.ndarray
    granularity: str  # per_tensor | per_channel_out | per_channel_in | per_block | per_channel_out_eq
    bits: int
    original_shape: tuple
    block_size: Optional[int] = None
    # column equalizer for per_channel_out_eq: deq = codes * scale[:,None] / col_scale[None,:]
    col_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        qmin, qmax = code_range(self.bits)
        if self.codes.size and (self.codes.min() < qmin or self.codes.max() > qmax):
            raise DataError(f"codes outside [{qmin}, {qmax}]")
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0):
            raise DataError("scales must be strictly positive and finite")
        if self.col_scale is not None and (
                not np.all(np.isfinite(self.col_scale)) or np.any(self.col_scale <= 0)):
            raise DataError("column equalizers must be strictly positive and finite")


def code_range(bits):
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def affine_params(values, bits, symmetric):
    """Scale and zero point for one slice; all-zero slices map to (1, 0)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("empty slice")
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite values in quantization slice")
    qmin, qmax = code_range(bits)
    if symmetric:
        amax = np.abs(values).max()
        if amax == 0.0:
            return 1.0, 0
        return amax / qmax, 0
    lo, hi = values.min(), values.max()
    if hi == lo == 0.0:
        return 1.0, 0
    if hi == lo:
        # constant nonzero slice: symmetric fallback keeps the value exact
        return abs(hi) / qmax, 0
    scale = (hi - lo) / (qmax - qmin)
    zero_point = int(np.round(qmin - lo / scale))
    return scale, zero_point


def _quantize_rows(w, bits, symmetric, axis_desc):
    """Per-row affine quantization of [out, K]; returns codes, scales, zps."""
    qmin, qmax = code_range(bits)
    scales = np.empty(w.shape[0])
    zps = np.empty(w.shape[0], dtype=np.int64)
    codes = np.empty(w.shape, dtype=np.int8)
    for r in range(w.shape[0]):
        s, z = affine_params(w[r], bits, symmetric)
        scales[r] = s
        zps[r] = z
        codes[r] = np.clip(np.round(w[r] / s) + z, qmin, qmax).astype(np.int8)
    return codes, scales, zps


def quantize(weights, spec, calib=None):
    """Quantize one weight matrix (any shape; unfolded to [out, K]) -> QuantizedTensor.

    calib: ColumnStats for schemes that need activation statistics.
    """
    w = np.asarray(weights.data if hasattr(weights, "data") else weights, dtype=np.float64)
    original_shape = w.shape
    w2 = w.reshape(w.shape[0], -1)
    out, k = w2.shape
    if not np.all(np.isfinite(w2)):
        raise DataError("non-finite weights")
    qmin, qmax = code_range(spec.bits)

    if spec.scheme in CALIB_SCHEMES and calib is None:
        raise ConfigError(f"{spec.scheme} requires calibration statistics")

    if spec.scheme == "rtn_per_tensor":
        s, z = affine_params(w2.reshape(-1), spec.bits, symmetric=True)
        codes = np.clip(np.round(w2 / s), qmin, qmax).astype(np.int8)
        return QuantizedTensor(codes, np.array([s]), np.array([0]), "per_tensor",
                               spec.bits, original_shape)

    if spec.scheme == "affine_per_channel":
        codes, scales, zps = _quantize_rows(w2, spec.bits, symmetric=False, axis_desc="out")
        return QuantizedTensor(codes, scales, zps, "per_channel_out", spec.bits, original_shape)

    if spec.scheme == "blockwise":
        bs = spec.block_size
        if bs > k:
            raise ConfigError(f"block_size {bs} exceeds channel length {k}")
        n_blocks = (k + bs - 1) // bs
        scales = np.empty((out, n_blocks))
        codes = np.empty((out, k), dtype=np.int8)
        for r in range(out):
            for b in range(n_blocks):
                sl = w2[r, b * bs : (b + 1) * bs]
                s, _ = affine_params(sl, spec.bits, symmetric=True)
                scales[r, b] = s
                codes[r, b * bs : (b + 1) * bs] = np.clip(np.round(sl / s), qmin, qmax).astype(np.int8)
        return QuantizedTensor(codes, scales, np.zeros((out, n_blocks), dtype=np.int64),
                               "per_block", spec.bits, original_shape, block_size=bs)

    if spec.scheme == "activation_aware":
        s_c = np.sqrt(np.maximum(calib.mean_abs, 0.0))
        s_c = np.clip(s_c, *EQ_CLAMP)
        # equalize columns by activation magnitude, then quantize per output
        # row; the equalizer is folded into the stored (factored) scale so
        # dequantization is codes * row_scale / s_c
        weq = w2 * s_c[None, :]
        codes, scales, _ = _quantize_rows(weq, spec.bits, symmetric=True, axis_desc="out")
        return QuantizedTensor(codes, scales, np.zeros(out, dtype=np.int64),
                               "per_channel_out_eq", spec.bits, original_shape,
                               col_scale=s_c)

    # error_feedback: quantize columns left to right, pushing each column's
    # dequantization residual onto the remaining columns weighted by their
    # diagonal second-moment estimate from calibration.
    h = np.maximum(np.asarray(calib.mean_sq, dtype=np.float64), 0.0)
    wc = w2.copy()
    codes = np.empty((out, k), dtype=np.int8)
    scales = np.empty(k)
    suffix = np.concatenate([np.cumsum(h[::-1])[::-1][1:], [0.0]])  # sum of h for cols > j
    for j in range(k):
        col = wc[:, j]
        s, _ = affine_params(col, spec.bits, symmetric=True)
        scales[j] = s
        cj = np.clip(np.round(col / s), qmin, qmax).astype(np.int8)
        codes[:, j] = cj
        if j + 1 < k and suffix[j] > 0:
            residual = col - cj.astype(np.float64) * s
            weights_rest = h[j + 1 :] / suffix[j]
            wc[:, j + 1 :] += residual[:, None] * weights_rest[None, :]
    return QuantizedTensor(codes, scales, np.zeros(k, dtype=np.int64),
                           "per_channel_in", spec.bits, original_shape)


def dequantize(q):
    """(codes - zero_point) * scale at the stored granularity."""
    c = q.codes.astype(np.float64)
    if q.granularity == "per_tensor":
        w = (c - q.zero_point[0]) * q.scale[0]
    elif q.granularity == "per_channel_out":
        w = (c - q.zero_point[:, None]) * q.scale[:, None]
    elif q.granularity == "per_channel_in":
        w = (c - q.zero_point[None, :]) * q.scale[None, :]
    elif q.granularity == "per_channel_out_eq":
        w = c * q.scale[:, None] / q.col_scale[None, :]
    elif q.granularity == "per_block":
        out, k = c.shape
        bs = q.block_size
        w = np.empty_like(c)
        for b in range(q.scale.shape[1]):
            sl = slice(b * bs, (b + 1) * bs)
            w[:, sl] = (c[:, sl] - q.zero_point[:, b : b + 1]) * q.scale[:, b : b + 1]
    else:
        raise ConfigError(f"unknown granularity {q.granularity!r}")
    return w.reshape(q.original_shape)


def quant_digest(spec, qweights, fp_state):
    """Content digest binding scheme metadata, codes, and full-precision parts."""
    parts = [repr(sorted(spec.to_dict().items())).encode()]
    for name in sorted(qweights):
        q = qweights[name]
        parts.append(name.encode())
        arrays = [q.codes, q.scale, q.zero_point]
        if q.col_scale is not None:
            arrays.append(q.col_scale)
        parts.append(array_digest(*arrays).encode())
    for name in sorted(fp_state):
        parts.append(name.encode())
        parts.append(array_digest(fp_state[name]).encode())
    return sha256_hex(*parts)


def quantize_model(base, spec, calib=None, meta=None):
    """Quantize every conv/linear weight of a base model into an Expert.

    Biases, norm parameters, and embedding tables stay full-precision.
    calib: a Dataset slice used for the calibration forward pass; required
    by activation_aware and error_feedback.
    """
    from .experts import Expert  # late import; experts depends on this module

    stats = None
    if spec.scheme in CALIB_SCHEMES:
        if calib is None:
            raise ConfigError(f"{spec.scheme} requires a calibration batch")
        take = min(spec.calib_samples, len(calib))
        stats = base.collect_column_stats(calib.take(np.arange(take)).inputs)
    qnames = set(base.quantizable_layers())
    qweights = {}
    for name, w in base.named_quantizable().items():
        qweights[name] = quantize(w, spec, calib=None if stats is None else stats[name])
    layer_param_keys = {_weight_key(base, name) for name in qnames}
    fp_state = {k: v for k, v in base.state_dict().items() if k not in layer_param_keys}
    return Expert(
        spec=spec,
        model_config=base.config.to_dict(),
        qweights=qweights,
        fp_state=fp_state,
        digest=quant_digest(spec, qweights, fp_state),
        meta=meta or {},
    )


def _weight_key(base, layer_name):
    """Map a quantizable layer name to its state_dict weight key."""
    layer = base.quantizable_layers()[layer_name]
    for key, param in base.named_parameters().items():
        if param is layer.weight:
            return key
    raise ConfigError(f"layer {layer_name} has no registered weight parameter")
