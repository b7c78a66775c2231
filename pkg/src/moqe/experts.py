"""Expert registry, per-sample loss evaluation, and optimal-expert labeling."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, data as data_mod, models, quant
from .errors import ConfigError, ContractError, IntegrityError, RegistrationError
from .tensor import Tensor, no_grad
from .util import sha256_hex

LABEL_MAGIC = b"MOQL"
LABEL_VERSION = 1


@dataclass
class Expert:
    """A frozen quantized instance of the base model plus identity metadata."""

    spec: quant.QuantSpec
    model_config: dict
    qweights: dict
    fp_state: dict
    digest: str
    meta: dict = field(default_factory=dict)
    expert_id: int = None

    def materialize(self):
        """Build the runnable model: full-precision parts plus dequantized weights."""
        model = models.build_model(self.model_config)
        model.load_state_dict(self.fp_state)
        model.set_weights({name: quant.dequantize(q) for name, q in self.qweights.items()})
        model.eval()
        for p in model.parameters():
            p.requires_grad = False
        return model

    def to_container(self):
        qmeta = {}
        entries = []
        code_dtype = "i4" if self.spec.bits == 4 else "i8"
        for name in sorted(self.qweights):
            q = self.qweights[name]
            qmeta[name] = {
                "granularity": q.granularity,
                "bits": q.bits,
                "block_size": q.block_size,
                "original_shape": list(q.original_shape),
            }
            entries.append((f"q:{name}:codes", code_dtype, q.codes))
            entries.append((f"q:{name}:scale", "f64", q.scale))
            entries.append((f"q:{name}:zp", "f64", q.zero_point.astype(np.float64)))
            if q.col_scale is not None:
                entries.append((f"q:{name}:cscale", "f64", q.col_scale))
        for name in sorted(self.fp_state):
            entries.append((f"fp:{name}", "f64", self.fp_state[name]))
        header = {
            "kind": "expert",
            "spec": self.spec.to_dict(),
            "model_config": self.model_config,
            "digest": self.digest,
            "meta": self.meta,
            "quant_meta": qmeta,
        }
        return header, entries

    def save(self, path):
        header, entries = self.to_container()
        return checkpoint.save(path, header, entries)

    def byte_size(self):
        header, entries = self.to_container()
        return len(checkpoint.dumps(header, entries))

    @classmethod
    def from_container(cls, header, entries, verify=True):
        if header.get("kind") != "expert":
            raise IntegrityError("not an expert checkpoint")
        arrays = {name: arr for name, _, arr in entries}
        spec = quant.QuantSpec.from_dict(header["spec"])
        qweights = {}
        for name, qm in header["quant_meta"].items():
            qweights[name] = quant.QuantizedTensor(
                codes=arrays[f"q:{name}:codes"].astype(np.int8),
                scale=arrays[f"q:{name}:scale"],
                zero_point=arrays[f"q:{name}:zp"].astype(np.int64),
                granularity=qm["granularity"],
                bits=qm["bits"],
                original_shape=tuple(qm["original_shape"]),
                block_size=qm["block_size"],
                col_scale=arrays.get(f"q:{name}:cscale"),
            )
        fp_state = {name[3:]: arr for name, _, arr in entries if name.startswith("fp:")}
        expert = cls(spec=spec, model_config=header["model_config"], qweights=qweights,
                     fp_state=fp_state, digest=header["digest"], meta=header.get("meta", {}))
        if verify:
            recomputed = quant.quant_digest(spec, qweights, fp_state)
            if recomputed != expert.digest:
                raise IntegrityError("expert payload does not match its recorded digest")
        return expert

    @classmethod
    def load(cls, path, verify=True):
        header, entries = checkpoint.load(path)
        return cls.from_container(header, entries, verify=verify)


class ExpertRegistry:
    """Ordered collection of frozen experts; ids are assigned at registration."""

    def __init__(self):
        self.experts = []
        self._models = {}

    def __len__(self):
        return len(self.experts)

    def register(self, expert):
        if any(e.digest == expert.digest for e in self.experts):
            raise RegistrationError(f"expert with digest {expert.digest[:12]}… already registered")
        expert.expert_id = len(self.experts)
        self.experts.append(expert)
        return expert.expert_id

    def get(self, expert_id):
        return self.experts[expert_id]

    def digests(self):
        return [e.digest for e in self.experts]

    def registry_digest(self):
        return sha256_hex(*(d.encode() for d in self.digests()))

    def materialized(self, expert_id):
        if expert_id not in self._models:
            self._models[expert_id] = self.experts[expert_id].materialize()
        return self._models[expert_id]

    def prefix(self, n):
        """Sub-registry of the first n experts (fixed id-prefix selection)."""
        if n > len(self):
            raise ConfigError(f"requested {n} experts but registry has {len(self)}")
        sub = ExpertRegistry()
        for e in self.experts[:n]:
            sub.register(Expert(e.spec, e.model_config, e.qweights, e.fp_state, e.digest, e.meta))
        return sub

    def save_index(self, directory):
        os.makedirs(directory, exist_ok=True)
        index = {"experts": []}
        for e in self.experts:
            fname = f"expert_{e.expert_id}.moqe"
            e.save(os.path.join(directory, fname))
            index["experts"].append({"id": e.expert_id, "path": fname, "digest": e.digest,
                                     "spec": e.spec.to_dict(), "meta": e.meta})
        index["registry_digest"] = self.registry_digest()
        path = os.path.join(directory, "registry.json")
        with open(path, "w") as f:
            json.dump(index, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load_index(cls, path, verify=True):
        with open(path) as f:
            index = json.load(f)
        base = os.path.dirname(path)
        reg = cls()
        for item in sorted(index["experts"], key=lambda x: x["id"]):
            expert = Expert.load(os.path.join(base, item["path"]), verify=verify)
            if expert.digest != item["digest"]:
                raise IntegrityError(f"index digest mismatch for expert {item['id']}")
            reg.register(expert)
        if index.get("registry_digest") != reg.registry_digest():
            raise IntegrityError("registry digest mismatch")
        return reg


def per_sample_loss(model, batch):
    """Per-sample task loss; cv: cross-entropy per image, nlp: mean token loss."""
    with no_grad():
        if batch.kind == data_mod.CV_KIND:
            logits = model(Tensor(batch.inputs)).data
            return _row_nll(logits, batch.targets)
        logits = model(batch.inputs).data  # [B, L, V]
        b, l, v = logits.shape
        nll = _row_nll(logits.reshape(b * l, v), batch.targets.reshape(-1))
        return nll.reshape(b, l).mean(axis=1)


def _row_nll(logits, labels):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    return logz - shifted[np.arange(len(labels)), labels]


@dataclass
class OracleLabel:
    sample_digest: bytes
    per_expert_loss: np.ndarray
    j_star: int
    margin: float


class LabelSet:
    """Oracle labels for a dataset against a fixed registry."""

    def __init__(self, losses, sample_digests, registry_digest):
        self.losses = losses  # [N, E]
        self.sample_digests = sample_digests
        self.registry_digest = registry_digest

    def __len__(self):
        return len(self.losses)

    @property
    def j_star(self):
        return self.losses.argmin(axis=1)

    @property
    def margins(self):
        part = np.sort(self.losses, axis=1)
        return part[:, 1] - part[:, 0]

    def label(self, i):
        return OracleLabel(self.sample_digests[i], self.losses[i],
                           int(self.j_star[i]), float(self.margins[i]))

    def oracle_loss(self):
        return float(self.losses.min(axis=1).mean())

    def expert_loss(self, j):
        return float(self.losses[:, j].mean())

    def save(self, path):
        n, e = self.losses.shape
        with open(path, "wb") as f:
            f.write(LABEL_MAGIC)
            f.write(struct.pack("<HH", LABEL_VERSION, e))
            f.write(bytes.fromhex(self.registry_digest))
            f.write(struct.pack("<Q", n))
            js = self.j_star
            for i in range(n):
                f.write(self.sample_digests[i])
                f.write(np.ascontiguousarray(self.losses[i], dtype="<f8").tobytes())
                f.write(struct.pack("<H", int(js[i])))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(4) != LABEL_MAGIC:
                raise IntegrityError("not a label store")
            version, e = struct.unpack("<HH", f.read(4))
            if version != LABEL_VERSION:
                raise IntegrityError(f"unsupported label store version {version}")
            registry_digest = f.read(32).hex()
            (n,) = struct.unpack("<Q", f.read(8))
            losses = np.empty((n, e))
            digests = []
            for i in range(n):
                digests.append(f.read(32))
                losses[i] = np.frombuffer(f.read(8 * e), dtype="<f8")
                (js,) = struct.unpack("<H", f.read(2))
                if js != losses[i].argmin():
                    raise IntegrityError(f"record {i}: stored j_star inconsistent with losses")
        return cls(losses, digests, registry_digest)


def label_oracle(registry, dataset, batch_size=64, cache_dir=None):
    """Evaluate every sample against every expert; lowest loss wins, ties to lowest id."""
    if len(registry) < 2:
        raise ContractError("oracle labeling needs at least 2 experts")
    if len(dataset) == 0:
        raise ContractError("cannot label an empty dataset")
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        key = sha256_hex(registry.registry_digest().encode(), dataset.digest().encode())
        cache_path = os.path.join(cache_dir, f"labels_{key[:24]}.moql")
        if os.path.exists(cache_path):
            labels = LabelSet.load(cache_path)
            if labels.registry_digest == registry.registry_digest():
                return labels
    losses = np.empty((len(dataset), len(registry)))
    for j in range(len(registry)):
        model = registry.materialized(j)
        out = []
        for start in range(0, len(dataset), batch_size):
            batch = dataset.take(np.arange(start, min(start + batch_size, len(dataset))))
            out.append(per_sample_loss(model, batch))
        losses[:, j] = np.concatenate(out)
    digests = [dataset.sample_digest(i) for i in range(len(dataset))]
    labels = LabelSet(losses, digests, registry.registry_digest())
    if cache_path is not None:
        labels.save(cache_path)
    return labels


def heterogeneity_report(registry, dataset, labels):
    """Mean loss per (subset, expert) plus the winning expert per subset."""
    sids = sorted(int(s) for s in np.unique(dataset.subset_ids))
    table = np.empty((len(sids), len(registry)))
    for row, sid in enumerate(sids):
        mask = dataset.subset_ids == sid
        table[row] = labels.losses[mask].mean(axis=0)
    winners = table.argmin(axis=1)
    return {
        "subset_ids": sids,
        "mean_loss": table,
        "winners": winners,
        "distinct_winners": len(np.unique(winners)),
    }
