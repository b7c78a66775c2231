"""Single-resident-expert inference engine with timing and memory accounting.

Exactly one expert is ever materialized in fast memory. A routing decision
that lands on a non-resident expert triggers an immediate eviction of the
current one and a timed load of the new one. All slow-memory experts live
as serialized blobs (on disk or in memory), so the byte accounting is exact.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, data as data_mod, router as router_mod, tensor as T
from .errors import CapacityError, ConfigError, ContractError, IntegrityError
from .experts import Expert
from .tensor import Tensor, no_grad
from .util import sha256_hex

WARMUP_REQUESTS = 3


class MemoryStore:
    """Slow-memory expert store backed by in-memory serialized blobs."""

    def __init__(self, blobs, digests):
        self._blobs = blobs  # id -> bytes
        self._digests = digests  # id -> expert digest

    @classmethod
    def from_registry(cls, registry):
        blobs, digests = {}, {}
        for e in registry.experts:
            header, entries = e.to_container()
            blobs[e.expert_id] = checkpoint.dumps(header, entries)
            digests[e.expert_id] = e.digest
        return cls(blobs, digests)

    def ids(self):
        return sorted(self._blobs)

    def byte_size(self, expert_id):
        return len(self._blobs[expert_id])

    def fetch(self, expert_id):
        return self._blobs[expert_id]

    def digest(self, expert_id):
        return self._digests[expert_id]

    def registry_digest(self):
        return sha256_hex(*(self._digests[i].encode() for i in self.ids()))


class DiskStore:
    """Slow-memory expert store reading serialized blobs from a registry directory."""

    def __init__(self, index_path):
        with open(index_path) as f:
            index = json.load(f)
        base = os.path.dirname(index_path)
        self._paths = {}
        self._digests = {}
        self._sizes = {}
        for item in index["experts"]:
            path = os.path.join(base, item["path"])
            self._paths[item["id"]] = path
            self._digests[item["id"]] = item["digest"]
            self._sizes[item["id"]] = os.path.getsize(path)

    def ids(self):
        return sorted(self._paths)

    def byte_size(self, expert_id):
        return self._sizes[expert_id]

    def fetch(self, expert_id):
        with open(self._paths[expert_id], "rb") as f:
            return f.read()

    def digest(self, expert_id):
        return self._digests[expert_id]

    def registry_digest(self):
        return sha256_hex(*(self._digests[i].encode() for i in self.ids()))


@dataclass
class ResidencyState:
    resident_id: int = None
    switch_count: int = 0
    load_count: int = 0

    def to_dict(self):
        return {"resident_id": self.resident_id, "switch_count": self.switch_count,
                "load_count": self.load_count}


@dataclass
class TimingLedger:
    router_ms: list = field(default_factory=list)
    load_ms: list = field(default_factory=list)
    expert_ms: list = field(default_factory=list)
    warmup_seen: int = 0

    def record(self, router_ms, load_ms, expert_ms):
        if self.warmup_seen < WARMUP_REQUESTS:
            self.warmup_seen += 1
            return False
        self.router_ms.append(router_ms)
        self.load_ms.append(load_ms)
        self.expert_ms.append(expert_ms)
        return True

    def summary(self):
        if not self.router_ms:
            raise ContractError("no measured requests yet (warmup is excluded)")
        r = np.array(self.router_ms)
        io = np.array(self.load_ms)
        e = np.array(self.expert_ms)
        total = r + io + e
        return {
            "n_requests": len(r),
            "router_ms": float(r.mean()),
            "io_ms": float(io.mean()),
            "expert_ms": float(e.mean()),
            "total_ms": float(total.mean()),
            "median_total_ms": float(np.median(total)),
            "io_pct": float(100.0 * io.sum() / total.sum()),
            "router_pct": float(100.0 * r.sum() / total.sum()),
            # overhead beyond the expert forward pass (router + load), as a
            # share of total serving time
            "total_pct": float(100.0 * (r.sum() + io.sum()) / total.sum()),
            # expert-switch latency = router + load for requests that switched
            "switch_overhead_ms": float((r + io)[io > 0].mean()) if (io > 0).any() else 0.0,
        }


class Engine:
    """Routed inference over a frozen expert suite with one resident expert."""

    def __init__(self, router, store, fast_capacity_bytes, kind, registry_digest=None):
        self.router = router
        self.store = store
        self.kind = kind
        self.fast_capacity_bytes = int(fast_capacity_bytes)
        if registry_digest is not None and store.registry_digest() != registry_digest:
            raise IntegrityError("expert store does not match the router's registry")
        if router.n_experts != len(store.ids()):
            raise ConfigError(
                f"router expects {router.n_experts} experts, store has {len(store.ids())}")
        self.router_bytes = sum(p.data.nbytes for p in router.parameters())
        sizes = {i: store.byte_size(i) for i in store.ids()}
        largest = max(sizes, key=sizes.get)
        if self.router_bytes + sizes[largest] > self.fast_capacity_bytes:
            raise CapacityError(
                f"fast memory {self.fast_capacity_bytes} B cannot hold the router "
                f"({self.router_bytes} B) plus the largest expert "
                f"(id {largest}, {sizes[largest]} B)")
        self.expert_bytes = sizes
        self.residency = ResidencyState()
        self.timing = TimingLedger()
        self._resident_model = None
        self._resident_expert = None
        self.activation_high_water = 0
        self.requests_served = 0
        self._embedding = None
        if kind == data_mod.NLP_KIND:
            self._embedding = router._embedding_ref.data

    # -- residency ---------------------------------------------------------

    def _audit(self):
        held = int(self._resident_model is not None)
        if held != (self.residency.resident_id is not None):
            raise ContractError("residency bookkeeping out of sync")

    def _load_expert(self, expert_id):
        """Evict the resident expert, then fetch+parse+materialize the new one."""
        if self._resident_model is not None:
            self._resident_model = None
            self._resident_expert = None
            self.residency.resident_id = None
            self.residency.switch_count += 1
        blob = self.store.fetch(expert_id)
        header, entries = checkpoint.loads(blob)
        expert = Expert.from_container(header, entries, verify=True)
        if expert.digest != self.store.digest(expert_id):
            raise IntegrityError(f"expert {expert_id} blob does not match the index digest")
        self._resident_model = expert.materialize()
        self._resident_expert = expert
        self.residency.resident_id = expert_id
        self.residency.load_count += 1
        self._audit()

    # -- inference -----------------------------------------------------------

    def infer(self, sample):
        """Route one sample, ensure residency, run the expert.

        Returns (output array, RoutingRecord, timing dict).
        """
        sample = np.asarray(sample)
        if self.kind == data_mod.CV_KIND:
            if sample.ndim != 3:
                raise ContractError(f"expected one [C,H,W] image, got shape {sample.shape}")
            router_in = Tensor(sample[None].astype(np.float64))
        else:
            if sample.ndim != 1:
                raise ContractError(f"expected one token-id sequence, got shape {sample.shape}")
            emb = self._embedding[sample.astype(np.int64)]
            router_in = Tensor(emb[None])

        t0 = time.perf_counter()
        record = router_mod.route(self.router, router_in)[0]
        t1 = time.perf_counter()

        load_ms = 0.0
        if self.residency.resident_id != record.chosen:
            self._load_expert(record.chosen)
            load_ms = (time.perf_counter() - t1) * 1e3
        t2 = time.perf_counter()
        with no_grad(), T.allocation_meter() as meter:
            if self.kind == data_mod.CV_KIND:
                out = self._resident_model(Tensor(sample[None].astype(np.float64))).data[0]
            else:
                out = self._resident_model.forward_from_embeddings(Tensor(emb[None])).data[0]
        t3 = time.perf_counter()
        self.activation_high_water = max(self.activation_high_water, meter.bytes)
        self._audit()

        timing = {
            "router_ms": (t1 - t0) * 1e3,
            "load_ms": load_ms,
            "expert_ms": (t3 - t2) * 1e3,
            "switched": load_ms > 0.0,
        }
        self.timing.record(timing["router_ms"], timing["load_ms"], timing["expert_ms"])
        self.requests_served += 1
        return out, record, timing

    # -- reports --------------------------------------------------------------

    def memory_report(self):
        if self.requests_served == 0:
            raise ContractError("memory report requires at least one inference")
        resident = self.residency.resident_id
        fast = self.router_bytes + self.expert_bytes[resident] + self.activation_high_water
        slow = sum(size for i, size in self.expert_bytes.items() if i != resident)
        return {
            "fast_capacity_bytes": self.fast_capacity_bytes,
            "fast_used_bytes": fast,
            "router_bytes": self.router_bytes,
            "resident_expert_id": resident,
            "resident_expert_bytes": self.expert_bytes[resident],
            "activation_high_water_bytes": self.activation_high_water,
            "slow_resident_bytes": slow,
            "per_expert_bytes": dict(self.expert_bytes),
        }


def serve_init(router_path, store, fast_capacity_bytes, shared_embedding=None):
    """Build an Engine from a router checkpoint and an expert store."""
    router, header = router_mod.load_router(
        router_path, shared_embedding=shared_embedding,
        expect_registry_digest=store.registry_digest())
    kind = data_mod.NLP_KIND if isinstance(router, router_mod.NlpRouter) else data_mod.CV_KIND
    return Engine(router, store, fast_capacity_bytes, kind)


def bench(engine, workload, repetitions=30, seed=0):
    """Timed benchmark over a workload of samples; warmup requests are excluded.

    Returns a JSON-ready report with per-phase means and the io share.
    """
    if len(workload) == 0:
        raise ContractError("benchmark workload is empty")
    rng = np.random.default_rng(seed)
    # warmup: not recorded by the ledger (first WARMUP_REQUESTS requests)
    for _ in range(WARMUP_REQUESTS):
        engine.infer(workload[int(rng.integers(len(workload)))])
    for _ in range(repetitions):
        for sample in workload:
            engine.infer(sample)
    summary = engine.timing.summary()
    summary.update({
        "model": engine.kind,
        "repetitions": repetitions,
        "workload_size": len(workload),
        "switch_count": engine.residency.switch_count,
        "memory": engine.memory_report(),
    })
    return summary
