"""Serving engine: transparency, residency, capacity, and accounting."""

import numpy as np
import pytest

from moqe import serving, training
from moqe.errors import CapacityError, ConfigError, ContractError, IntegrityError
from moqe.router import CvRouterConfig, NlpRouterConfig, build_cv_router, build_nlp_router
from moqe.serving import DiskStore, Engine, MemoryStore, bench, serve_init
from moqe.tensor import Tensor, no_grad


def _cv_engine(registry, n_experts=2, capacity_extra=1 << 20, seed=0):
    store = MemoryStore.from_registry(registry)
    router = build_cv_router(CvRouterConfig(n_experts=n_experts, image_size=16), seed=seed)
    router.eval()
    rb = sum(p.data.nbytes for p in router.parameters())
    cap = rb + max(store.byte_size(i) for i in store.ids()) + capacity_extra
    return Engine(router, store, cap, "cv"), store, router


def test_memory_store_round_trip(tiny_cv_registry):
    store = MemoryStore.from_registry(tiny_cv_registry)
    assert store.ids() == [0, 1]
    assert store.registry_digest() == tiny_cv_registry.registry_digest()
    assert store.byte_size(0) == len(store.fetch(0))


def test_disk_store_matches_memory_store(tmp_path, tiny_cv_registry):
    index = tiny_cv_registry.save_index(tmp_path / "reg")
    disk = DiskStore(index)
    mem = MemoryStore.from_registry(tiny_cv_registry)
    assert disk.ids() == mem.ids()
    assert disk.registry_digest() == mem.registry_digest()
    for i in disk.ids():
        assert disk.fetch(i) == mem.fetch(i)
        assert disk.byte_size(i) == mem.byte_size(i)


def test_capacity_error_names_largest_expert(tiny_cv_registry):
    store = MemoryStore.from_registry(tiny_cv_registry)
    router = build_cv_router(CvRouterConfig(n_experts=2, image_size=16))
    with pytest.raises(CapacityError) as err:
        Engine(router, store, 1000, "cv")
    assert "largest" in str(err.value) or "expert" in str(err.value)


def test_expert_count_mismatch(tiny_cv_registry):
    store = MemoryStore.from_registry(tiny_cv_registry)
    router = build_cv_router(CvRouterConfig(n_experts=3, image_size=16))
    with pytest.raises(ConfigError):
        Engine(router, store, 1 << 30, "cv")


def test_registry_digest_binding(tiny_cv_registry):
    store = MemoryStore.from_registry(tiny_cv_registry)
    router = build_cv_router(CvRouterConfig(n_experts=2, image_size=16))
    with pytest.raises(IntegrityError):
        Engine(router, store, 1 << 30, "cv", registry_digest="f" * 64)


def test_serving_transparency_bitwise_cv(tiny_cv_registry, tiny_cv_data):
    """Engine output must equal the direct expert forward pass, bitwise."""
    _, val = tiny_cv_data
    engine, _, _ = _cv_engine(tiny_cv_registry)
    for i in range(min(6, len(val))):
        out, record, _ = engine.infer(val.inputs[i])
        direct_model = tiny_cv_registry.materialized(record.chosen)
        with no_grad():
            direct = direct_model(Tensor(val.inputs[i][None])).data[0]
        assert np.array_equal(out, direct)


def test_serving_transparency_bitwise_nlp(tiny_nlp_registry, tiny_nlp_base, tiny_nlp_data):
    _, val = tiny_nlp_data
    store = MemoryStore.from_registry(tiny_nlp_registry)
    router = build_nlp_router(NlpRouterConfig(n_experts=3, d_model=32, context=32),
                              tiny_nlp_base.tok_emb.table, seed=0)
    router.eval()
    rb = sum(p.data.nbytes for p in router.parameters())
    cap = rb + max(store.byte_size(i) for i in store.ids()) + (1 << 20)
    engine = Engine(router, store, cap, "nlp")
    for i in range(4):
        out, record, _ = engine.infer(val.inputs[i])
        direct_model = tiny_nlp_registry.materialized(record.chosen)
        with no_grad():
            direct = direct_model(val.inputs[i][None]).data[0]
        assert np.array_equal(out, direct)


def test_single_residency_and_switch_accounting(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    engine, _, router = _cv_engine(tiny_cv_registry)
    # force alternation by steering the router head before each request
    for step in range(10):
        training.bias_final_layer(router, step % 2, 12.0)
        _, record, timing = engine.infer(val.inputs[step % len(val)])
        assert record.chosen == step % 2
        assert engine.residency.resident_id == record.chosen
        assert timing["switched"] == (step > 0 or step == 0)  # first load counts as switch-in
    assert engine.residency.load_count == 10
    assert engine.residency.switch_count == 9  # evictions, not the first load


def test_zero_switch_io_is_exactly_zero(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    engine, _, router = _cv_engine(tiny_cv_registry)
    training.bias_final_layer(router, 0, 12.0)  # everything routes to expert 0
    for i in range(8):
        _, _, timing = engine.infer(val.inputs[i % len(val)])
        if i > 0:
            assert timing["load_ms"] == 0.0
    s = engine.timing.summary()
    assert s["io_ms"] == 0.0 and s["io_pct"] == 0.0


def test_timing_ledger_warmup_and_identities(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    engine, _, _ = _cv_engine(tiny_cv_registry)
    with pytest.raises(ContractError):
        engine.timing.summary()
    for i in range(10):
        engine.infer(val.inputs[i % len(val)])
    s = engine.timing.summary()
    assert s["n_requests"] == 10 - serving.WARMUP_REQUESTS
    assert s["total_ms"] == pytest.approx(s["router_ms"] + s["io_ms"] + s["expert_ms"])
    assert s["total_pct"] == pytest.approx(s["router_pct"] + s["io_pct"])


def test_memory_report_accounting(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    engine, store, _ = _cv_engine(tiny_cv_registry)
    with pytest.raises(ContractError):
        engine.memory_report()
    engine.infer(val.inputs[0])
    rep = engine.memory_report()
    resident = rep["resident_expert_id"]
    # slow bytes = sum of non-resident expert files, exact
    want_slow = sum(store.byte_size(i) for i in store.ids() if i != resident)
    assert rep["slow_resident_bytes"] == want_slow
    assert rep["fast_used_bytes"] == (rep["router_bytes"] + rep["resident_expert_bytes"]
                                      + rep["activation_high_water_bytes"])
    assert rep["fast_used_bytes"] <= rep["fast_capacity_bytes"]


def test_fast_peak_independent_of_registry_size(tiny_cv_base, tiny_cv_data, tiny_cv_registry):
    """Residency bound: peak fast memory with N experts equals the peak with 1
    (modulo which expert is resident)."""
    _, val = tiny_cv_data
    engine2, _, router2 = _cv_engine(tiny_cv_registry)
    training.bias_final_layer(router2, 0, 12.0)
    for i in range(4):
        engine2.infer(val.inputs[i])
    rep2 = engine2.memory_report()
    assert rep2["resident_expert_bytes"] == engine2.expert_bytes[0]
    assert rep2["fast_used_bytes"] - rep2["router_bytes"] <= (
        max(engine2.expert_bytes.values()) + rep2["activation_high_water_bytes"])


def test_mutated_blob_refused_at_load(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    store = MemoryStore.from_registry(tiny_cv_registry)
    blob = bytearray(store._blobs[1])
    blob[-1] ^= 0x01
    store._blobs[1] = bytes(blob)
    router = build_cv_router(CvRouterConfig(n_experts=2, image_size=16), seed=0)
    training.bias_final_layer(router, 1, 12.0)
    router.eval()
    rb = sum(p.data.nbytes for p in router.parameters())
    cap = rb + max(store.byte_size(i) for i in store.ids()) + (1 << 20)
    engine = Engine(router, store, cap, "cv")
    with pytest.raises(IntegrityError):
        engine.infer(val.inputs[0])


def test_serve_init_binds_registry(tmp_path, tiny_cv_registry):
    from moqe.router import save_router
    router = build_cv_router(CvRouterConfig(n_experts=2, image_size=16), seed=0)
    p = tmp_path / "r.moqe"
    store = MemoryStore.from_registry(tiny_cv_registry)
    save_router(p, router, registry_digest=store.registry_digest())
    engine = serve_init(p, store, 1 << 30)
    assert engine.kind == "cv"
    save_router(p, router, registry_digest="0" * 64)
    with pytest.raises(IntegrityError):
        serve_init(p, store, 1 << 30)


def test_bench_report_fields(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    engine, _, _ = _cv_engine(tiny_cv_registry)
    workload = [val.inputs[i] for i in range(4)]
    report = bench(engine, workload, repetitions=2, seed=0)
    for key in ("model", "expert_ms", "router_ms", "io_ms", "io_pct", "total_pct",
                "switch_count", "memory", "n_requests"):
        assert key in report
    assert report["model"] == "cv"
    assert report["n_requests"] == 2 * 4  # warmup excluded
    with pytest.raises(ContractError):
        bench(engine, [], repetitions=1)


def test_infer_shape_contracts(tiny_cv_registry):
    engine, _, _ = _cv_engine(tiny_cv_registry)
    with pytest.raises(ContractError):
        engine.infer(np.zeros((2, 4, 16, 16)))
