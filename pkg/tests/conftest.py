"""Shared fixtures.

The session-scoped "suite" fixtures reproduce the shipped heterogeneous
configuration once (trained base model, five quantized experts, oracle
labels) and are shared by the integration and acceptance tests. Unit tests
use the small fixtures instead.
"""

import numpy as np
import pytest

from moqe import data as data_mod, experts, metrics, models, quant, router as router_mod, training

# Shipped suite: four activation-aware int4 experts, each calibrated on the
# subsets whose class signal lives in one image channel, plus an
# error-feedback int4 expert calibrated on everything (used by count sweeps).
SUITE_EXPERTS = [
    (quant.QuantSpec("activation_aware", 4, calib_samples=128), [0, 3], "aa03"),
    (quant.QuantSpec("activation_aware", 4, calib_samples=128), [1, 4], "aa14"),
    (quant.QuantSpec("activation_aware", 4, calib_samples=128), [2, 5], "aa25"),
    (quant.QuantSpec("activation_aware", 4, calib_samples=128), [6], "aa6"),
    (quant.QuantSpec("error_feedback", 4, calib_samples=256), None, "ef-all"),
]

ROUTER_TRAIN_CONFIG = dict(epochs=15, base_lr=2e-3, batch_size=16, grad_accum=2,
                           lr_mode="staged", weight_decay=0.0)


def build_suite_registry(base, train):
    registry = experts.ExpertRegistry()
    for spec, subsets, label in SUITE_EXPERTS:
        if subsets is None:
            calib = train
        else:
            calib = train.take(np.nonzero(np.isin(train.subset_ids, subsets))[0])
        registry.register(quant.quantize_model(base, spec, calib=calib,
                                               meta={"label": label}))
    return registry


@pytest.fixture(scope="session")
def cv_data():
    full = data_mod.generate_cv_dataset(120, n_subsets=7, seed=0)
    return data_mod.split_train_val(full, 0.25, 0)


@pytest.fixture(scope="session")
def cv_base(cv_data):
    train, _ = cv_data
    model = models.CvBaseModel(seed=0)
    models.train_base(model, train, 18, 0, batch_size=32)
    return model


@pytest.fixture(scope="session")
def cv_registry(cv_base, cv_data):
    train, _ = cv_data
    return build_suite_registry(cv_base, train)


@pytest.fixture(scope="session")
def cv_labels(cv_registry, cv_data):
    train, val = cv_data
    return (experts.label_oracle(cv_registry, train),
            experts.label_oracle(cv_registry, val))


@pytest.fixture(scope="session")
def cv_suite4(cv_registry, cv_labels):
    """The 4-expert routed suite: prefix registry plus re-sliced labels."""
    train_labels, val_labels = cv_labels
    reg4 = cv_registry.prefix(4)
    digest = reg4.registry_digest()
    return (reg4,
            metrics.slice_labels(train_labels, 4, digest),
            metrics.slice_labels(val_labels, 4, digest))


@pytest.fixture(scope="session")
def router_runs(cv_data, cv_suite4):
    """Five routers trained on the 4-expert suite with seeds 0..4."""
    train, val = cv_data
    reg4, tl4, vl4 = cv_suite4
    cfg = training.TrainConfig(**ROUTER_TRAIN_CONFIG)
    runs = []
    for seed in range(5):
        router = router_mod.build_cv_router(
            router_mod.CvRouterConfig(n_experts=4), seed=seed)
        result = training.train_router(router, train, tl4, val, vl4, cfg, seed=seed)
        chosen, probs = metrics.route_dataset(router, val)
        runs.append({
            "seed": seed,
            "router": router,
            "result": result,
            "chosen": chosen,
            "probs": probs,
            "usage": np.bincount(chosen, minlength=4) / len(val),
        })
    return runs


# -- small fixtures for fast unit tests ---------------------------------------


@pytest.fixture(scope="session")
def tiny_cv_data():
    full = data_mod.generate_cv_dataset(10, n_subsets=2, seed=1, image_size=16)
    return data_mod.split_train_val(full, 0.25, 1)


@pytest.fixture(scope="session")
def tiny_cv_base(tiny_cv_data):
    train, _ = tiny_cv_data
    model = models.CvBaseModel(
        models.CvModelConfig(image_size=16, widths=(8, 16, 32)), seed=1)
    models.train_base(model, train, 2, 1, batch_size=8)
    return model


@pytest.fixture(scope="session")
def tiny_cv_registry(tiny_cv_base, tiny_cv_data):
    train, _ = tiny_cv_data
    registry = experts.ExpertRegistry()
    registry.register(quant.quantize_model(
        tiny_cv_base, quant.QuantSpec("rtn_per_tensor", 8), meta={"label": "rtn8"}))
    registry.register(quant.quantize_model(
        tiny_cv_base, quant.QuantSpec("activation_aware", 4, calib_samples=8),
        calib=train, meta={"label": "aa4"}))
    return registry


@pytest.fixture(scope="session")
def tiny_nlp_data():
    full = data_mod.generate_nlp_dataset(6, context=32, doc_len=140, n_subsets=3, seed=2)
    return data_mod.split_train_val(full, 0.25, 2)


@pytest.fixture(scope="session")
def tiny_nlp_base(tiny_nlp_data):
    train, _ = tiny_nlp_data
    model = models.LmBaseModel(
        models.LmModelConfig(d_model=32, n_heads=4, n_layers=1, context=32), seed=2)
    models.train_base(model, train, 2, 2, lr=3e-3, batch_size=16)
    return model


@pytest.fixture(scope="session")
def tiny_nlp_registry(tiny_nlp_base, tiny_nlp_data):
    train, _ = tiny_nlp_data
    registry = experts.ExpertRegistry()
    registry.register(quant.quantize_model(
        tiny_nlp_base, quant.QuantSpec("rtn_per_tensor", 4), meta={"label": "rtn4"}))
    registry.register(quant.quantize_model(
        tiny_nlp_base, quant.QuantSpec("affine_per_channel", 4), meta={"label": "apc4"}))
    registry.register(quant.quantize_model(
        tiny_nlp_base, quant.QuantSpec("blockwise", 8, block_size=16),
        meta={"label": "bw8"}))
    return registry
