"""Evaluation metrics: routing accuracy, routed task metrics, oracle bound."""

import numpy as np
import pytest

from moqe import metrics
from moqe.errors import ContractError
from moqe.experts import LabelSet, label_oracle
from moqe.router import CvRouterConfig, build_cv_router


def test_routing_accuracy_values_and_contracts():
    assert metrics.routing_accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        metrics.routing_accuracy([], [])
    with pytest.raises(ContractError):
        metrics.routing_accuracy([0], [0, 1])


def test_route_dataset_matches_manual_argmax(tiny_cv_data):
    _, val = tiny_cv_data
    router = build_cv_router(CvRouterConfig(n_experts=3, image_size=16), seed=0)
    router.eval()
    chosen, probs = metrics.route_dataset(router, val, batch_size=3)
    assert probs.shape == (len(val), 3)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.array_equal(chosen, probs.argmax(axis=1))


def test_routed_task_metric_cv_matches_per_expert_eval(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    from moqe.models import evaluate_accuracy
    for j in range(2):
        acc = metrics.routed_task_metric(tiny_cv_registry, val,
                                         np.full(len(val), j))
        want = evaluate_accuracy(tiny_cv_registry.materialized(j), val)
        assert acc == pytest.approx(want)


def test_routed_task_metric_nlp_is_perplexity(tiny_nlp_registry, tiny_nlp_data):
    _, val = tiny_nlp_data
    ppl = metrics.routed_task_metric(tiny_nlp_registry, val, np.zeros(len(val), dtype=int))
    from moqe.experts import per_sample_loss
    model = tiny_nlp_registry.materialized(0)
    want = np.exp(per_sample_loss(model, val.take(np.arange(len(val)))).mean())
    assert ppl == pytest.approx(want)


def test_upper_bound_dominates_single_experts(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    labels = label_oracle(tiny_cv_registry, val)
    ub = metrics.upper_bound_eval(tiny_cv_registry, val, labels)
    for j in range(len(tiny_cv_registry)):
        assert ub["loss"] <= labels.expert_loss(j) + 1e-15


def test_moqe_eval_report_structure(tiny_cv_registry, tiny_cv_data, tiny_cv_base):
    _, val = tiny_cv_data
    labels = label_oracle(tiny_cv_registry, val)
    router = build_cv_router(CvRouterConfig(n_experts=2, image_size=16), seed=0)
    router.eval()
    report = metrics.moqe_eval(router, tiny_cv_registry, val, labels,
                               base_model=tiny_cv_base)
    assert report["n_experts"] == 2
    assert len(report["per_expert"]) == 2
    assert report["gap_to_upper_bound"] >= -1e-12
    assert abs(sum(report["dispatch_fractions"]) - 1.0) < 1e-12
    assert "base" in report
    table = metrics.format_report_table(report)
    assert "oracle upper bound" in table and "routed mixture" in table
    assert "full-precision base" in table


def test_moqe_eval_registry_binding(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    labels = label_oracle(tiny_cv_registry, val)
    bad = LabelSet(labels.losses, labels.sample_digests, "0" * 64)
    router = build_cv_router(CvRouterConfig(n_experts=2, image_size=16), seed=0)
    with pytest.raises(ContractError):
        metrics.moqe_eval(router, tiny_cv_registry, val, bad)


def test_prob_histograms_partition(tiny_cv_data):
    _, val = tiny_cv_data
    probs = np.random.default_rng(0).dirichlet(np.ones(3), size=len(val))
    hists = metrics.prob_histograms(probs, val.subset_ids)
    assert sum(h["count"] for h in hists.values()) == len(val)
    for h in hists.values():
        assert abs(sum(h["mean_probs"]) - 1.0) < 1e-12
        assert h["mean_entropy"] >= 0


def test_slice_labels_prefix_consistency(tiny_cv_registry, tiny_cv_data):
    _, val = tiny_cv_data
    labels = label_oracle(tiny_cv_registry, val)
    sub = tiny_cv_registry.prefix(1)
    sliced = metrics.slice_labels(labels, 1, sub.registry_digest())
    assert sliced.losses.shape == (len(val), 1)
    assert np.array_equal(sliced.losses[:, 0], labels.losses[:, 0])
    assert np.all(sliced.j_star == 0)


def test_expert_count_sweep_requires_increasing_counts(tiny_cv_registry, tiny_cv_data):
    train, val = tiny_cv_data
    labels = label_oracle(tiny_cv_registry, train)
    vlabels = label_oracle(tiny_cv_registry, val)
    with pytest.raises(ContractError):
        metrics.expert_count_sweep(
            tiny_cv_registry, [2, 1], lambda n: None, train, labels, val, vlabels,
            val, vlabels, None)
