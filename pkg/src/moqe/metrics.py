"""Evaluation: routing accuracy, routed task metrics, oracle upper bound, sweeps."""

from __future__ import annotations

import numpy as np

from . import data as data_mod, tensor as T, training
from .errors import ContractError
from .experts import LabelSet, per_sample_loss
from .tensor import Tensor, no_grad


def routing_accuracy(chosen, j_star):
    """Fraction of samples routed to the oracle-optimal expert."""
    chosen = np.asarray(chosen)
    j_star = np.asarray(j_star)
    if chosen.size == 0:
        raise ContractError("routing accuracy of an empty set is undefined")
    if chosen.shape != j_star.shape:
        raise ContractError("chosen/oracle length mismatch")
    return float((chosen == j_star).mean())


def route_dataset(router, dataset, features=None, batch_size=256):
    """Route every sample; returns (chosen ids [N], probabilities [N, E])."""
    if features is None:
        features = lambda x: Tensor(np.asarray(x, dtype=np.float64))
    router.eval()
    n = len(dataset)
    probs = np.empty((n, router.n_experts))
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        with no_grad():
            logits = router(features(dataset.take(idx).inputs))
        probs[idx] = T.softmax(logits).data
    # argmax with ties resolving to the lowest expert id
    chosen = probs.argmax(axis=1)
    return chosen, probs


def routed_task_metric(registry, dataset, chosen, batch_size=64):
    """Task metric when each sample is served by its assigned expert.

    cv: top-1 accuracy; nlp: perplexity pooled over all target tokens.
    """
    chosen = np.asarray(chosen)
    if dataset.kind == data_mod.CV_KIND:
        hits = 0
        for j in np.unique(chosen):
            idx = np.nonzero(chosen == j)[0]
            model = registry.materialized(int(j))
            for start in range(0, len(idx), batch_size):
                batch = dataset.take(idx[start : start + batch_size])
                with no_grad():
                    logits = model(Tensor(batch.inputs)).data
                hits += int((logits.argmax(axis=1) == batch.targets).sum())
        return hits / len(dataset)
    # nlp: every sequence has the same target length, so the token-pooled
    # mean equals the mean of per-sequence means
    total = 0.0
    for j in np.unique(chosen):
        idx = np.nonzero(chosen == j)[0]
        model = registry.materialized(int(j))
        for start in range(0, len(idx), batch_size):
            batch = dataset.take(idx[start : start + batch_size])
            total += per_sample_loss(model, batch).sum()
    return float(np.exp(total / len(dataset)))


def upper_bound_eval(registry, dataset, labels):
    """Loss and task metric when every sample gets its oracle-optimal expert."""
    j_star = labels.j_star
    return {
        "loss": labels.oracle_loss(),
        "metric": routed_task_metric(registry, dataset, j_star),
    }


def prob_histograms(probs, subset_ids):
    """Per-subset mean routing probabilities and mean routing entropy."""
    probs = np.asarray(probs)
    out = {}
    ent = -(probs * np.log(np.clip(probs, 1e-12, None))).sum(axis=1)
    for sid in sorted(int(s) for s in np.unique(subset_ids)):
        mask = subset_ids == sid
        out[sid] = {
            "mean_probs": probs[mask].mean(axis=0).tolist(),
            "mean_entropy": float(ent[mask].mean()),
            "count": int(mask.sum()),
        }
    return out


def moqe_eval(router, registry, dataset, labels, features=None, base_model=None):
    """Full evaluation report for a routed expert suite on one dataset."""
    if labels.registry_digest != registry.registry_digest():
        raise ContractError("labels were computed against a different registry")
    if len(labels) != len(dataset):
        raise ContractError("labels do not cover the dataset")
    chosen, probs = route_dataset(router, dataset, features=features)
    j_star = labels.j_star
    moqe_loss = float(labels.losses[np.arange(len(dataset)), chosen].mean())
    oracle = upper_bound_eval(registry, dataset, labels)
    per_expert = []
    for j in range(len(registry)):
        per_expert.append({
            "id": j,
            "label": registry.get(j).meta.get("label", registry.get(j).spec.scheme),
            "loss": labels.expert_loss(j),
            "metric": routed_task_metric(registry, dataset, np.full(len(dataset), j)),
        })
    report = {
        "kind": dataset.kind,
        "n_samples": len(dataset),
        "n_experts": len(registry),
        "routing_accuracy": routing_accuracy(chosen, j_star),
        "per_expert": per_expert,
        "moqe": {
            "loss": moqe_loss,
            "metric": routed_task_metric(registry, dataset, chosen),
        },
        "oracle": oracle,
        "gap_to_upper_bound": moqe_loss - oracle["loss"],
        "dispatch_fractions": (np.bincount(chosen, minlength=len(registry)) / len(dataset)).tolist(),
        "oracle_fractions": (np.bincount(j_star, minlength=len(registry)) / len(dataset)).tolist(),
        "prob_histograms": prob_histograms(probs, dataset.subset_ids),
        "winner_per_subset": _winners(labels, dataset),
    }
    if base_model is not None:
        with no_grad():
            base_losses = []
            for start in range(0, len(dataset), 64):
                batch = dataset.take(np.arange(start, min(start + 64, len(dataset))))
                base_losses.append(per_sample_loss(base_model, batch))
        base_loss = float(np.concatenate(base_losses).mean())
        if dataset.kind == data_mod.CV_KIND:
            from .models import evaluate_accuracy

            base_metric = evaluate_accuracy(base_model, dataset)
        else:
            base_metric = float(np.exp(base_loss))
        report["base"] = {"loss": base_loss, "metric": base_metric}
    return report


def _winners(labels, dataset):
    out = {}
    for sid in sorted(int(s) for s in np.unique(dataset.subset_ids)):
        mask = dataset.subset_ids == sid
        out[sid] = int(labels.losses[mask].mean(axis=0).argmin())
    return out


def format_report_table(report):
    """Fixed-width text table: one row per expert, then routed mix, oracle, base."""
    metric_name = "acc" if report["kind"] == data_mod.CV_KIND else "ppl"
    lines = [f"{'system':<28}{'loss':>10}{metric_name:>10}"]
    for row in report["per_expert"]:
        lines.append(f"expert[{row['id']}] {row['label']:<17}{row['loss']:>10.4f}{row['metric']:>10.4f}")
    lines.append(f"{'routed mixture':<28}{report['moqe']['loss']:>10.4f}{report['moqe']['metric']:>10.4f}")
    lines.append(f"{'oracle upper bound':<28}{report['oracle']['loss']:>10.4f}{report['oracle']['metric']:>10.4f}")
    if "base" in report:
        lines.append(f"{'full-precision base':<28}{report['base']['loss']:>10.4f}{report['base']['metric']:>10.4f}")
    lines.append(f"routing accuracy: {report['routing_accuracy']:.4f}   "
                 f"gap to upper bound: {report['gap_to_upper_bound']:.4f}")
    return "\n".join(lines)


def slice_labels(labels, n_experts, registry_digest):
    """Labels restricted to the first n experts (re-derived argmin, same losses)."""
    return LabelSet(labels.losses[:, :n_experts].copy(), labels.sample_digests, registry_digest)


def expert_count_sweep(registry, counts, router_builder, train_data, train_labels,
                       val_data, val_labels, eval_data, eval_labels, config,
                       seed=0, features=None):
    """Retrain a fresh router per expert count; report quality vs suite size.

    counts must be increasing and the sub-suites are id-prefixes, so each
    larger suite strictly contains the smaller one.
    """
    if sorted(counts) != list(counts):
        raise ContractError("expert counts must be increasing")
    results = []
    for n in counts:
        sub = registry.prefix(n)
        sub_digest = sub.registry_digest()
        t_labels = slice_labels(train_labels, n, sub_digest)
        v_labels = slice_labels(val_labels, n, sub_digest)
        e_labels = slice_labels(eval_labels, n, sub_digest)
        router = router_builder(n)
        result = training.train_router(router, train_data, t_labels, val_data, v_labels,
                                       config, seed=seed, features=features)
        chosen, _ = route_dataset(router, eval_data, features=features)
        moqe_loss = float(e_labels.losses[np.arange(len(eval_data)), chosen].mean())
        results.append({
            "n_experts": n,
            "val_ra": result.best_val_ra,
            "eval_ra": routing_accuracy(chosen, e_labels.j_star),
            "moqe_loss": moqe_loss,
            "oracle_loss": e_labels.oracle_loss(),
            "gap": moqe_loss - e_labels.oracle_loss(),
        })
    return results
