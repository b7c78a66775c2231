"""Pipeline command-line interface.

Each stage reads/writes artifacts under a run directory and records content
digests in ``state.json``; downstream stages verify their inputs against
those digests before running. Exit codes: 2 configuration error, 3 missing
or stale upstream artifact, 4 numeric failure, 1 other pipeline errors.
"""

from __future__ import annotations

import json
import os
import sys
import urllib.request

import click
import numpy as np

from . import checkpoint, data as data_mod, metrics, models, quant, router as router_mod, serving, training
from .config import dump_resolved, load_run_config
from .errors import (ConfigError, DependencyError, MoqeError, NumericError)
from .experts import ExpertRegistry, LabelSet, label_oracle
from .models import CvBaseModel, CvModelConfig, LmBaseModel, LmModelConfig, load_base_model, save_base_model, train_base
from .router import CvRouterConfig, NlpRouterConfig, build_cv_router, build_nlp_router, load_router, save_router

STATE_FILE = "state.json"


# -- run-directory state -------------------------------------------------------


def _state_path(run_dir):
    return os.path.join(run_dir, STATE_FILE)


def _load_state(run_dir):
    path = _state_path(run_dir)
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        return json.load(f)


def _save_state(run_dir, state):
    with open(_state_path(run_dir), "w") as f:
        json.dump(state, f, indent=2, sort_keys=True)


def _require(state, keys, stage):
    for key in keys:
        if key not in state:
            raise DependencyError(f"stage '{stage}' needs '{key}' from an earlier stage; "
                                  f"run the pipeline in order")


def _load_split(run_dir, state, split):
    ds = data_mod.load_dataset(os.path.join(run_dir, "data", split, "manifest.json"))
    if ds.digest() != state[f"data_{split}_digest"]:
        raise DependencyError(f"{split} data on disk does not match the recorded digest")
    return ds


def _load_registry(run_dir, state):
    reg = ExpertRegistry.load_index(os.path.join(run_dir, "registry", "registry.json"))
    if reg.registry_digest() != state["registry_digest"]:
        raise DependencyError("expert registry does not match the recorded digest")
    return reg


def _load_labels(run_dir, state, split):
    labels = LabelSet.load(os.path.join(run_dir, f"labels_{split}.moql"))
    if labels.registry_digest != state["registry_digest"]:
        raise DependencyError(f"{split} labels were computed against a different registry")
    return labels


def _shared_embedding(base):
    return base.tok_emb.table


# -- stages ---------------------------------------------------------------------


def stage_gen_data(cfg, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    dump_resolved(cfg, os.path.join(run_dir, "config.resolved.json"))
    d = cfg.data
    if d.kind == data_mod.CV_KIND:
        full = data_mod.generate_cv_dataset(d.n_per_subset, n_subsets=d.n_subsets,
                                            seed=cfg.seed, image_size=d.image_size)
    else:
        full = data_mod.generate_nlp_dataset(d.docs_per_style, context=d.context,
                                             doc_len=d.doc_len, n_subsets=d.n_subsets,
                                             seed=cfg.seed)
    train, val = data_mod.split_train_val(full, d.val_fraction, cfg.seed)
    state = _load_state(run_dir)
    for split, ds in (("train", train), ("val", val)):
        manifest = data_mod.save_dataset(ds, os.path.join(run_dir, "data", split))
        # digest of the on-disk canonical form (save groups samples by subset)
        state[f"data_{split}_digest"] = data_mod.load_dataset(manifest).digest()
    state["kind"] = d.kind
    _save_state(run_dir, state)
    click.echo(f"generated {len(train)} train / {len(val)} val samples ({d.kind})")


def stage_train_base(cfg, run_dir):
    state = _load_state(run_dir)
    _require(state, ["data_train_digest"], "train-base")
    train = _load_split(run_dir, state, "train")
    if cfg.data.kind == data_mod.CV_KIND:
        widths = tuple(cfg.base.widths) if cfg.base.widths else CvModelConfig().widths
        model = CvBaseModel(CvModelConfig(image_size=cfg.data.image_size, widths=widths),
                            seed=cfg.seed)
    else:
        model = LmBaseModel(LmModelConfig(d_model=cfg.base.d_model, n_heads=cfg.base.n_heads,
                                          n_layers=cfg.base.n_layers, context=cfg.data.context),
                            seed=cfg.seed)
    history = train_base(model, train, cfg.base.epochs, cfg.seed, lr=cfg.base.lr,
                         batch_size=cfg.base.batch_size,
                         log=lambda rec: click.echo(f"base epoch {rec['epoch']}: "
                                                    f"loss {rec['train_loss']:.4f}"))
    path = os.path.join(run_dir, "base.moqe")
    state["base_digest"] = save_base_model(path, model, seed=cfg.seed)
    _save_state(run_dir, state)
    click.echo(f"base model saved ({history[-1]['train_loss']:.4f} final loss)")


def stage_quantize(cfg, run_dir):
    state = _load_state(run_dir)
    _require(state, ["base_digest", "data_train_digest"], "quantize")
    base = load_base_model(os.path.join(run_dir, "base.moqe"), expect_digest=state["base_digest"])
    train = _load_split(run_dir, state, "train")
    registry = ExpertRegistry()
    for i, ecfg in enumerate(cfg.experts):
        spec = ecfg.to_spec()
        calib = None
        if spec.scheme in quant.CALIB_SCHEMES:
            if ecfg.calib_subsets:
                idx = np.nonzero(np.isin(train.subset_ids, ecfg.calib_subsets))[0]
                calib = train.take(idx)
            else:
                calib = train
        meta = {"label": ecfg.label or f"{spec.scheme}-{spec.bits}b",
                "calib_subsets": ecfg.calib_subsets}
        expert = quant.quantize_model(base, spec, calib=calib, meta=meta)
        registry.register(expert)
        click.echo(f"expert {i}: {meta['label']} ({expert.byte_size()} B)")
    registry.save_index(os.path.join(run_dir, "registry"))
    state["registry_digest"] = registry.registry_digest()
    _save_state(run_dir, state)
    click.echo(f"registered {len(registry)} experts")


def stage_label(cfg, run_dir):
    state = _load_state(run_dir)
    _require(state, ["registry_digest", "data_train_digest", "data_val_digest"], "label")
    registry = _load_registry(run_dir, state)
    for split in ("train", "val"):
        ds = _load_split(run_dir, state, split)
        labels = label_oracle(registry, ds)
        labels.save(os.path.join(run_dir, f"labels_{split}.moql"))
        ra_counts = np.bincount(labels.j_star, minlength=len(registry))
        click.echo(f"{split}: oracle winners {ra_counts.tolist()}, "
                   f"oracle loss {labels.oracle_loss():.4f}")
    _save_state(run_dir, state)


def stage_train_router(cfg, run_dir):
    state = _load_state(run_dir)
    _require(state, ["registry_digest", "base_digest"], "train-router")
    registry = _load_registry(run_dir, state)
    train = _load_split(run_dir, state, "train")
    val = _load_split(run_dir, state, "val")
    t_labels = _load_labels(run_dir, state, "train")
    v_labels = _load_labels(run_dir, state, "val")
    features = None
    if cfg.data.kind == data_mod.CV_KIND:
        router = build_cv_router(
            CvRouterConfig(n_experts=len(registry), image_size=cfg.data.image_size),
            seed=cfg.seed)
    else:
        base = load_base_model(os.path.join(run_dir, "base.moqe"),
                               expect_digest=state["base_digest"])
        router = build_nlp_router(
            NlpRouterConfig(n_experts=len(registry), d_model=base.config.d_model,
                            context=cfg.data.context),
            _shared_embedding(base), seed=cfg.seed)
        features = training.embedding_features(base)
    tc = cfg.train.to_train_config(cfg.data.kind)
    result = training.train_router(router, train, t_labels, val, v_labels, tc,
                                   seed=cfg.seed, features=features,
                                   log_path=os.path.join(run_dir, "router_history.jsonl"))
    state["router_digest"] = save_router(
        os.path.join(run_dir, "router.moqe"), router,
        registry_digest=registry.registry_digest(),
        extra={"best_epoch": result.best_epoch, "best_val_ra": result.best_val_ra})
    _save_state(run_dir, state)
    click.echo(f"router trained: best val routing accuracy {result.best_val_ra:.4f} "
               f"(epoch {result.best_epoch})")


def _load_engine_parts(cfg, run_dir, state):
    registry = _load_registry(run_dir, state)
    base = load_base_model(os.path.join(run_dir, "base.moqe"), expect_digest=state["base_digest"])
    emb = _shared_embedding(base) if cfg.data.kind == data_mod.NLP_KIND else None
    router, _ = load_router(os.path.join(run_dir, "router.moqe"), shared_embedding=emb,
                            expect_registry_digest=registry.registry_digest())
    features = training.embedding_features(base) if emb is not None else None
    return registry, base, router, features


def stage_eval(cfg, run_dir):
    state = _load_state(run_dir)
    _require(state, ["router_digest", "data_val_digest"], "eval")
    registry, base, router, features = _load_engine_parts(cfg, run_dir, state)
    val = _load_split(run_dir, state, "val")
    v_labels = _load_labels(run_dir, state, "val")
    report = metrics.moqe_eval(router, registry, val, v_labels, features=features,
                               base_model=base)
    with open(os.path.join(run_dir, "eval_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    click.echo(metrics.format_report_table(report))


def stage_bench(cfg, run_dir):
    state = _load_state(run_dir)
    _require(state, ["router_digest", "data_val_digest"], "bench")
    registry, base, router, _ = _load_engine_parts(cfg, run_dir, state)
    store = serving.DiskStore(os.path.join(run_dir, "registry", "registry.json"))
    router_bytes = sum(p.data.nbytes for p in router.parameters())
    capacity = cfg.bench.fast_capacity_bytes or (
        router_bytes + max(store.byte_size(i) for i in store.ids()) + (64 << 20))
    engine = serving.Engine(router, store, capacity, cfg.data.kind)
    val = _load_split(run_dir, state, "val")
    workload = [val.inputs[i] for i in range(min(cfg.bench.workload_size, len(val)))]
    report = serving.bench(engine, workload, repetitions=cfg.bench.repetitions, seed=cfg.seed)
    with open(os.path.join(run_dir, "bench.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    click.echo(f"router {report['router_ms']:.3f} ms  io {report['io_ms']:.3f} ms  "
               f"expert {report['expert_ms']:.3f} ms  (io {report['io_pct']:.1f}% of total, "
               f"{report['switch_count']} switches)")


_STAGES = [
    ("gen-data", stage_gen_data),
    ("train-base", stage_train_base),
    ("quantize", stage_quantize),
    ("label", stage_label),
    ("train-router", stage_train_router),
    ("eval", stage_eval),
    ("bench", stage_bench),
]


# -- command wiring -----------------------------------------------------------------


def _run(stage_fn, config_path, run_dir):
    try:
        cfg = load_run_config(config_path)
        stage_fn(cfg, run_dir)
    except ConfigError as e:
        click.echo(f"configuration error: {e}", err=True)
        sys.exit(2)
    except DependencyError as e:
        click.echo(f"dependency error: {e}", err=True)
        sys.exit(3)
    except NumericError as e:
        click.echo(f"numeric error: {e}", err=True)
        sys.exit(4)
    except MoqeError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Train, quantize, route, evaluate, and serve a quantized-expert suite."""


def _stage_command(name, fn):
    @main.command(name=name)
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True))
    @click.option("--run-dir", required=True, type=click.Path())
    def cmd(config_path, run_dir):
        _run(fn, config_path, run_dir)

    cmd.__doc__ = fn.__doc__
    return cmd


for _name, _fn in _STAGES:
    _stage_command(_name, _fn)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
def pipeline(config_path, run_dir):
    """Run every stage in order."""
    for _, fn in _STAGES:
        _run(fn, config_path, run_dir)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
@click.option("--capacity-bytes", default=None, type=int)
def serve(config_path, run_dir, host, port, capacity_bytes):
    """Start the HTTP inference service for a completed run."""

    def _start(cfg, rd):
        import uvicorn

        from .service import create_app

        state = _load_state(rd)
        _require(state, ["router_digest", "registry_digest"], "serve")
        registry, base, router, _ = _load_engine_parts(cfg, rd, state)
        store = serving.DiskStore(os.path.join(rd, "registry", "registry.json"))
        router_bytes = sum(p.data.nbytes for p in router.parameters())
        capacity = capacity_bytes or (
            router_bytes + max(store.byte_size(i) for i in store.ids()) + (64 << 20))
        engine = serving.Engine(router, store, capacity, cfg.data.kind)
        uvicorn.run(create_app(engine), host=host, port=port)

    _run(_start, config_path, run_dir)


@main.command(name="remote-infer")
@click.option("--url", required=True)
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="val")
@click.option("--index", default=0, type=int)
def remote_infer(url, run_dir, split, index):
    """Send one sample from a run's dataset to a running service."""
    state = _load_state(run_dir)
    ds = _load_split(run_dir, state, split)
    if state.get("kind") == data_mod.CV_KIND:
        payload = {"image": ds.inputs[index].tolist()}
    else:
        payload = {"tokens": ds.inputs[index].tolist()}
    req = urllib.request.Request(url.rstrip("/") + "/infer",
                                 data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        click.echo(resp.read().decode())


if __name__ == "__main__":
    main()
