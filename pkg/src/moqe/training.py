"""Router fine-tuning against oracle labels with the balance-regularized loss."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn, tensor as T
from .errors import ConfigError, ContractError, TrainingError
from .tensor import Tensor
from .util import substream


@dataclass
class BalanceStats:
    """Per-batch routing statistics.

    P is the mean routing probability per expert (differentiable); F is the
    hard dispatch fraction from argmax counts and is treated as a constant.
    """

    P: Tensor
    F: np.ndarray
    n: np.ndarray
    B: int

    @classmethod
    def from_probs(cls, probs):
        b, n_experts = probs.shape
        if b == 0:
            raise ContractError("balance stats need a non-empty batch")
        chosen = probs.data.argmax(axis=1)
        counts = np.bincount(chosen, minlength=n_experts)
        return cls(P=T.tmean(probs, axis=0), F=counts / b, n=counts, B=b)


def balance_loss(stats):
    """N * sum_i P_i * F_i; differentiable through P only."""
    if stats.B == 0:
        raise ContractError("empty batch")
    n_experts = stats.F.shape[0]
    return T.tsum(stats.P * Tensor(stats.F)) * float(n_experts)


def usage_sigma(usage_counts):
    """Relative standard deviation of usage frequencies (mean is always 1/N)."""
    counts = np.asarray(usage_counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    f = counts / total
    return float(f.std() / f.mean())


def alpha_schedule(alpha0, epoch, epochs, decay_start_fraction):
    """alpha0 until the decay start, then linear to exactly 0 at the last epoch."""
    if epochs <= 1:
        return 0.0
    d = decay_start_fraction * (epochs - 1)
    if epoch <= d:
        return alpha0
    return alpha0 * (epochs - 1 - epoch) / (epochs - 1 - d)


def alpha_dyn(alpha0, sigma_t, epoch, epochs, decay_start_fraction=0.8):
    """Balance weight alpha_sched(epoch) * (1 + sigma_t)."""
    if sigma_t < 0:
        raise ContractError("sigma_t must be non-negative")
    return alpha_schedule(alpha0, epoch, epochs, decay_start_fraction) * (1.0 + sigma_t)


def composite_loss(router_logits, oracle_labels, stats, alpha_eff):
    """Cross-entropy to the oracle expert plus the weighted balance term.

    Returns (loss tensor, ce value, balance value).
    """
    labels = np.asarray(oracle_labels)
    n_experts = router_logits.shape[-1]
    if labels.size and labels.max() >= n_experts:
        raise IndexError(f"oracle label {labels.max()} out of range [0, {n_experts})")
    ce = T.cross_entropy(router_logits, labels)
    bal = balance_loss(stats)
    loss = ce if alpha_eff == 0.0 else ce + bal * float(alpha_eff)
    return loss, ce.item(), bal.item()


@dataclass
class TrainConfig:
    alpha0: float = 0.02
    epochs: int = 10
    base_lr: float = 5e-5
    warmup_steps: int = 0
    batch_size: int = 8
    grad_accum: int = 6
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    warm_epochs: int = 2
    warm_fraction: float = 0.3
    early_stop_patience: int = 7
    decay_start_fraction: float = 0.8
    lr_mode: str = "cosine"  # "cosine" (text) or "staged" (image)

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ConfigError("alpha0 must be >= 0")
        if not 0 < self.warm_fraction <= 1:
            raise ConfigError("warm_fraction must be in (0, 1]")
        if self.lr_mode not in ("cosine", "staged"):
            raise ConfigError(f"unknown lr_mode {self.lr_mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_ra: float
    final_usage: np.ndarray  # dispatch fractions on the validation set


def _val_metrics(router, features, val_data, val_labels, batch_size=256):
    """Routing accuracy, mean routed loss, and dispatch fractions on the val set."""
    n = len(val_data)
    chosen = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        with T.no_grad():
            logits = router(features(val_data.take(idx).inputs))
        chosen[idx] = logits.data.argmax(axis=1)
    j_star = val_labels.j_star
    ra = float((chosen == j_star).mean())
    routed_loss = float(val_labels.losses[np.arange(n), chosen].mean())
    usage = np.bincount(chosen, minlength=router.n_experts) / n
    return ra, routed_loss, usage


def train_router(router, train_data, train_labels, val_data, val_labels, config,
                 seed=0, features=None, log_path=None):
    """Fine-tune a router against fixed oracle labels; experts never see gradients.

    features maps raw batch inputs to the router's input representation
    (identity for images; the shared-embedding lookup for text).
    """
    if features is None:
        features = lambda x: Tensor(np.asarray(x, dtype=np.float64))
    if len(train_labels) != len(train_data) or len(val_labels) != len(val_data):
        raise ContractError("labels do not cover the dataset")
    j_star_all = train_labels.j_star
    params = router.parameters()
    opt = nn.AdamW(params, lr=config.base_lr, weight_decay=config.weight_decay,
                   max_grad_norm=config.max_grad_norm)

    warm_n = max(config.batch_size, int(len(train_data) * config.warm_fraction))
    warm_idx = substream(seed, "curriculum").permutation(len(train_data))[:warm_n]

    # total optimizer steps for the cosine schedule
    def epoch_size(epoch):
        return warm_n if epoch < config.warm_epochs else len(train_data)

    steps_per_epoch = [int(np.ceil(epoch_size(e) / config.batch_size / config.grad_accum))
                       for e in range(config.epochs)]
    total_steps = max(1, sum(steps_per_epoch))

    history = []
    best = {"ra": -1.0, "state": None, "epoch": -1}
    bad_epochs = 0
    global_step = 0
    log_f = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            router.train()
            idx_pool = warm_idx if epoch < config.warm_epochs else np.arange(len(train_data))
            order = substream(seed, f"router-epoch-{epoch}").permutation(idx_pool)
            usage_counts = np.zeros(router.n_experts)
            epoch_losses, epoch_ce, epoch_bal = [], [], []
            alpha_eff = alpha_schedule(config.alpha0, epoch, config.epochs,
                                       config.decay_start_fraction)
            micro = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                if len(idx) < 2:
                    continue
                batch = train_data.take(idx)
                logits = router(features(batch.inputs))
                probs = T.softmax(logits)
                stats = BalanceStats.from_probs(probs)
                usage_counts += stats.n
                sigma_t = usage_sigma(usage_counts)
                alpha_eff = alpha_dyn(config.alpha0, sigma_t, epoch, config.epochs,
                                      config.decay_start_fraction)
                loss, ce, bal = composite_loss(logits, j_star_all[idx], stats, alpha_eff)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"router loss diverged at step {global_step}",
                                        step=global_step)
                (loss * (1.0 / config.grad_accum)).backward()
                epoch_losses.append(loss.item())
                epoch_ce.append(ce)
                epoch_bal.append(bal)
                micro += 1
                if micro % config.grad_accum == 0 or start + config.batch_size >= len(order):
                    if config.lr_mode == "cosine":
                        opt.lr = nn.lr_schedule(min(global_step, total_steps), total_steps,
                                                config.warmup_steps, config.base_lr)
                        opt.lr = max(opt.lr, 1e-12)
                    else:
                        opt.lr = nn.staged_lr(epoch, config.base_lr)
                    opt.step()
                    opt.zero_grad()
                    global_step += 1
            router.eval()
            ra, routed_loss, usage = _val_metrics(router, features, val_data, val_labels)
            sigma_epoch = usage_sigma(usage_counts)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                "train_ce": float(np.mean(epoch_ce)) if epoch_ce else None,
                "train_balance": float(np.mean(epoch_bal)) if epoch_bal else None,
                "val_ra": ra,
                "val_task_loss": routed_loss,
                "dispatch_fractions": usage.tolist(),
                "sigma_t": sigma_epoch,
                "alpha_eff": alpha_dyn(config.alpha0, sigma_epoch, epoch, config.epochs,
                                       config.decay_start_fraction),
                "lr": opt.lr,
            }
            history.append(record)
            if log_f:
                log_f.write(json.dumps(record) + "\n")
            if ra > best["ra"]:
                best = {"ra": ra, "state": copy.deepcopy(router.state_dict()), "epoch": epoch}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.early_stop_patience:
                    break
    finally:
        if log_f:
            log_f.close()
    if best["state"] is not None:
        router.load_state_dict(best["state"])
    router.eval()
    _, _, final_usage = _val_metrics(router, features, val_data, val_labels)
    return TrainResult(history=history, best_epoch=best["epoch"], best_val_ra=best["ra"],
                       final_usage=final_usage)


def bias_final_layer(router, expert_id, magnitude):
    """Adversarial initialization: push all initial routing toward one expert."""
    out = router.out if hasattr(router, "out") else router.mlp2
    out.bias.data[:] = 0.0
    out.bias.data[expert_id] = magnitude


def embedding_features(base_model):
    """Feature fn for text routers: one shared gather, detached from the base."""

    def features(token_ids):
        with T.no_grad():
            emb = base_model.embed(np.asarray(token_ids))
        return Tensor(emb.data)

    return features
