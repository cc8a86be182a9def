"""Optimizers, schedules, and the two-stage quantization-aware pipeline.

Stage 1 trains under noise injection with all quantization hyper-parameters
(boundaries, bit-widths) learnable and budget penalties active. At the
transition every bit-width is frozen at its rounded value and the quantizers
switch to quant mode; stage 2 fine-tunes weights and boundaries with
straight-through gradients and refreshed batch-norm statistics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngStream, Tensor, mse, softmax_cross_entropy, zero_grads
from .data import Dataset
from .models import Network
from .penalties import ResourceTarget, avg_bit_penalty, bops_penalty, total_loss

__all__ = [
    "TrainConfig",
    "cosine_warmup_lr",
    "sgd_momentum_step",
    "adam_step",
    "Optimizer",
    "evaluate",
    "evaluate_quant",
    "train_two_stage",
    "train_fp",
    "train_lsq",
    "bn_recalibrate",
    "write_metrics_csv",
    "write_metrics_jsonl",
]


@dataclass
class TrainConfig:
    stage1_epochs: int = 25
    stage2_epochs: int = 3
    optimizer: str = "sgd_momentum"
    lr: float = 0.04
    weight_decay: float = 1e-5
    warmup_epochs: int = 3
    eta_min_ratio: float = 1e-3
    batch_size: int = 64
    targets: list[ResourceTarget] = field(default_factory=list)
    seed: int = 0
    quant_lr: float | None = None  # optional separate LR for alpha/bit params
    # Full-precision warm phase before the noise stage; the pipeline is a
    # fine-tuning procedure and collapses when bits crash on random weights.
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.eta_min_ratio <= 1:
            raise ValueError(f"eta_min_ratio must be in (0, 1], got {self.eta_min_ratio}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def cosine_warmup_lr(step: int, total: int, warmup: int, lr: float, eta_min_ratio: float) -> float:
    """Linear 0 -> lr ramp over ``warmup`` steps, then cosine decay to
    lr * eta_min_ratio at the final step."""
    if warmup >= total:
        raise ValueError(f"warmup ({warmup}) must be < total ({total})")
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    if step < warmup:
        return lr * step / warmup
    span = total - 1 - warmup
    t = (step - warmup) / span if span > 0 else 1.0
    return lr * (eta_min_ratio + (1.0 - eta_min_ratio) * 0.5 * (1.0 + math.cos(math.pi * t)))


def sgd_momentum_step(param: Tensor, grad: np.ndarray, state: dict, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    if weight_decay:
        grad = grad + weight_decay * param.data
    v = state.get("v")
    v = grad.copy() if v is None else momentum * v + grad
    state["v"] = v
    param.data -= (lr * v).astype(np.float32)


def adam_step(param: Tensor, grad: np.ndarray, state: dict, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    if weight_decay:
        grad = grad + weight_decay * param.data
    b1, b2 = betas
    t = state.get("t", 0) + 1
    m = state.get("m", np.zeros_like(param.data)) * b1 + (1 - b1) * grad
    v = state.get("v", np.zeros_like(param.data)) * b2 + (1 - b2) * grad * grad
    state.update(t=t, m=m, v=v)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)


class Optimizer:
    """Named-parameter optimizer; state survives parameter-list rebuilds."""

    def __init__(self, kind: str, weight_decay: float = 0.0):
        if kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.weight_decay = weight_decay
        self.states: dict[str, dict] = {}
        # (name, tensor, decay?, lr_scale)
        self.entries: list[tuple[str, Tensor, bool, float]] = []

    def set_params(self, decayable, no_decay, no_decay_lr_scale: float = 1.0) -> None:
        self.entries = [(n, t, True, 1.0) for n, t in decayable]
        self.entries += [(n, t, False, no_decay_lr_scale) for n, t in no_decay]

    def params(self):
        return [t for _, t, _, _ in self.entries]

    def step(self, lr: float) -> None:
        for name, t, decay, scale in self.entries:
            if t.grad is None:
                continue
            state = self.states.setdefault(name, {})
            wd = self.weight_decay if decay else 0.0
            if self.kind == "sgd_momentum":
                sgd_momentum_step(t, t.grad, state, lr * scale, weight_decay=wd)
            else:
                adam_step(t, t.grad, state, lr * scale, weight_decay=wd)


def _task_loss(net: Network, x: np.ndarray, y: np.ndarray, rng, training: bool) -> Tensor:
    logits = net.forward(x, rng=rng, training=training)
    if np.issubdtype(y.dtype, np.integer):
        return softmax_cross_entropy(logits, y)
    return mse(logits, Tensor(y))


def _metric(logits: np.ndarray, y: np.ndarray) -> tuple[str, float]:
    if np.issubdtype(y.dtype, np.integer):
        return "accuracy", float((logits.argmax(axis=1) == y).mean())
    return "mse", float(((logits - y) ** 2).mean())


def evaluate(net: Network, dataset: Dataset, split: str = "val", batch_size: int = 256) -> dict:
    """Loss and task metric over a split with the quantizers as configured."""
    losses, hits, count = 0.0, [], 0
    outs, ys = [], []
    for xb, yb in dataset.batches(split, batch_size):
        logits = net.forward(xb, rng=None, training=False)
        outs.append(logits.data)
        ys.append(yb)
        if np.issubdtype(yb.dtype, np.integer):
            losses += softmax_cross_entropy(logits, yb).item() * len(yb)
        else:
            losses += mse(logits, Tensor(yb)).item() * len(yb)
        count += len(yb)
    name, value = _metric(np.concatenate(outs), np.concatenate(ys))
    return {"loss": losses / count, "metric_name": name, "metric": value}


def evaluate_quant(net: Network, dataset: Dataset, split: str = "val") -> dict:
    """Evaluate in quant mode (the deployable condition); modes are restored."""
    saved = [(qp, qp.mode) for _, qp in net.quantizers()]
    net.set_mode("quant")
    out = evaluate(net, dataset, split)
    for qp, mode in saved:
        qp.mode = mode
    return out


def _penalties(net: Network, targets: list[ResourceTarget]):
    terms = []
    for t in targets:
        if t.kind == "bops":
            entries = net.bops_entries()
            if entries:
                terms.append(bops_penalty(entries, t))
        else:
            bits, elems = net.penalty_bits(t.kind)
            if bits:
                terms.append(avg_bit_penalty(bits, elems, t))
    return terms


def _epoch_record(net, epoch, stage, train_loss, penalty, eval_out) -> dict:
    return {
        "epoch": epoch,
        "stage": stage,
        "split": "val",
        "loss": eval_out["loss"],
        "train_loss": train_loss,
        "penalty": penalty,
        "metric_name": eval_out["metric_name"],
        "metric": eval_out["metric"],
        "bits": net.bit_summary(),
        "alphas": net.alpha_summary(),
    }


def _run_stage(net, dataset, cfg: TrainConfig, opt: Optimizer, *, epochs, stage,
               epoch0, step0, total_steps, targets, training_mode, data_rng,
               noise_rng, metrics):
    steps_per_epoch = max(1, math.ceil(len(dataset.splits["train"]) / cfg.batch_size))
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    step = step0
    for e in range(epochs):
        loss_sum = pen_sum = 0.0
        n_batches = 0
        for xb, yb in dataset.batches("train", cfg.batch_size, data_rng):
            lr_t = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.lr, cfg.eta_min_ratio)
            rng = noise_rng if training_mode == "noise" else None
            task = _task_loss(net, xb, yb, rng, training=True)
            terms = _penalties(net, targets) if targets else []
            loss = total_loss(task, terms)
            zero_grads(opt.params())
            loss.backward()
            opt.step(lr_t)
            loss_sum += task.item()
            pen_sum += sum(t.item() for t in terms)
            n_batches += 1
            step += 1
        eval_out = evaluate_quant(net, dataset)
        metrics.append(
            _epoch_record(net, epoch0 + e, stage, loss_sum / n_batches,
                          pen_sum / n_batches, eval_out)
        )
    return step


def train_two_stage(net: Network, dataset: Dataset, cfg: TrainConfig):
    """Noise-injection pre-training, bit freeze, then quant-mode fine-tuning.

    Returns (metrics, summary): per-epoch records plus a summary holding the
    transition and final quant-mode evaluations, frozen bit allocation, and
    resource totals. With ``stage2_epochs == 0`` the transition evaluation is
    still emitted after freezing. ``pretrain_epochs > 0`` prepends a
    full-precision warm phase on its own cosine schedule.
    """
    metrics: list[dict] = []
    if cfg.pretrain_epochs > 0:
        pre_cfg = TrainConfig(
            stage1_epochs=cfg.pretrain_epochs, stage2_epochs=0,
            optimizer=cfg.optimizer, lr=cfg.lr, weight_decay=cfg.weight_decay,
            warmup_epochs=min(cfg.warmup_epochs, max(cfg.pretrain_epochs - 1, 0)),
            eta_min_ratio=cfg.eta_min_ratio, batch_size=cfg.batch_size, seed=cfg.seed,
        )
        train_fp(net, dataset, pre_cfg, restore_quantizers=True, metrics_out=metrics)

    data_rng = RngStream(cfg.seed, 2)
    noise_rng = RngStream(cfg.seed, 3)
    xs, _ = dataset.split("train")
    net.calibrate(xs[: cfg.batch_size])
    net.set_bn_tracking(True)
    net.set_mode("noise")

    steps_per_epoch = max(1, math.ceil(len(dataset.splits["train"]) / cfg.batch_size))
    total_steps = max(1, (cfg.stage1_epochs + cfg.stage2_epochs) * steps_per_epoch)
    lr_scale = (cfg.quant_lr / cfg.lr) if cfg.quant_lr else 1.0

    opt = Optimizer(cfg.optimizer, cfg.weight_decay)
    opt.set_params(net.parameters(), net.quantizer_params(include_bits=True), lr_scale)

    step = _run_stage(
        net, dataset, cfg, opt, epochs=cfg.stage1_epochs, stage="stage1",
        epoch0=cfg.pretrain_epochs, step0=0, total_steps=total_steps,
        targets=cfg.targets, training_mode="noise",
        data_rng=data_rng, noise_rng=noise_rng, metrics=metrics,
    )

    # Transition: freeze every bit at its rounded value, switch to quant mode.
    for _, qp in net.quantizers():
        qp.bit_frozen = True
    net.set_mode("quant")
    transition = evaluate_quant(net, dataset)
    metrics.append(
        _epoch_record(net, cfg.pretrain_epochs + cfg.stage1_epochs, "transition",
                      float("nan"), 0.0, transition)
    )

    opt.set_params(net.parameters(), net.quantizer_params(include_bits=False), lr_scale)
    _run_stage(
        net, dataset, cfg, opt, epochs=cfg.stage2_epochs, stage="stage2",
        epoch0=cfg.pretrain_epochs + cfg.stage1_epochs, step0=step,
        total_steps=total_steps, targets=[],
        training_mode="quant", data_rng=data_rng, noise_rng=noise_rng, metrics=metrics,
    )

    final = evaluate_quant(net, dataset)
    summary = {
        "transition_metric": transition["metric"],
        "transition_loss": transition["loss"],
        "final_metric": final["metric"],
        "final_loss": final["loss"],
        "metric_name": final["metric_name"],
        "bits": net.bit_summary(),
        "alphas": net.alpha_summary(),
        "avg_bits_weight": net.avg_bits("weight"),
        "avg_bits_activation": net.avg_bits("activation"),
        "total_bops": net.total_bops(),
    }
    return metrics, summary


def train_fp(net: Network, dataset: Dataset, cfg: TrainConfig,
             restore_quantizers: bool = False,
             metrics_out: list[dict] | None = None) -> float:
    """Train with all quantizers disabled; returns the final train loss.

    The same schedule and optimizer settings as the two-stage pipeline apply
    (stage budgets are pooled into one stage). By default the quantizer
    enable flags are left off so the network keeps evaluating in full
    precision; pass ``restore_quantizers=True`` when using this as the
    pre-training step before quantization-aware fine-tuning.
    """
    saved_flags = [(lay.quantize_w, lay.quantize_a) for lay in net.layers]
    for layer in net.layers:
        layer.quantize_w = layer.quantize_a = False
    data_rng = RngStream(cfg.seed, 2)
    net.set_bn_tracking(True)
    epochs = cfg.stage1_epochs + cfg.stage2_epochs
    steps_per_epoch = max(1, math.ceil(len(dataset.splits["train"]) / cfg.batch_size))
    total_steps = max(1, epochs * steps_per_epoch)
    opt = Optimizer(cfg.optimizer, cfg.weight_decay)
    opt.set_params(net.parameters(), [])
    metrics: list[dict] = [] if metrics_out is None else metrics_out
    _run_stage(
        net, dataset, cfg, opt, epochs=epochs, stage="fp", epoch0=0, step0=0,
        total_steps=total_steps, targets=[], training_mode="fp",
        data_rng=data_rng, noise_rng=None, metrics=metrics,
    )
    if restore_quantizers:
        for layer, (qw, qa) in zip(net.layers, saved_flags):
            layer.quantize_w, layer.quantize_a = qw, qa
    return metrics[-1]["train_loss"] if metrics else float("nan")


def train_lsq(net: Network, dataset: Dataset, cfg: TrainConfig, bit: float = 4.0):
    """Straight-through baseline: quant mode from scratch at a fixed bit-width.

    Every quantizer's bit is pinned to ``bit`` and frozen; boundaries and
    weights train with the quant-mode straight-through gradients for the full
    epoch budget. This is the comparison arm for robustness and landscape
    studies.
    """
    xs, _ = dataset.split("train")
    net.calibrate(xs[: cfg.batch_size])
    for _, qp in net.quantizers():
        qp.set_bit(bit)
        qp.bit_frozen = True
    net.set_mode("quant")
    net.set_bn_tracking(True)
    data_rng = RngStream(cfg.seed, 2)
    epochs = cfg.stage1_epochs + cfg.stage2_epochs
    steps_per_epoch = max(1, math.ceil(len(dataset.splits["train"]) / cfg.batch_size))
    total_steps = max(1, epochs * steps_per_epoch)
    lr_scale = (cfg.quant_lr / cfg.lr) if cfg.quant_lr else 1.0
    opt = Optimizer(cfg.optimizer, cfg.weight_decay)
    opt.set_params(net.parameters(), net.quantizer_params(include_bits=False), lr_scale)
    metrics: list[dict] = []
    _run_stage(
        net, dataset, cfg, opt, epochs=epochs, stage="lsq", epoch0=0, step0=0,
        total_steps=total_steps, targets=[], training_mode="quant",
        data_rng=data_rng, noise_rng=None, metrics=metrics,
    )
    final = evaluate_quant(net, dataset)
    summary = {
        "final_metric": final["metric"],
        "final_loss": final["loss"],
        "metric_name": final["metric_name"],
        "bits": net.bit_summary(),
        "alphas": net.alpha_summary(),
    }
    return metrics, summary


def bn_recalibrate(net: Network, dataset: Dataset, n_batches: int,
                   batch_size: int = 64) -> None:
    """Recompute BN running stats as streaming averages; weights untouched."""
    bns = net.bn_layers()
    if not bns:
        return
    for bn in bns:
        bn.begin_recalibration()
    done = 0
    while done < n_batches:
        for xb, _ in dataset.batches("train", batch_size):
            if done >= n_batches:
                break
            net.forward(xb, rng=None, training=False, bn_mode="recal")
            done += 1


def _provenance_line(provenance: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in provenance.items())


def write_metrics_csv(records: list[dict], path, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layer_bits = sorted({k for r in records for k in r.get("bits", {})})
    layer_alphas = sorted({k for r in records for k in r.get("alphas", {})})
    cols = ["epoch", "stage", "split", "loss", "train_loss", "penalty", "metric_name", "metric"]
    cols += [f"bit.{k}" for k in layer_bits] + [f"alpha.{k}" for k in layer_alphas]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        if provenance:
            f.write(_provenance_line(provenance) + "\n")
        w = csv.writer(f)
        w.writerow(cols)
        for r in records:
            row = [r.get(c) for c in cols[:8]]
            row += [r.get("bits", {}).get(k) for k in layer_bits]
            row += [r.get("alphas", {}).get(k) for k in layer_alphas]
            w.writerow(row)
    tmp.replace(path)


def write_metrics_jsonl(records: list[dict], path, provenance: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        for r in records:
            out = dict(r)
            if provenance:
                out.update(provenance)
            f.write(json.dumps(out) + "\n")
    tmp.replace(path)
