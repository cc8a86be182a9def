"""Differentiable resource penalties tying bit-widths to a budget.

Two budget kinds are supported: an element-weighted average bit-width pulled
toward a target through a Huber loss, and a total bit-operations (BOPs)
budget expressed as a normalized ratio. Both are exactly zero at the target,
two-sided (being under budget is penalized too), and scale linearly in
lambda.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, huber

__all__ = ["ResourceTarget", "LayerCost", "avg_bit_penalty", "layer_bops", "bops_penalty", "total_loss"]

TARGET_KINDS = ("avg_bit_weight", "avg_bit_activation", "bops")


@dataclass
class ResourceTarget:
    """A budget: average bits (weight or activation) or total BOPs."""

    kind: str
    target: float
    lam: float = 1.0
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.target <= 0:
            raise ValueError(f"target must be > 0, got {self.target}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")


@dataclass
class LayerCost:
    """Static per-layer cost counts at the configured input resolution."""

    macs: int
    n_weight_elems: int
    n_act_elems: int

    def __post_init__(self):
        if min(self.macs, self.n_weight_elems, self.n_act_elems) < 1:
            raise ValueError(f"layer cost counts must be >= 1, got {self}")


def avg_bit_penalty(bits: list[Tensor], elems: list[int], target: ResourceTarget) -> Tensor:
    """lambda * huber(weighted-average-bits - target).

    ``bits`` are the differentiable effective bit-widths; ``elems`` their
    element counts. Gradient flows back to every bit_raw.
    """
    if not bits or len(bits) != len(elems):
        raise ValueError(
            f"avg_bit_penalty needs matching nonempty lists, got {len(bits)} bits / {len(elems)} elems"
        )
    total = float(sum(elems))
    avg = bits[0] * (elems[0] / total)
    for b, e in zip(bits[1:], elems[1:]):
        avg = avg + b * (e / total)
    return target.lam * huber(avg - target.target, target.huber_delta)


def layer_bops(cost: LayerCost, bit_w, bit_a) -> Tensor:
    """Bit-operations of one layer: MACs x weight bits x activation bits."""
    return (bit_w * bit_a) * float(cost.macs)


def bops_penalty(layers: list[tuple[LayerCost, Tensor, Tensor]], target: ResourceTarget) -> Tensor:
    """lambda * huber(total BOPs / target - 1).

    Normalizing by the target keeps the Huber threshold scale-free across
    networks.
    """
    if not layers:
        raise ValueError("bops_penalty needs a nonempty layer list")
    if target.target <= 0:
        raise ValueError(f"BOPs target must be > 0, got {target.target}")
    total = layer_bops(*layers[0])
    for entry in layers[1:]:
        total = total + layer_bops(*entry)
    ratio = total * (1.0 / target.target)
    return target.lam * huber(ratio - 1.0, target.huber_delta)


def total_loss(task_loss: Tensor, penalties: list[Tensor]) -> Tensor:
    """Task loss plus all penalty terms."""
    out = task_loss
    for p in penalties:
        out = out + p
    return out
