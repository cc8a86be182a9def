"""Pseudo-quantization operator with learnable clipping boundary and bit-width.

One :class:`QuantParams` instance fake-quantizes one tensor (a layer's weight
or input activation) in one of two modes:

* ``noise`` -- adds random pseudo-quantization noise whose magnitude tracks
  the step size, then truncates at the learnable boundary. Used during
  pre-training; everything (data path, boundary, bit-width) stays
  differentiable.
* ``quant`` -- rounds onto the level grid with the bit-width rounded to an
  integer and detached. Straight-through gradients reach the data and the
  boundary; the bit-width receives none.

The clipping boundary is kept positive through a softplus reparametrization
and the continuous bit-width lives in (2, 14) through ``2 + 12 * sigmoid``.

A ``minmax`` variant spans the tensor's observed min/max instead of a learned
boundary; it exists for ablation comparisons against the truncation operator.

Known discrepancy, by design: the noise model is Gaussian with *standard
deviation* delta/2 (matching the reference pseudo-code), not variance
delta/2; uniform noise U[-delta/2, delta/2] is available behind a switch.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    RngStream,
    Tensor,
    _needs_graph,
    _send,
    clamp,
    pow2,
    round_half_away,
    round_ste,
    sigmoid,
    softplus,
    softplus_inverse,
)

__all__ = [
    "QuantParams",
    "effective_alpha",
    "effective_bit",
    "step_size",
    "noise_forward",
    "quant_forward",
    "minmax_forward",
    "apply_quantizer",
    "set_mode",
    "quant_codes",
]

MODES = ("noise", "quant")
VARIANTS = ("truncation", "minmax")
NOISE_DISTS = ("gaussian", "uniform")
BIT_NOISE_POLICIES = ("inject", "ste")

BIT_LO, BIT_HI = 2.0, 14.0
NOISY_BIT_MAX = 16.0


class QuantParams:
    """Learnable per-tensor quantization state plus static policy flags.

    ``alpha_raw`` and ``bit_raw`` are the unbounded learnables; the effective
    boundary and bit-width are ``softplus(alpha_raw)`` and
    ``2 + 12 * sigmoid(bit_raw)``. ``n_elements`` weights this tensor's share
    in average-bit penalties.
    """

    def __init__(
        self,
        signed: bool,
        n_elements: int = 1,
        tensor_role: str = "activation",
        alpha_init: float = 1.0,
        bit_raw_init: float = 0.0,
        noise_dist: str = "gaussian",
        bit_noise_policy: str = "inject",
        variant: str = "truncation",
        mode: str = "noise",
    ):
        if n_elements < 1:
            raise ValueError(f"n_elements must be >= 1, got {n_elements}")
        if noise_dist not in NOISE_DISTS:
            raise ValueError(f"unknown noise_dist {noise_dist!r}")
        if bit_noise_policy not in BIT_NOISE_POLICIES:
            raise ValueError(f"unknown bit_noise_policy {bit_noise_policy!r}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.alpha_raw = Tensor(np.float32(softplus_inverse(alpha_init)), requires_grad=True)
        self.bit_raw = Tensor(np.float32(bit_raw_init), requires_grad=True)
        self.signed = bool(signed)
        self.noise_dist = noise_dist
        self.bit_noise_policy = bit_noise_policy
        self.variant = variant
        self.mode = mode
        self.n_elements = int(n_elements)
        self.tensor_role = tensor_role
        self.bit_frozen = False
        # Analysis-only multiplier on the effective boundary; 1.0 in training.
        self.alpha_scale = 1.0
        # Min-max span frozen at export; None means recompute per forward.
        self.frozen_span: tuple[float, float] | None = None

    def set_alpha(self, alpha: float) -> None:
        self.alpha_raw.data = np.float32(softplus_inverse(alpha))

    def set_bit(self, bit: float) -> None:
        """Point the raw parameter at an exact effective bit-width."""
        if not BIT_LO < bit < BIT_HI:
            raise ValueError(f"effective bit must lie in ({BIT_LO}, {BIT_HI}), got {bit}")
        frac = (bit - BIT_LO) / (BIT_HI - BIT_LO)
        self.bit_raw.data = np.float32(np.log(frac / (1.0 - frac)))

    def alpha_value(self) -> float:
        return float(np.logaddexp(0.0, self.alpha_raw.data)) * self.alpha_scale

    def bit_value(self) -> float:
        return float(BIT_LO + (BIT_HI - BIT_LO) / (1.0 + np.exp(-self.bit_raw.data)))

    def rounded_bit(self) -> int:
        return int(round_half_away(np.float64(self.bit_value())))

    def learnables(self):
        return [("alpha_raw", self.alpha_raw), ("bit_raw", self.bit_raw)]

    def state(self) -> dict:
        return {
            "alpha_raw": float(self.alpha_raw.data),
            "bit_raw": float(self.bit_raw.data),
            "signed": self.signed,
            "noise_dist": self.noise_dist,
            "bit_noise_policy": self.bit_noise_policy,
            "variant": self.variant,
            "mode": self.mode,
            "n_elements": self.n_elements,
            "tensor_role": self.tensor_role,
            "bit_frozen": self.bit_frozen,
            "frozen_span": list(self.frozen_span) if self.frozen_span else None,
        }

    def load_state(self, s: dict) -> None:
        self.alpha_raw.data = np.float32(s["alpha_raw"])
        self.bit_raw.data = np.float32(s["bit_raw"])
        self.signed = bool(s["signed"])
        self.noise_dist = s["noise_dist"]
        self.bit_noise_policy = s["bit_noise_policy"]
        self.variant = s["variant"]
        self.mode = s["mode"]
        self.n_elements = int(s["n_elements"])
        self.tensor_role = s["tensor_role"]
        self.bit_frozen = bool(s["bit_frozen"])
        span = s.get("frozen_span")
        self.frozen_span = (float(span[0]), float(span[1])) if span else None


def set_mode(params: QuantParams, mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    params.mode = mode


def effective_alpha(params: QuantParams) -> Tensor:
    """Positive clipping boundary, differentiable w.r.t. alpha_raw."""
    a = softplus(params.alpha_raw)
    if params.alpha_scale != 1.0:
        a = a * params.alpha_scale
    return a


def effective_bit(params: QuantParams) -> Tensor:
    """Continuous bit-width in (2, 14), differentiable w.r.t. bit_raw."""
    return BIT_LO + (BIT_HI - BIT_LO) * sigmoid(params.bit_raw)


def step_size(alpha, bit, signed: bool) -> Tensor:
    """Spacing between adjacent levels for a boundary ``alpha`` and bit-width.

    Unsigned grids tile [0, alpha] with 2^bit levels; signed grids tile
    [-alpha, alpha] symmetrically (zero exact) with 2^bit - 1 levels, so the
    spacing is alpha / (2^(bit-1) - 1) and needs bit >= 2.
    """
    alpha_t = alpha if isinstance(alpha, Tensor) else Tensor(np.float32(alpha))
    bit_t = bit if isinstance(bit, Tensor) else Tensor(np.float32(bit))
    if np.any(alpha_t.data <= 0):
        raise ValueError(f"step_size requires alpha > 0, got {alpha_t.data}")
    if np.any(bit_t.data < 1):
        raise ValueError(f"step_size requires bit >= 1, got {bit_t.data}")
    if signed:
        if np.any(bit_t.data < 2):
            raise ValueError(
                f"signed step_size requires bit >= 2 (no positive level below), got {bit_t.data}"
            )
        return alpha_t / (pow2(bit_t - 1.0) - 1.0)
    return alpha_t / (pow2(bit_t) - 1.0)


def _truncate(x_tilde: Tensor, alpha: Tensor, lo_mult: float) -> Tensor:
    """Clip to [lo_mult * alpha, alpha]; truncated elements route grad to alpha.

    Forward passes untruncated elements through bit-exactly. Backward matches
    the reparametrized form clamp(x/alpha, lo_mult, 1) * alpha: gradient 1 to
    x inside the boundary (inclusive), and +/-1 to alpha on elements saturated
    at the upper/lower boundary.
    """
    a = float(alpha.data)
    lo = lo_mult * a
    out = Tensor(np.clip(x_tilde.data, lo, a))
    if _needs_graph(x_tilde, alpha):
        out._parents = (x_tilde, alpha)
        inside = ((x_tilde.data >= lo) & (x_tilde.data <= a)).astype(np.float32)
        boundary_w = np.where(x_tilde.data > a, 1.0, 0.0) + np.where(
            x_tilde.data < lo, lo_mult, 0.0
        )

        def bw(g, flow):
            _send(flow, x_tilde, g * inside)
            ga = np.asarray((g * boundary_w).sum(), dtype=np.float32).reshape(alpha.shape)
            _send(flow, alpha, ga)

        out._backward = bw
    return out


def noise_forward(
    x: Tensor,
    params: QuantParams,
    rng: RngStream | None = None,
    *,
    z: np.ndarray | None = None,
    z_bit: float | None = None,
) -> Tensor:
    """Add pseudo-quantization noise scaled by the step size, then truncate.

    The noise samples ``z`` (per element) and ``z_bit`` (one draw for the
    bit-width) are constants for differentiation; pass them explicitly to
    freeze the randomness, otherwise they are drawn from ``rng``. Gradients
    reach x (inside the truncation range), alpha_raw (through both the noise
    magnitude and the truncation boundary) and bit_raw (through the step
    size).
    """
    if params.mode != "noise":
        raise ValueError(f"noise_forward called in mode {params.mode!r}")
    alpha = effective_alpha(params)
    bit = effective_bit(params)
    if params.bit_noise_policy == "inject":
        if z_bit is None:
            z_bit = float(rng.normal())
        bit_floor = 2.0 if params.signed else 1.0
        bit_n = clamp(bit + 0.5 * z_bit, bit_floor, NOISY_BIT_MAX)
    else:
        bit_n = round_ste(bit)
    delta = step_size(alpha, bit_n, params.signed)
    if z is None:
        shape = x.shape
        z = rng.normal(shape) if params.noise_dist == "gaussian" else rng.uniform(shape)
    z = np.asarray(z, dtype=np.float32)
    if params.noise_dist == "gaussian":
        noise = delta * Tensor(0.5 * z)
    else:
        noise = delta * Tensor(z - 0.5)
    lo_mult = -1.0 if params.signed else 0.0
    return _truncate(x + noise, alpha, lo_mult)


def _grid_range(bit: int, signed: bool) -> tuple[int, int, int]:
    """(lo_index, hi_index, step_divisor) of the integer level grid."""
    if signed:
        if bit < 2:
            raise ValueError(f"signed grid requires bit >= 2, got {bit}")
        half = 2 ** (bit - 1) - 1
        return -half, half, half
    return 0, 2**bit - 1, 2**bit - 1


def _fixed_grid_quant(x: Tensor, delta: Tensor, lo: int, hi: int) -> Tensor:
    """Round x onto {lo..hi} * delta; level decisions evaluate in float64.

    Backward: straight-through to x inside the clip range (inclusive); the
    step size receives round(v) - v inside and the saturated level index
    outside, summed over elements.
    """
    d = float(delta.data)
    if d == 0.0:
        out = Tensor(np.zeros_like(x.data))
        if _needs_graph(x, delta):
            out._parents = (x, delta)
            out._backward = lambda g, flow: None
        return out
    v = x.data.astype(np.float64) / d
    u = round_half_away(np.clip(v, lo, hi))
    out = Tensor((u * d).astype(np.float32))
    if _needs_graph(x, delta):
        out._parents = (x, delta)
        inside = ((v >= lo) & (v <= hi)).astype(np.float32)
        dw = (u - v * inside).astype(np.float32)

        def bw(g, flow):
            _send(flow, x, g * inside)
            gd = np.asarray((g * dw).sum(), dtype=np.float32).reshape(delta.shape)
            _send(flow, delta, gd)

        out._backward = bw
    return out


def quant_forward(x: Tensor, params: QuantParams) -> Tensor:
    """Fake-quantize x onto the level grid spanned by the learned boundary.

    The bit-width is rounded half away from zero and detached; only the
    boundary keeps a gradient path (through the step size). Idempotent: on
    on-grid inputs the output is bit-identical.
    """
    b = params.rounded_bit()
    lo, hi, div = _grid_range(b, params.signed)
    alpha = effective_alpha(params)
    delta = alpha / float(div)
    return _fixed_grid_quant(x, delta, lo, hi)


def minmax_forward(
    x: Tensor,
    bit,
    mode: str,
    *,
    rng: RngStream | None = None,
    z: np.ndarray | None = None,
    frozen_span: tuple[float, float] | None = None,
) -> Tensor:
    """Linear quantization spanning the tensor's min/max, no learned boundary.

    The span statistics are detached (no gradient) and recomputed each call
    unless ``frozen_span`` pins them. Quant mode rounds onto the span grid
    with straight-through gradients to x; noise mode adds z * delta / 2
    without truncation, keeping the bit-width differentiable.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    bit_t = bit if isinstance(bit, Tensor) else Tensor(np.float32(bit))
    if frozen_span is not None:
        lo_v, hi_v = float(frozen_span[0]), float(frozen_span[1])
    else:
        lo_v, hi_v = float(x.data.min()), float(x.data.max())

    if mode == "noise":
        delta = (hi_v - lo_v) / (pow2(bit_t) - 1.0)
        if z is None:
            z = rng.normal(x.shape)
        return x + delta * Tensor(0.5 * np.asarray(z, dtype=np.float32))

    b = int(round_half_away(np.float64(bit_t.data)))
    if hi_v == lo_v:
        return x + 0.0  # degenerate span: pass through unchanged
    n_lv = 2**b
    d = (np.float64(hi_v) - np.float64(lo_v)) / (n_lv - 1)
    v = (x.data.astype(np.float64) - np.float64(lo_v)) / d
    u = round_half_away(np.clip(v, 0, n_lv - 1))
    out = Tensor((u * d + np.float64(lo_v)).astype(np.float32))
    if _needs_graph(x):
        out._parents = (x,)
        inside = ((v >= 0) & (v <= n_lv - 1)).astype(np.float32)
        out._backward = lambda g, flow: _send(flow, x, g * inside)
    return out


def apply_quantizer(
    x: Tensor,
    params: QuantParams,
    rng: RngStream | None = None,
    *,
    z: np.ndarray | None = None,
    z_bit: float | None = None,
) -> Tensor:
    """Run the quantizer in its current mode and variant."""
    if params.variant == "minmax":
        if params.mode == "noise":
            bit = effective_bit(params)
            if params.bit_noise_policy == "inject":
                if z_bit is None:
                    z_bit = float(rng.normal())
                bit = clamp(bit + 0.5 * z_bit, 1.0, NOISY_BIT_MAX)
            else:
                bit = round_ste(bit)
            return minmax_forward(x, bit, "noise", rng=rng, z=z, frozen_span=params.frozen_span)
        return minmax_forward(
            x, float(params.rounded_bit()), "quant", frozen_span=params.frozen_span
        )
    if params.mode == "noise":
        return noise_forward(x, params, rng, z=z, z_bit=z_bit)
    return quant_forward(x, params)


def quant_codes(x: np.ndarray, params: QuantParams) -> tuple[np.ndarray, float, int, int]:
    """Integer level indices of x under the current quant grid.

    Reconstruction ``float32(codes * delta64)`` is bit-identical to
    ``quant_forward``; delta64 is the float64 step derived from the float32
    boundary.
    """
    b = params.rounded_bit()
    lo, hi, div = _grid_range(b, params.signed)
    alpha32 = np.float32(np.logaddexp(0.0, params.alpha_raw.data)) * np.float32(
        params.alpha_scale
    )
    delta32 = np.float32(alpha32 / np.float32(div))
    d = float(delta32)
    v = np.asarray(x, dtype=np.float64) / d
    codes = round_half_away(np.clip(v, lo, hi)).astype(np.int64)
    return codes, d, lo, hi
