"""Small trainable networks instrumented with per-tensor quantizers.

Every quantizable layer is a :class:`QuantLayer` bundling a weight, a signed
weight quantizer, and an unsigned quantizer for its input activation (inputs
follow non-negative ReLU outputs or [0, 1] data). Biases and batch-norm
parameters are never quantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .penalties import LayerCost
from .quantizer import QuantParams, apply_quantizer, effective_bit, set_mode

__all__ = [
    "QuantLayer",
    "BatchNorm",
    "Network",
    "TwoBranchNet",
    "NetworkSpec",
    "build_network",
    "build_mlp",
    "build_small_cnn",
    "build_tiny_regressor",
    "constructed_sensitivity_pair",
]


class BatchNorm:
    """Per-channel batch normalization with explicitly gated running stats.

    ``bn_mode`` per forward: "batch" normalizes with batch statistics and,
    when tracking is enabled, folds them into the running stats by EMA;
    "eval" uses the running stats; "recal" uses batch statistics while
    accumulating a plain streaming average into the running stats (no EMA).
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum
        self.track = False
        self._recal_count = 0

    def begin_recalibration(self) -> None:
        self.running_mean = np.zeros_like(self.running_mean)
        self.running_var = np.zeros_like(self.running_var)
        self._recal_count = 0

    def forward(self, x: Tensor, bn_mode: str) -> Tensor:
        conv = x.data.ndim == 4
        axes = (0, 2, 3) if conv else (0,)
        shape = (1, -1, 1, 1) if conv else (1, -1)
        if bn_mode in ("batch", "recal"):
            mu = ad.tmean(x, axis=axes, keepdims=True)
            var = ad.tmean(ad.mul(x - mu, x - mu), axis=axes, keepdims=True)
            batch_mean = mu.data.reshape(-1)
            batch_var = var.data.reshape(-1)
            if bn_mode == "recal":
                k = self._recal_count
                self.running_mean = (self.running_mean * k + batch_mean) / (k + 1)
                self.running_var = (self.running_var * k + batch_var) / (k + 1)
                self._recal_count += 1
            elif self.track:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * batch_mean
                self.running_var = (1 - m) * self.running_var + m * batch_var
            xn = (x - mu) / ad.sqrt(var + self.eps)
        else:
            mu_c = Tensor(self.running_mean.reshape(shape))
            sd_c = Tensor(np.sqrt(self.running_var + self.eps).reshape(shape))
            xn = (x - mu_c) / sd_c
        return xn * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class QuantLayer:
    """A dense or conv2d layer with input-activation and weight quantizers."""

    def __init__(
        self,
        kind: str,
        weight: np.ndarray,
        bias: np.ndarray | None,
        cost: LayerCost,
        stride: int = 1,
        pad: int = 0,
        bn: BatchNorm | None = None,
        act: bool = False,
        pool: int = 0,
        weight_variant: str = "truncation",
    ):
        if kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {kind!r}")
        self.kind = kind
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True) if bias is not None else None
        self.w_quant = QuantParams(
            signed=True,
            n_elements=self.weight.size,
            tensor_role="weight",
            alpha_init=max(float(np.abs(weight).max()), 1e-3),
            variant=weight_variant,
        )
        self.a_quant = QuantParams(
            signed=False, n_elements=cost.n_act_elems, tensor_role="activation"
        )
        self.cost = cost
        self.stride = stride
        self.pad = pad
        self.bn = bn
        self.act = act
        self.pool = pool
        self.quantize_w = True
        self.quantize_a = True

    def forward(self, x: Tensor, rng: RngStream | None, bn_mode: str) -> Tensor:
        if self.quantize_a:
            x = self._quantize(x, self.a_quant, rng)
        w = self.weight
        if self.quantize_w:
            w = self._quantize(w, self.w_quant, rng)
        if self.kind == "dense":
            if x.data.ndim > 2:
                x = ad.reshape(x, (x.shape[0], -1))
            y = ad.matmul(x, w)
            if self.bias is not None:
                y = y + self.bias
        else:
            y = ad.conv2d(x, w, stride=self.stride, pad=self.pad)
            if self.bias is not None:
                y = y + ad.reshape(self.bias, (1, -1, 1, 1))
        if self.bn is not None:
            y = self.bn.forward(y, bn_mode)
        if self.act:
            y = ad.relu(y)
        if self.pool:
            y = ad.avg_pool2d(y, self.pool)
        return y

    @staticmethod
    def _quantize(t: Tensor, qp: QuantParams, rng: RngStream | None) -> Tensor:
        if rng is None and qp.mode == "noise":
            z = np.zeros(t.shape, dtype=np.float32)
            return apply_quantizer(t, qp, z=z, z_bit=0.0)
        return apply_quantizer(t, qp, rng)

    def parameters(self):
        out = [("w", self.weight)]
        if self.bias is not None:
            out.append(("b", self.bias))
        if self.bn is not None:
            out.extend((f"bn.{n}", t) for n, t in self.bn.parameters())
        return out

    def quantizers(self):
        out = []
        if self.quantize_w:
            out.append(("w", self.w_quant))
        if self.quantize_a:
            out.append(("a", self.a_quant))
        return out


class Network:
    """Sequential stack of quant layers keyed by stable names."""

    def __init__(self, layers: list[QuantLayer], spec: "NetworkSpec"):
        self.layers = layers
        self.spec = spec
        self.names = [f"{lay.kind}{i}" for i, lay in enumerate(layers)]

    def forward(self, x, rng: RngStream | None = None, training: bool = False,
                bn_mode: str | None = None) -> Tensor:
        if bn_mode is None:
            bn_mode = "batch" if training else "eval"
        h = x if isinstance(x, Tensor) else Tensor(x)
        h = self._shape_input(h)
        for layer in self.layers:
            h = layer.forward(h, rng, bn_mode)
        return h

    def _shape_input(self, h: Tensor) -> Tensor:
        """Flat inputs feeding a conv stack are viewed as (C, H, W) images."""
        if self.layers and self.layers[0].kind == "conv2d" and h.data.ndim == 2:
            return ad.reshape(h, (h.shape[0], *self.spec.in_shape))
        return h

    # Parameter plumbing ---------------------------------------------------

    def parameters(self):
        """Network parameters (weights, biases, BN affine), weight-decayable."""
        out = []
        for name, layer in zip(self.names, self.layers):
            out.extend((f"{name}.{n}", t) for n, t in layer.parameters())
        return out

    def quantizers(self):
        out = []
        for name, layer in zip(self.names, self.layers):
            out.extend((f"{name}.{n}", qp) for n, qp in layer.quantizers())
        return out

    def quantizer_params(self, include_bits: bool = True):
        """(name, tensor) of quantizer learnables; excluded from weight decay.

        The min-max variant has no boundary to learn, so only truncation
        quantizers contribute alpha_raw. Frozen bits are never returned.
        """
        out = []
        for name, qp in self.quantizers():
            if qp.variant == "truncation":
                out.append((f"{name}.alpha_raw", qp.alpha_raw))
            if include_bits and not qp.bit_frozen:
                out.append((f"{name}.bit_raw", qp.bit_raw))
        return out

    def weight_entries(self):
        """(name, layer) for layers whose weight is quantized."""
        return [
            (name, lay)
            for name, lay in zip(self.names, self.layers)
            if lay.quantize_w
        ]

    def set_mode(self, mode: str) -> None:
        for _, qp in self.quantizers():
            set_mode(qp, mode)

    def set_bn_tracking(self, on: bool) -> None:
        for layer in self.layers:
            if layer.bn is not None:
                layer.bn.track = on

    def bn_layers(self):
        return [lay.bn for lay in self.layers if lay.bn is not None]

    def penalty_bits(self, kind: str):
        """Effective-bit tensors + element counts for one average-bit target."""
        role = "weight" if kind == "avg_bit_weight" else "activation"
        bits, elems = [], []
        for _, qp in self.quantizers():
            if qp.tensor_role == role and not qp.bit_frozen:
                bits.append(effective_bit(qp))
                elems.append(qp.n_elements)
        return bits, elems

    def bops_entries(self):
        """(LayerCost, bit_w, bit_a) per layer with both quantizers active."""
        out = []
        for layer in self.layers:
            if layer.quantize_w and layer.quantize_a:
                out.append((layer.cost, effective_bit(layer.w_quant), effective_bit(layer.a_quant)))
        return out

    def bit_summary(self) -> dict[str, float]:
        return {name: qp.bit_value() for name, qp in self.quantizers()}

    def alpha_summary(self) -> dict[str, float]:
        return {name: qp.alpha_value() for name, qp in self.quantizers()}

    def avg_bits(self, role: str) -> float:
        """Element-weighted average of rounded bits for one tensor role."""
        num = den = 0.0
        for _, qp in self.quantizers():
            if qp.tensor_role == role:
                num += qp.rounded_bit() * qp.n_elements
                den += qp.n_elements
        return num / den if den else 0.0

    def total_bops(self) -> float:
        total = 0.0
        for layer in self.layers:
            bw = layer.w_quant.rounded_bit() if layer.quantize_w else 32
            ba = layer.a_quant.rounded_bit() if layer.quantize_a else 32
            total += layer.cost.macs * bw * ba
        return total

    def calibrate(self, x_batch: np.ndarray) -> None:
        """Initialize boundaries: activations 3x the first batch's std at each
        quantized input, weights max|w|. Runs a full-precision pass."""
        h = self._shape_input(Tensor(np.asarray(x_batch, dtype=np.float32)))
        for layer in self.layers:
            if layer.quantize_a:
                layer.a_quant.set_alpha(max(3.0 * float(h.data.std()), 1e-3))
            if layer.quantize_w:
                layer.w_quant.set_alpha(max(float(np.abs(layer.weight.data).max()), 1e-3))
            q_w, q_a = layer.quantize_w, layer.quantize_a
            layer.quantize_w = layer.quantize_a = False
            h = layer.forward(h, None, "batch")
            layer.quantize_w, layer.quantize_a = q_w, q_a

    def clone_weights(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def restore_weights(self, saved: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            t.data[...] = saved[name]


class TwoBranchNet(Network):
    """Two parallel dense branches (A, B) joined by a dense head.

    The input's first ``dim_a`` features feed branch A and the rest feed B,
    so feature scaling controls each branch's loss curvature independently.
    """

    def __init__(self, dim_a: int, dim_b: int, hidden: int, classes: int,
                 rng: RngStream, spec: "NetworkSpec"):
        self.dim_a = dim_a
        self.dim_b = dim_b
        la = _dense_layer(dim_a, hidden, rng, act=True)
        lb = _dense_layer(dim_b, hidden, rng, act=True)
        head = _dense_layer(2 * hidden, classes, rng, act=False)
        super().__init__([la, lb, head], spec)
        self.names = ["branch_a", "branch_b", "head"]

    def forward(self, x, rng=None, training=False, bn_mode=None):
        if bn_mode is None:
            bn_mode = "batch" if training else "eval"
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        ha = self.layers[0].forward(Tensor(x[:, : self.dim_a]), rng, bn_mode)
        hb = self.layers[1].forward(Tensor(x[:, self.dim_a :]), rng, bn_mode)
        return self.layers[2].forward(ad.concat([ha, hb], axis=1), rng, bn_mode)

    def calibrate(self, x_batch: np.ndarray) -> None:
        x = np.asarray(x_batch, dtype=np.float32)
        parts = [x[:, : self.dim_a], x[:, self.dim_a :]]
        hs = []
        for layer, part in zip(self.layers[:2], parts):
            if layer.quantize_a:
                layer.a_quant.set_alpha(max(3.0 * float(part.std()), 1e-3))
            if layer.quantize_w:
                layer.w_quant.set_alpha(max(float(np.abs(layer.weight.data).max()), 1e-3))
            q_w, q_a = layer.quantize_w, layer.quantize_a
            layer.quantize_w = layer.quantize_a = False
            hs.append(layer.forward(Tensor(part), None, "batch"))
            layer.quantize_w, layer.quantize_a = q_w, q_a
        head = self.layers[2]
        joined = np.concatenate([h.data for h in hs], axis=1)
        if head.quantize_a:
            head.a_quant.set_alpha(max(3.0 * float(joined.std()), 1e-3))
        if head.quantize_w:
            head.w_quant.set_alpha(max(float(np.abs(head.weight.data).max()), 1e-3))


@dataclass
class NetworkSpec:
    """Declarative network description consumed by the builders."""

    kind: str = "mlp"
    in_dim: int = 0
    in_shape: tuple[int, int, int] = (1, 12, 12)  # conv input (C, H, W)
    hidden: list[int] = field(default_factory=lambda: [256, 128])
    channels: list[int] = field(default_factory=lambda: [8, 8, 16])
    classes: int = 10
    batch_norm: bool = True
    first_last: str = "quantize"  # or "keep_fp"
    input_precision: str = "fp"  # or "fixed_8bit"
    quantize_acts: bool = True
    quantize_weights: bool = True
    weight_variant: str = "truncation"
    dim_a: int = 8  # two_branch only
    dim_b: int = 8
    branch_hidden: int = 16
    pool: int = 2

    def __post_init__(self):
        if self.first_last not in ("quantize", "keep_fp"):
            raise ValueError(f"unknown first_last policy {self.first_last!r}")
        if self.input_precision not in ("fp", "fixed_8bit"):
            raise ValueError(f"unknown input_precision {self.input_precision!r}")


def _he_weights(shape, fan_in: int, rng: RngStream) -> np.ndarray:
    return (rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _dense_layer(d_in: int, d_out: int, rng: RngStream, act: bool,
                 bn: bool = False, weight_variant: str = "truncation") -> QuantLayer:
    w = _he_weights((d_in, d_out), d_in, rng)
    b = np.zeros(d_out, dtype=np.float32)
    cost = LayerCost(macs=d_in * d_out, n_weight_elems=d_in * d_out, n_act_elems=d_in)
    return QuantLayer(
        "dense", w, b, cost, bn=BatchNorm(d_out) if bn else None, act=act,
        weight_variant=weight_variant,
    )


def _conv_layer(c_in: int, c_out: int, k: int, h: int, w: int, rng: RngStream,
                bn: bool, act: bool, pool: int = 0,
                weight_variant: str = "truncation") -> QuantLayer:
    fan_in = c_in * k * k
    wt = _he_weights((c_out, c_in, k, k), fan_in, rng)
    b = np.zeros(c_out, dtype=np.float32)
    pad = k // 2
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cost = LayerCost(
        macs=fan_in * c_out * ho * wo,
        n_weight_elems=wt.size,
        n_act_elems=c_in * h * w,
    )
    return QuantLayer(
        "conv2d", wt, b, cost, stride=1, pad=pad,
        bn=BatchNorm(c_out) if bn else None, act=act, pool=pool,
        weight_variant=weight_variant,
    )


def _apply_policies(net: Network, spec: NetworkSpec) -> Network:
    for layer in net.layers:
        layer.quantize_w = spec.quantize_weights
        layer.quantize_a = spec.quantize_acts
    if spec.first_last == "keep_fp" and net.layers:
        for lay in (net.layers[0], net.layers[-1]):
            lay.quantize_w = False
            lay.quantize_a = False
    if spec.input_precision == "fixed_8bit" and net.layers:
        # Input already sits on the 256-level grid; no learned input quantizer.
        net.layers[0].quantize_a = False
    return net


def build_mlp(spec: NetworkSpec, rng: RngStream) -> Network:
    dims = [spec.in_dim or 784, *spec.hidden, spec.classes]
    if any(d < 1 for d in dims):
        raise ValueError(f"inconsistent MLP dims {dims}")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            _dense_layer(d_in, d_out, rng, act=not last,
                         weight_variant=spec.weight_variant)
        )
    return _apply_policies(Network(layers, spec), spec)


def build_small_cnn(spec: NetworkSpec, rng: RngStream) -> Network:
    c, h, w = spec.in_shape
    if h % spec.pool or w % spec.pool:
        raise ValueError(f"input {h}x{w} not divisible by pool {spec.pool}")
    layers = []
    chans = [c, *spec.channels]
    for i in range(len(spec.channels)):
        last_conv = i == len(spec.channels) - 1
        layers.append(
            _conv_layer(
                chans[i], chans[i + 1], 3, h, w, rng,
                bn=spec.batch_norm, act=True,
                pool=spec.pool if last_conv else 0,
                weight_variant=spec.weight_variant,
            )
        )
    flat = spec.channels[-1] * (h // spec.pool) * (w // spec.pool)
    layers.append(_dense_layer(flat, spec.classes, rng, act=False,
                               weight_variant=spec.weight_variant))
    return _apply_policies(Network(layers, spec), spec)


def build_tiny_regressor(spec: NetworkSpec, rng: RngStream) -> Network:
    hidden = spec.hidden[0] if spec.hidden else 32
    layers = [
        _dense_layer(spec.in_dim or 1, hidden, rng, act=True,
                     weight_variant=spec.weight_variant),
        _dense_layer(hidden, 1, rng, act=False, weight_variant=spec.weight_variant),
    ]
    return _apply_policies(Network(layers, spec), spec)


def build_two_branch(spec: NetworkSpec, rng: RngStream) -> TwoBranchNet:
    net = TwoBranchNet(spec.dim_a, spec.dim_b, spec.branch_hidden, spec.classes, rng, spec)
    return _apply_policies(net, spec)


_BUILDERS = {
    "mlp": build_mlp,
    "small_cnn": build_small_cnn,
    "tiny_regressor": build_tiny_regressor,
    "two_branch": build_two_branch,
}


def build_network(spec: NetworkSpec, seed: int) -> Network:
    if spec.kind not in _BUILDERS:
        raise ValueError(f"unknown network kind {spec.kind!r}")
    return _BUILDERS[spec.kind](spec, RngStream(seed, 1))


def constructed_sensitivity_pair(seed: int, scale: float = 6.0, trace_ratio_min: float = 5.0):
    """A two-branch network and task where branch A's Hessian trace dominates.

    Branch A's input features are scaled up, which multiplies the loss
    curvature of its weights; the instance is trained to a full-precision
    optimum and the trace ordering is verified with the stochastic trace
    estimator before being returned. Construction retries on fresh sub-seeds
    and fails if none verifies.

    Returns (network, dataset, trace_report) with traces keyed "branch_a",
    "branch_b".
    """
    from .analysis import hessian_trace  # deferred: analysis builds on models
    from .training import TrainConfig, train_fp

    for attempt in range(5):
        sub = seed + 1000 * attempt
        spec = NetworkSpec(
            kind="two_branch", dim_a=8, dim_b=8, branch_hidden=16, classes=3,
            batch_norm=False, quantize_acts=False,
        )
        data = make_scaled_blobs(sub, spec.dim_a, spec.dim_b, spec.classes, scale)
        net = build_network(spec, sub)
        cfg = TrainConfig(stage1_epochs=40, stage2_epochs=0, lr=0.05,
                          batch_size=64, seed=sub, warmup_epochs=2)
        final_loss = train_fp(net, data, cfg, restore_quantizers=True)
        xs, ys = data.split("train")

        def loss_fn():
            saved = [(lay, lay.quantize_w, lay.quantize_a) for lay in net.layers]
            for lay, _, _ in saved:
                lay.quantize_w = lay.quantize_a = False
            out = ad.softmax_cross_entropy(net.forward(xs[:256]), ys[:256])
            for lay, qw, qa in saved:
                lay.quantize_w, lay.quantize_a = qw, qa
            return out

        groups = [("branch_a", [net.layers[0].weight]), ("branch_b", [net.layers[1].weight])]
        report = hessian_trace(loss_fn, groups, n_probes=64, rng=RngStream(sub, 21))
        ratio = report.traces["branch_a"] / max(report.traces["branch_b"], 1e-12)
        if final_loss < 0.1 and ratio >= trace_ratio_min:
            return net, data, report
    raise RuntimeError(
        f"sensitivity pair construction failed after 5 attempts from seed {seed}: "
        f"trace ratio requirement {trace_ratio_min}x not met"
    )


def make_scaled_blobs(seed: int, dim_a: int, dim_b: int, classes: int, scale: float):
    """Blobs whose first dim_a feature columns are magnified by ``scale``."""
    from .data import make_gaussian_blobs

    data = make_gaussian_blobs(n=1200, classes=classes, dim=dim_a + dim_b, seed=seed)
    data.inputs = data.inputs.copy()
    data.inputs[:, :dim_a] *= np.float32(scale)
    return data
