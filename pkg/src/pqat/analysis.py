"""Verification instruments: stochastic Hessian traces, convergence probes,
robustness sweeps, loss-landscape slices, and the truncation-vs-min-max
comparison.

Hessian-vector products are taken as central finite differences of autodiff
gradients (step 1e-3 * |param| / |probe|), trading a little bias for not
needing second-order autodiff; on quadratics the difference is exact up to
float32 rounding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .autodiff import RngStream, Tensor
from .data import Dataset
from .models import Network, NetworkSpec, build_network
from .penalties import ResourceTarget
from .quantizer import QuantParams
from .training import TrainConfig, evaluate_quant, train_two_stage

__all__ = [
    "TraceReport",
    "SweepResult",
    "hessian_trace",
    "closed_form_noisy_loss",
    "mc_noisy_loss",
    "noise_decay_probe",
    "clip_growth_probe",
    "robustness_sweep",
    "landscape_slice",
    "compare_truncation_minmax",
    "sensitivity_report",
    "write_rows",
]


@dataclass
class TraceReport:
    """Per-group stochastic trace estimates with standard errors."""

    traces: dict[str, float]
    stderr: dict[str, float]
    n_probes: int


@dataclass
class SweepResult:
    """Metric per scale factor per variant; factor 1.0 is the baseline."""

    factors: list[float]
    metrics: dict[str, list[float]]
    metric_name: str = "accuracy"


def _group_grad(loss_fn, tensors: list[Tensor]) -> np.ndarray:
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    return np.concatenate(
        [
            (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
            for t in tensors
        ]
    ).astype(np.float64)


def _set_group(tensors: list[Tensor], flat: np.ndarray) -> None:
    pos = 0
    for t in tensors:
        n = t.data.size
        t.data[...] = flat[pos : pos + n].reshape(t.data.shape).astype(np.float32)
        pos += n


def hessian_trace(loss_fn, param_groups, n_probes: int, rng: RngStream,
                  fd_step: float = 1e-3) -> TraceReport:
    """Stochastic trace of the loss Hessian restricted to each param group.

    ``loss_fn()`` must return a scalar Tensor built from the current
    parameter values. Probes are Rademacher vectors (lower variance than
    Gaussian for trace estimation); each probe measures v' H v with H v from
    central differences of gradients.
    """
    if n_probes < 2:
        raise ValueError(f"n_probes must be >= 2 for an error bar, got {n_probes}")
    traces, errs = {}, {}
    for name, tensors in param_groups:
        orig = np.concatenate([t.data.reshape(-1) for t in tensors]).astype(np.float64)
        norm_p = float(np.linalg.norm(orig))
        estimates = np.empty(n_probes)
        for k in range(n_probes):
            v = rng.rademacher(orig.shape).astype(np.float64)
            h = fd_step * (norm_p / np.linalg.norm(v)) if norm_p > 0 else fd_step
            _set_group(tensors, orig + h * v)
            g_plus = _group_grad(loss_fn, tensors)
            _set_group(tensors, orig - h * v)
            g_minus = _group_grad(loss_fn, tensors)
            hv = (g_plus - g_minus) / (2.0 * h)
            estimates[k] = float(v @ hv)
        _set_group(tensors, orig)
        traces[name] = float(estimates.mean())
        errs[name] = float(estimates.std(ddof=1) / np.sqrt(n_probes))
    return TraceReport(traces, errs, n_probes)


# Convergence probe: learnable noise scale on a quadratic -------------------


def closed_form_noisy_loss(w: np.ndarray, h_mat: np.ndarray, eps: float) -> float:
    """Expected value of 0.5 (w+d)'H(w+d) over d ~ U[-eps, eps]^n:
    the plain loss plus eps^2/6 times the Hessian trace."""
    base = 0.5 * float(w @ h_mat @ w)
    return base + (eps**2 / 6.0) * float(np.trace(h_mat))


def mc_noisy_loss(w: np.ndarray, h_mat: np.ndarray, eps: float, n_samples: int,
                  rng: RngStream) -> float:
    dim = len(w)
    u = 2.0 * rng.uniform((n_samples, dim)).astype(np.float64) - 1.0
    pts = w[None, :] + eps * u
    return float(0.5 * np.einsum("ni,ij,nj->n", pts, h_mat, pts).mean())


@dataclass
class NoiseDecayResult:
    eps_trajectory: list[float]
    trace: float
    mc_mean: float
    closed_form: float
    h_mat: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)


def noise_decay_probe(dim: int, n_steps: int, rng: RngStream, eps0: float = 1.0,
                      train_w: bool = True, n_mc: int = 100_000) -> NoiseDecayResult:
    """Train a learnable uniform-noise scale on a known quadratic.

    The sampled loss is 0.5 (w + eps u)' H (w + eps u) with u ~ U[-1,1]^n
    drawn fresh per step; plain gradient descent updates eps (and optionally
    w). The noise scale decays toward zero because its expected gradient is
    eps/3 times the (positive) Hessian trace. Also reports the Monte-Carlo
    mean loss at eps0 against the closed form for cross-checking.
    """
    a = rng.normal((dim, dim)).astype(np.float64)
    h_mat = a.T @ a / dim + 0.1 * np.eye(dim)
    trace = float(np.trace(h_mat))
    w = 0.5 * rng.normal(dim).astype(np.float64)
    mc = mc_noisy_loss(w, h_mat, eps0, n_mc, rng.spawn(31))
    closed = closed_form_noisy_loss(w, h_mat, eps0)

    eps = eps0
    lr = 0.3 / trace
    traj = [abs(eps)]
    for _ in range(n_steps):
        u = 2.0 * rng.uniform(dim).astype(np.float64) - 1.0
        g_common = h_mat @ (w + eps * u)
        eps -= lr * float(u @ g_common)
        if train_w:
            w = w - lr * g_common
        traj.append(abs(eps))
    return NoiseDecayResult(traj, trace, mc, closed, h_mat, w)


# Clip-boundary growth probe ------------------------------------------------


@dataclass
class ClipGrowthResult:
    alphas: list[float]
    grad_signs: list[float]
    loss_first: float
    loss_last: float
    spearman_vs_time: float


def clip_growth_probe(net: Network, dataset: Dataset, init_alpha_fraction: float = 0.25,
                      steps: int = 200, lr: float = 0.05, bit: float = 8.0,
                      batch_size: int = 64, seed: int = 0) -> ClipGrowthResult:
    """Train only the input clipping boundary of a one-layer net in quant mode.

    The boundary starts at a fraction of the data's max magnitude so
    truncation error dominates; with a high fixed bit-width the rounding
    error is negligible. Records the boundary trajectory and the sign of its
    per-batch loss gradient (negative sign means the boundary wants to grow).
    """
    layer = net.layers[0]
    qp = layer.a_quant
    layer.quantize_a = True
    layer.quantize_w = False
    qp.set_bit(bit)
    qp.bit_frozen = True
    qp.mode = "quant"
    xs, _ = dataset.split("train")
    max_mag = float(np.abs(xs).max())
    qp.set_alpha(max(init_alpha_fraction * max_mag, 1e-4))

    data_rng = RngStream(seed, 41)
    alphas = [qp.alpha_value()]
    signs: list[float] = []
    losses: list[float] = []
    from .training import _task_loss  # shared batch-loss helper

    done = 0
    while done < steps:
        for xb, yb in dataset.batches("train", batch_size, data_rng):
            if done >= steps:
                break
            qp.alpha_raw.zero_grad()
            loss = _task_loss(net, xb, yb, None, training=False)
            loss.backward()
            g = float(qp.alpha_raw.grad) if qp.alpha_raw.grad is not None else 0.0
            signs.append(np.sign(g))
            qp.alpha_raw.data -= np.float32(lr * g)
            alphas.append(qp.alpha_value())
            losses.append(loss.item())
            done += 1
    if len(alphas) > 2 and np.ptp(alphas) > 0:
        rho = float(stats.spearmanr(np.arange(len(alphas)), alphas).statistic)
    else:
        rho = 0.0
    return ClipGrowthResult(alphas, signs, losses[0], losses[-1], rho)


# Robustness sweep -----------------------------------------------------------


def _targeted_quantizers(net: Network, target: str) -> list[QuantParams]:
    roles = {"activation": ("activation",), "weight": ("weight",), "both": ("activation", "weight")}
    if target not in roles:
        raise ValueError(f"unknown sweep target {target!r}")
    return [
        qp
        for _, qp in net.quantizers()
        if qp.tensor_role in roles[target] and qp.variant == "truncation"
    ]


def robustness_sweep(net: Network, dataset: Dataset, factors: list[float],
                     target: str = "both", label: str = "model",
                     split: str = "val") -> SweepResult:
    """Quant-mode metric while the trained boundaries are scaled by each factor.

    Bits stay fixed; boundaries are restored exactly afterward (the scaling
    is a transient multiplier, not a parameter update), so the factor-1.0 row
    equals the unperturbed evaluation bit-identically.
    """
    if 1.0 not in factors:
        raise ValueError("sweep factors must include 1.0 (the baseline)")
    qps = _targeted_quantizers(net, target)
    out: list[float] = []
    metric_name = "accuracy"
    for f in factors:
        for qp in qps:
            qp.alpha_scale = float(f)
        result = evaluate_quant(net, dataset, split)
        metric_name = result["metric_name"]
        out.append(result["metric"])
        for qp in qps:
            qp.alpha_scale = 1.0
    return SweepResult(list(factors), {label: out}, metric_name)


def sweep_degradation_area(result: SweepResult, label: str) -> float:
    """Metric drop relative to factor 1.0, trapezoid-integrated over factors."""
    f = np.asarray(result.factors, dtype=np.float64)
    m = np.asarray(result.metrics[label], dtype=np.float64)
    order = np.argsort(f)
    f, m = f[order], m[order]
    base = m[f == 1.0][0]
    return float(np.trapezoid(base - m, f))


# Loss landscape -------------------------------------------------------------


@dataclass
class LandscapeResult:
    offsets: list[float]
    losses: np.ndarray  # [len(offsets), len(offsets)]
    center_loss: float


def _filter_normalized_direction(w: np.ndarray, rng: RngStream) -> np.ndarray:
    """Random direction rescaled per output unit to that unit's weight norm."""
    d = rng.normal(w.shape).astype(np.float64)
    if w.ndim == 4:  # conv [F, C, kh, kw]: one filter per output channel
        norms_w = np.linalg.norm(w.reshape(w.shape[0], -1), axis=1)
        norms_d = np.linalg.norm(d.reshape(w.shape[0], -1), axis=1)
        scale = np.where(norms_d > 0, norms_w / np.maximum(norms_d, 1e-12), 0.0)
        d = (d.reshape(w.shape[0], -1) * scale[:, None]).reshape(w.shape)
    else:  # dense [in, out]: one column per output unit
        norms_w = np.linalg.norm(w, axis=0)
        norms_d = np.linalg.norm(d, axis=0)
        scale = np.where(norms_d > 0, norms_w / np.maximum(norms_d, 1e-12), 0.0)
        d = d * scale[None, :]
    return d.astype(np.float32)


def landscape_slice(net: Network, dataset: Dataset, grid: int, radius: float,
                    rng: RngStream, n_samples: int = 512) -> LandscapeResult:
    """Task loss on a 2-d slice spanned by two filter-normalized directions.

    The slice is centered on the current weights; the grid's center cell is
    the unperturbed loss exactly and the weights are restored afterward.
    """
    xs, ys = dataset.split("train")
    xs, ys = xs[:n_samples], ys[:n_samples]
    weights = [lay.weight for lay in net.layers]
    originals = [w.data.copy() for w in weights]
    d1 = [_filter_normalized_direction(w, rng) for w in originals]
    d2 = [_filter_normalized_direction(w, rng) for w in originals]
    offsets = list(np.linspace(-radius, radius, grid))
    if grid % 2 == 1:
        offsets[grid // 2] = 0.0
    losses = np.zeros((grid, grid))
    from .training import _task_loss

    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            for w, o, u, v in zip(weights, originals, d1, d2):
                w.data[...] = o + np.float32(a) * u + np.float32(b) * v
            losses[i, j] = _task_loss(net, xs, ys, None, training=False).item()
    for w, o in zip(weights, originals):
        w.data[...] = o
    center = losses[offsets.index(0.0), offsets.index(0.0)] if 0.0 in offsets else float("nan")
    return LandscapeResult(offsets, losses, center)


def landscape_sharpness(result: LandscapeResult) -> float:
    """Mean loss increase over the slice relative to the center cell."""
    return float((result.losses - result.center_loss).mean())


# Truncation vs min-max ------------------------------------------------------


def compare_truncation_minmax(spec: NetworkSpec, dataset: Dataset, avg_bits: list[float],
                              n_seeds: int, cfg: TrainConfig, lam: float = 1.0):
    """Paired training of truncation and min-max weight quantization.

    For each target average weight bit-width and seed, both variants start
    from identical weights and train with the same budget penalty; reports
    per-variant mean and standard deviation of the final quant-mode metric.
    """
    rows = []
    for bits in avg_bits:
        accs = {"truncation": [], "minmax": []}
        for s in range(n_seeds):
            seed = cfg.seed + s
            for variant in ("truncation", "minmax"):
                vspec = replace(spec, weight_variant=variant)
                net = build_network(vspec, seed)
                vcfg = replace(
                    cfg,
                    seed=seed,
                    targets=[ResourceTarget("avg_bit_weight", bits, lam=lam)],
                )
                _, summary = train_two_stage(net, dataset, vcfg)
                accs[variant].append(summary["final_metric"])
        rows.append(
            {
                "avg_bits": bits,
                "truncation_mean": float(np.mean(accs["truncation"])),
                "truncation_std": float(np.std(accs["truncation"])),
                "minmax_mean": float(np.mean(accs["minmax"])),
                "minmax_std": float(np.std(accs["minmax"])),
                "truncation_runs": accs["truncation"],
                "minmax_runs": accs["minmax"],
            }
        )
    return rows


# Sensitivity vs assigned bits ------------------------------------------------


@dataclass
class SensitivityReport:
    layers: list[str]
    traces: list[float]
    traces_per_element: list[float]
    bits: list[int]
    spearman_total: float
    spearman_per_element: float
    n_probes: int


def sensitivity_report(net: Network, dataset: Dataset, n_probes: int,
                       rng: RngStream, n_samples: int = 256) -> SensitivityReport:
    """Pair per-layer weight Hessian traces with the frozen bit allocation.

    Traces are measured on the full-precision forward path (quantizers
    bypassed) at the trained weights; both the total trace and the
    per-element normalization are reported with their rank correlation
    against the assigned bits.
    """
    xs, ys = dataset.split("train")
    xs, ys = xs[:n_samples], ys[:n_samples]
    entries = net.weight_entries()
    from .training import _task_loss

    def loss_fn():
        saved = [(lay, lay.quantize_w, lay.quantize_a) for lay in net.layers]
        for lay, _, _ in saved:
            lay.quantize_w = lay.quantize_a = False
        out = _task_loss(net, xs, ys, None, training=False)
        for lay, qw, qa in saved:
            lay.quantize_w, lay.quantize_a = qw, qa
        return out

    groups = [(name, [lay.weight]) for name, lay in entries]
    report = hessian_trace(loss_fn, groups, n_probes, rng)
    names = [name for name, _ in entries]
    traces = [report.traces[n] for n in names]
    per_elem = [t / lay.weight.size for t, (_, lay) in zip(traces, entries)]
    bits = [lay.w_quant.rounded_bit() for _, lay in entries]
    rho_t = float(stats.spearmanr(traces, bits).statistic) if len(bits) > 1 else 0.0
    rho_e = float(stats.spearmanr(per_elem, bits).statistic) if len(bits) > 1 else 0.0
    return SensitivityReport(names, traces, per_elem, bits, rho_t, rho_e, n_probes)


# Report emission -------------------------------------------------------------


def write_rows(rows: list[dict], base, provenance: dict | None = None) -> None:
    """Emit a row list as <base>.csv and <base>.jsonl with provenance keys."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    tmp = base.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as f:
        if provenance:
            f.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([json.dumps(r[c]) if isinstance(r.get(c), (list, dict)) else r.get(c) for c in cols])
    tmp.replace(base.with_suffix(".csv"))
    tmp = base.with_suffix(".jsonl.tmp")
    with open(tmp, "w") as f:
        for r in rows:
            out = dict(r)
            if provenance:
                out.update(provenance)
            f.write(json.dumps(out) + "\n")
    tmp.replace(base.with_suffix(".jsonl"))
