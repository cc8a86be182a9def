"""Command-line front end: reproducible experiments from a JSON config.

Subcommands: train | eval | sweep | landscape | hessian | compare | export.
Exit codes: 0 success, 1 runtime failure, 2 configuration error. Every
output file carries the config hash and seed; commands never mutate their
input artifacts, and files are written atomically (temp + rename).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (
    compare_truncation_minmax,
    landscape_slice,
    robustness_sweep,
    sensitivity_report,
    write_rows,
)
from .autodiff import RngStream
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .data import Dataset, load_idx_dataset, make_digits_idx, make_gaussian_blobs, make_regression_wave
from .models import NetworkSpec, build_network
from .penalties import ResourceTarget
from .quantizer import quant_codes
from .training import (
    TrainConfig,
    evaluate_quant,
    train_two_stage,
    write_metrics_csv,
    write_metrics_jsonl,
)

__all__ = ["main", "ConfigError", "load_config"]


class ConfigError(Exception):
    """A configuration problem; the CLI maps it to exit code 2."""


DEFAULT_CONFIG: dict = {
    "experiment": "run",
    "seed": 0,
    "out_dir": "runs/run",
    "network": {
        "kind": "mlp",
        "in_dim": 16,
        "in_shape": [1, 12, 12],
        "hidden": [32, 16],
        "channels": [8, 8, 16],
        "classes": 3,
        "batch_norm": True,
        "first_last": "quantize",
        "input_precision": "fp",
        "quantize_acts": True,
        "quantize_weights": True,
        "weight_variant": "truncation",
        "dim_a": 8,
        "dim_b": 8,
        "branch_hidden": 16,
        "pool": 2,
    },
    "dataset": {
        "kind": "blobs",
        "n": 1200,
        "classes": 3,
        "dim": 16,
        "separation": 4.0,
        "spread": 1.0,
        "images": "",
        "labels": "",
        "dir": "",
        "n_train": 2000,
        "n_test": 400,
        "size": 12,
    },
    "train": {
        "stage1_epochs": 8,
        "stage2_epochs": 2,
        "optimizer": "sgd_momentum",
        "lr": 0.05,
        "weight_decay": 1e-5,
        "warmup_epochs": 1,
        "eta_min_ratio": 1e-3,
        "batch_size": 64,
        "quant_lr": None,
        "pretrain_epochs": 0,
    },
    "targets": [],
    "analysis": {
        "hessian_probes": 0,
        "sweep_factors": [],
        "sweep_target": "both",
        "landscape_grid": 0,
        "landscape_radius": 0.5,
    },
}

_TARGET_KEYS = {"kind", "target", "lambda", "huber_delta"}


def _check_keys(user: dict, defaults: dict, path: str) -> None:
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            _check_keys(value, defaults[key], where)


def _merge(user: dict, defaults: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(value, out[key])
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys({k: v for k, v in user.items() if k != "targets"}, DEFAULT_CONFIG, "")
    for i, t in enumerate(user.get("targets", [])):
        extra = set(t) - _TARGET_KEYS
        if extra:
            raise ConfigError(f"unknown config key 'targets[{i}].{sorted(extra)[0]}'")
    return _merge(user, DEFAULT_CONFIG)


def _network_spec(cfg: dict) -> NetworkSpec:
    net = cfg["network"]
    try:
        return NetworkSpec(
            kind=net["kind"],
            in_dim=net["in_dim"],
            in_shape=tuple(net["in_shape"]),
            hidden=list(net["hidden"]),
            channels=list(net["channels"]),
            classes=net["classes"],
            batch_norm=net["batch_norm"],
            first_last=net["first_last"],
            input_precision=net["input_precision"],
            quantize_acts=net["quantize_acts"],
            quantize_weights=net["quantize_weights"],
            weight_variant=net["weight_variant"],
            dim_a=net["dim_a"],
            dim_b=net["dim_b"],
            branch_hidden=net["branch_hidden"],
            pool=net["pool"],
        )
    except ValueError as e:
        raise ConfigError(f"network: {e}")


def _build_dataset(cfg: dict) -> Dataset:
    ds = cfg["dataset"]
    kind = ds["kind"]
    seed = cfg["seed"]
    if kind == "blobs":
        return make_gaussian_blobs(
            n=ds["n"], classes=ds["classes"], dim=ds["dim"], seed=seed,
            separation=ds["separation"], spread=ds["spread"],
        )
    if kind == "wave":
        return make_regression_wave(n=ds["n"], seed=seed)
    if kind == "idx":
        if not ds["images"] or not ds["labels"]:
            raise ConfigError("dataset.images and dataset.labels are required for kind 'idx'")
        for key in ("images", "labels"):
            if not Path(ds[key]).exists():
                raise ConfigError(f"dataset.{key}: file not found: {ds[key]}")
        return load_idx_dataset(ds["images"], ds["labels"], seed=seed)
    if kind == "digits_idx":
        if not ds["dir"]:
            raise ConfigError("dataset.dir is required for kind 'digits_idx'")
        paths = make_digits_idx(
            ds["dir"], n_train=ds["n_train"], n_test=ds["n_test"], seed=seed, size=ds["size"]
        )
        return load_idx_dataset(paths["train_images"], paths["train_labels"], seed=seed)
    raise ConfigError(f"dataset.kind: unknown kind {kind!r}")


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        targets = [
            ResourceTarget(
                kind=tt["kind"], target=tt["target"], lam=tt.get("lambda", 1.0),
                huber_delta=tt.get("huber_delta", 1.0),
            )
            for tt in cfg["targets"]
        ]
        return TrainConfig(
            stage1_epochs=t["stage1_epochs"], stage2_epochs=t["stage2_epochs"],
            optimizer=t["optimizer"], lr=t["lr"], weight_decay=t["weight_decay"],
            warmup_epochs=t["warmup_epochs"], eta_min_ratio=t["eta_min_ratio"],
            batch_size=t["batch_size"], targets=targets, seed=cfg["seed"],
            quant_lr=t["quant_lr"], pretrain_epochs=t["pretrain_epochs"],
        )
    except (KeyError, ValueError) as e:
        raise ConfigError(f"train: {e}")


def _provenance(cfg: dict) -> dict:
    # the hash identifies the experiment; where it writes is not part of it
    hashed = {k: v for k, v in cfg.items() if k != "out_dir"}
    return {"config_hash": config_hash(hashed), "seed": cfg["seed"]}


def _write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, default=float)
    tmp.replace(path)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out_dir"] = args.out
    out = Path(cfg["out_dir"])
    prov = _provenance(cfg)
    dataset = _build_dataset(cfg)
    net = build_network(_network_spec(cfg), cfg["seed"])
    tcfg = _train_config(cfg)
    metrics, summary = train_two_stage(net, dataset, tcfg)
    write_metrics_csv(metrics, out / "metrics.csv", prov)
    write_metrics_jsonl(metrics, out / "metrics.jsonl", prov)
    save_checkpoint(net, out / "checkpoint", config=cfg, seed=cfg["seed"])
    _write_json(out / "summary.json", {**summary, **prov, "experiment": cfg["experiment"]})

    ana = cfg["analysis"]
    if ana["sweep_factors"]:
        sweep = robustness_sweep(net, dataset, list(ana["sweep_factors"]), ana["sweep_target"])
        rows = [
            {"factor": f, "metric": m}
            for f, m in zip(sweep.factors, sweep.metrics["model"])
        ]
        write_rows(rows, out / "sweep", prov)
    if ana["hessian_probes"]:
        rep = sensitivity_report(net, dataset, ana["hessian_probes"], RngStream(cfg["seed"], 51))
        rows = [
            {"layer": n, "trace": t, "trace_per_element": e, "bit": b}
            for n, t, e, b in zip(rep.layers, rep.traces, rep.traces_per_element, rep.bits)
        ]
        write_rows(rows, out / "hessian", prov)
    if ana["landscape_grid"]:
        land = landscape_slice(
            net, dataset, ana["landscape_grid"], ana["landscape_radius"], RngStream(cfg["seed"], 52)
        )
        _write_landscape(out, land, prov)
    print(f"train: {summary['metric_name']}={summary['final_metric']:.4f} -> {out}")
    return 0


def _write_landscape(out: Path, land, prov: dict) -> None:
    _write_json(
        out / "landscape_header.json",
        {
            "offsets": land.offsets,
            "center_loss": land.center_loss,
            "grid": len(land.offsets),
            **prov,
        },
    )
    tmp = out / "landscape_values.csv.tmp"
    np.savetxt(tmp, land.losses, delimiter=",")
    tmp.replace(out / "landscape_values.csv")


def _load_net_and_data(args):
    net, manifest = load_checkpoint(args.checkpoint)
    cfg = manifest["config"] or DEFAULT_CONFIG
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    dataset = _build_dataset(cfg)
    return net, dataset, cfg


def cmd_eval(args) -> int:
    net, dataset, cfg = _load_net_and_data(args)
    result = evaluate_quant(net, dataset, args.split)
    payload = {**result, **_provenance(cfg), "split": args.split}
    if args.out:
        _write_json(Path(args.out) / "eval.json", payload)
    print(json.dumps(payload))
    return 0


def cmd_sweep(args) -> int:
    factors = [float(x) for x in args.factors.split(",")]
    if 1.0 not in factors:
        raise ConfigError("sweep --factors must include 1.0 (the unperturbed baseline)")
    net, dataset, cfg = _load_net_and_data(args)
    sweep = robustness_sweep(net, dataset, factors, args.target)
    out = Path(args.out or cfg["out_dir"])
    rows = [{"factor": f, "metric": m} for f, m in zip(sweep.factors, sweep.metrics["model"])]
    write_rows(rows, out / "sweep", _provenance(cfg))
    print(f"sweep: wrote {out / 'sweep.csv'}")
    return 0


def cmd_landscape(args) -> int:
    net, dataset, cfg = _load_net_and_data(args)
    land = landscape_slice(net, dataset, args.grid, args.radius, RngStream(cfg["seed"], 52))
    out = Path(args.out or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_landscape(out, land, _provenance(cfg))
    print(f"landscape: center loss {land.center_loss:.4f} -> {out}")
    return 0


def cmd_hessian(args) -> int:
    if args.probes < 2:
        raise ConfigError(f"--probes must be >= 2 for an error bar, got {args.probes}")
    net, dataset, cfg = _load_net_and_data(args)
    rep = sensitivity_report(net, dataset, args.probes, RngStream(cfg["seed"], 51))
    out = Path(args.out or cfg["out_dir"])
    rows = [
        {"layer": n, "trace": t, "trace_per_element": e, "bit": b}
        for n, t, e, b in zip(rep.layers, rep.traces, rep.traces_per_element, rep.bits)
    ]
    rows.append(
        {"layer": "spearman", "trace": rep.spearman_total, "trace_per_element": rep.spearman_per_element, "bit": -1}
    )
    write_rows(rows, out / "hessian", _provenance(cfg))
    print(f"hessian: wrote {out / 'hessian.csv'}")
    return 0


def _compare_worker(cfg: dict, bits: float, seed: int) -> dict:
    base = load_config_from_dict(cfg)
    dataset = _build_dataset(base)
    spec = _network_spec(base)
    tcfg = replace(_train_config(base), seed=seed)
    rows = compare_truncation_minmax(spec, dataset, [bits], 1, replace(tcfg, seed=seed))
    return rows[0]


def load_config_from_dict(cfg: dict) -> dict:
    return _merge(cfg, DEFAULT_CONFIG)


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    bits = [float(b) for b in args.bits.split(",")]
    dataset = _build_dataset(cfg)
    spec = _network_spec(cfg)
    tcfg = _train_config(cfg)
    out = Path(args.out or cfg["out_dir"])
    if args.jobs > 1:
        tasks = [(b, cfg["seed"] + s) for b in bits for s in range(args.seeds)]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            partials = list(pool.map(_compare_worker, [cfg] * len(tasks), *zip(*tasks)))
        rows = _aggregate_compare(bits, args.seeds, partials)
    else:
        rows = compare_truncation_minmax(spec, dataset, bits, args.seeds, tcfg)
    write_rows(rows, out / "compare", _provenance(cfg))
    print(f"compare: wrote {out / 'compare.csv'}")
    return 0


def _aggregate_compare(bits: list[float], n_seeds: int, partials: list[dict]) -> list[dict]:
    rows = []
    for i, b in enumerate(bits):
        chunk = partials[i * n_seeds : (i + 1) * n_seeds]
        tr = [r["truncation_mean"] for r in chunk]
        mm = [r["minmax_mean"] for r in chunk]
        rows.append(
            {
                "avg_bits": b,
                "truncation_mean": float(np.mean(tr)),
                "truncation_std": float(np.std(tr)),
                "minmax_mean": float(np.mean(mm)),
                "minmax_std": float(np.std(mm)),
                "truncation_runs": tr,
                "minmax_runs": mm,
            }
        )
    return rows


def cmd_export(args) -> int:
    net, manifest = load_checkpoint(args.checkpoint)
    net.set_mode("quant")
    out_base = Path(args.out or (Path(args.checkpoint).parent / "export"))
    out_base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks: list[bytes] = []
    offset = 0
    for name, layer in zip(net.names, net.layers):
        if layer.quantize_w:
            codes, delta, lo, hi = quant_codes(layer.weight.data, layer.w_quant)
            bit = layer.w_quant.rounded_bit()
            dtype = "<i1" if bit <= 8 else "<i2"
            raw = codes.astype(dtype).tobytes()
            entries.append(
                {
                    "name": f"{name}.w", "kind": "codes", "dtype": dtype,
                    "shape": list(layer.weight.shape), "offset": offset,
                    "bit": bit, "alpha": float(layer.w_quant.alpha_value()),
                    "delta": delta, "signed": layer.w_quant.signed,
                    "lo": lo, "hi": hi,
                }
            )
        else:
            raw = np.ascontiguousarray(layer.weight.data, dtype="<f4").tobytes()
            entries.append(
                {
                    "name": f"{name}.w", "kind": "float32", "dtype": "<f4",
                    "shape": list(layer.weight.shape), "offset": offset,
                }
            )
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "format_version": 1,
        "network_spec": manifest["network_spec"],
        "quantizers": manifest["quantizers"],
        "layer_flags": manifest["layer_flags"],
        "tensors": entries,
        "blob_bytes": offset,
        "config_hash": manifest["config_hash"],
        "seed": manifest["seed"],
        "source_checkpoint": str(args.checkpoint),
    }
    tmp = out_base.with_suffix(".bin.tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    tmp.replace(out_base.with_suffix(".bin"))
    _write_json(out_base.with_suffix(".json"), meta)
    print(f"export: wrote {out_base.with_suffix('.json')}")
    return 0


def load_exported(base, checkpoint_base):
    """Rebuild a network from an export: dequantized weights, quantizers for
    weights disabled (already applied), activation quantizers live."""
    base = Path(base)
    meta = json.loads(base.with_suffix(".json").read_text())
    blob = base.with_suffix(".bin").read_bytes()
    if len(blob) != meta["blob_bytes"]:
        raise ValueError(
            f"{base}.bin holds {len(blob)} bytes, export manifest expects {meta['blob_bytes']}"
        )
    net, _ = load_checkpoint(checkpoint_base)
    net.set_mode("quant")
    by_name = dict(zip(net.names, net.layers))
    for e in meta["tensors"]:
        lname, _ = e["name"].rsplit(".", 1)
        layer = by_name[lname]
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=e["offset"])
        if e["kind"] == "codes":
            w = (arr.astype(np.float64) * e["delta"]).astype(np.float32)
            layer.weight.data[...] = w.reshape(e["shape"])
            layer.quantize_w = False  # weights are already on-grid
        else:
            layer.weight.data[...] = arr.reshape(e["shape"]).astype(np.float32)
    return net


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the two-stage pipeline from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint in quant mode")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--split", default="val")
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="boundary-scale robustness sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--factors", required=True, help="comma list, must include 1.0")
    s.add_argument("--target", default="both", choices=["activation", "weight", "both"])
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_sweep)

    l = sub.add_parser("landscape", help="2-d loss-landscape slice")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--config", default=None)
    l.add_argument("--grid", type=int, default=9)
    l.add_argument("--radius", type=float, default=0.5)
    l.add_argument("--out", default=None)
    l.set_defaults(fn=cmd_landscape)

    h = sub.add_parser("hessian", help="per-layer Hessian traces vs assigned bits")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--config", default=None)
    h.add_argument("--probes", type=int, default=256)
    h.add_argument("--out", default=None)
    h.set_defaults(fn=cmd_hessian)

    c = sub.add_parser("compare", help="truncation vs min-max paired training")
    c.add_argument("--config", required=True)
    c.add_argument("--bits", required=True, help="comma list of average bit targets")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_compare)

    x = sub.add_parser("export", help="write integer weight codes + metadata")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", default=None)
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
