"""Checkpoints: a JSON manifest plus a little-endian float32 blob.

The manifest records every tensor's name, shape and byte offset (offsets
must tile the blob exactly), all quantizer scalars and flags, and the full
run configuration so a network can be rebuilt standalone. Reloading
reproduces forward results bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import Network, NetworkSpec, build_network

__all__ = ["config_hash", "save_checkpoint", "load_checkpoint", "manifest_path", "blob_path"]

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def manifest_path(base) -> Path:
    return Path(base).with_suffix(".json")


def blob_path(base) -> Path:
    return Path(base).with_suffix(".bin")


def _network_tensors(net: Network):
    """Every persistent float tensor: parameters plus BN running stats."""
    out = list(net.parameters())
    for name, layer in zip(net.names, net.layers):
        if layer.bn is not None:
            out.append((f"{name}.bn.running_mean", layer.bn.running_mean))
            out.append((f"{name}.bn.running_var", layer.bn.running_var))
    return out


def save_checkpoint(net: Network, base, config: dict | None = None, seed: int | None = None) -> Path:
    """Write <base>.json + <base>.bin atomically; returns the manifest path."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t in _network_tensors(net):
        data = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += data.size * 4
    seen = [e["name"] for e in entries]
    if len(seen) != len(set(seen)):
        raise ValueError(f"duplicate tensor names in checkpoint: {sorted(seen)}")

    config = config or {}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed if seed is not None else config.get("seed", 0),
        "network_spec": dataclasses.asdict(net.spec),
        "blob_bytes": offset,
        "tensors": entries,
        "quantizers": {name: qp.state() for name, qp in net.quantizers()},
        "layer_flags": [
            {"quantize_w": lay.quantize_w, "quantize_a": lay.quantize_a} for lay in net.layers
        ],
        "bn_tracking": any(bn.track for bn in net.bn_layers()),
    }
    mpath, bpath = manifest_path(base), blob_path(base)
    tmp_b = bpath.with_suffix(".bin.tmp")
    with open(tmp_b, "wb") as f:
        f.write(b"".join(chunks))
    tmp_b.replace(bpath)
    tmp_m = mpath.with_suffix(".json.tmp")
    with open(tmp_m, "w") as f:
        json.dump(manifest, f, indent=1)
    tmp_m.replace(mpath)
    return mpath


def load_checkpoint(base) -> tuple[Network, dict]:
    """Rebuild the network from a checkpoint; returns (network, manifest)."""
    mpath, bpath = manifest_path(base), blob_path(base)
    with open(mpath) as f:
        manifest = json.load(f)
    blob = bpath.read_bytes()
    expected = manifest["blob_bytes"]
    if len(blob) != expected:
        raise ValueError(f"{bpath}: blob holds {len(blob)} bytes, manifest expects {expected}")
    offset = 0
    for e in manifest["tensors"]:
        if e["offset"] != offset:
            raise ValueError(
                f"{mpath}: tensor {e['name']!r} at offset {e['offset']} does not tile "
                f"the blob (expected offset {offset})"
            )
        offset += e["count"] * 4
    if offset != expected:
        raise ValueError(f"{mpath}: manifest offsets cover {offset} bytes of {expected}")

    spec_dict = dict(manifest["network_spec"])
    spec_dict["in_shape"] = tuple(spec_dict["in_shape"])
    spec = NetworkSpec(**spec_dict)
    net = build_network(spec, manifest["seed"])
    restore_into(net, manifest, blob)
    return net, manifest


def restore_into(net: Network, manifest: dict, blob: bytes) -> None:
    """Copy manifest tensors and quantizer state into an existing network."""
    by_name = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["count"], offset=e["offset"])
        by_name[e["name"]] = arr.reshape(e["shape"])
    for layer, flags in zip(net.layers, manifest.get("layer_flags", [])):
        layer.quantize_w = flags["quantize_w"]
        layer.quantize_a = flags["quantize_a"]
    for name, t in _network_tensors(net):
        if name not in by_name:
            raise ValueError(f"checkpoint/spec mismatch: tensor {name!r} missing from manifest")
        src = by_name[name]
        dst = t.data if isinstance(t, Tensor) else t
        if tuple(src.shape) != tuple(dst.shape):
            raise ValueError(
                f"checkpoint/spec mismatch at tensor {name!r}: "
                f"manifest shape {tuple(src.shape)} vs network shape {tuple(dst.shape)}"
            )
        dst[...] = src
    quant_states = manifest["quantizers"]
    for name, qp in net.quantizers():
        if name in quant_states:
            qp.load_state(quant_states[name])
    net.set_bn_tracking(manifest.get("bn_tracking", False))
