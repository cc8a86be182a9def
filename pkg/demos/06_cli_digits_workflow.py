"""The full command-line workflow on a synthetic digits task.

Renders an IDX-format digits dataset, writes a run config, then drives the
CLI: train -> eval -> sweep -> hessian -> export. Everything lands under
runs/demo_digits with provenance (config hash + seed) in every artifact.
"""

import json
from pathlib import Path

from pqat.cli import main
from pqat.data import make_digits_idx

out = Path("runs/demo_digits")
out.mkdir(parents=True, exist_ok=True)
make_digits_idx(out / "data", n_train=2000, n_test=400, seed=0, size=12)

config = {
    "experiment": "digits-cnn-4bit",
    "seed": 0,
    "out_dir": str(out),
    "network": {
        "kind": "small_cnn",
        "in_shape": [1, 12, 12],
        "channels": [8, 8, 16],
        "classes": 10,
        "batch_norm": True,
        "input_precision": "fixed_8bit",
    },
    "dataset": {
        "kind": "idx",
        "images": str(out / "data" / "train-images.idx3-ubyte"),
        "labels": str(out / "data" / "train-labels.idx1-ubyte"),
    },
    "train": {
        "stage1_epochs": 6,
        "stage2_epochs": 2,
        "pretrain_epochs": 3,
        "lr": 0.03,
        "warmup_epochs": 1,
        "batch_size": 64,
    },
    "targets": [
        {"kind": "avg_bit_weight", "target": 4.0, "lambda": 1.0},
        {"kind": "avg_bit_activation", "target": 4.0, "lambda": 1.0},
    ],
}
cfg_path = out / "config.json"
cfg_path.write_text(json.dumps(config, indent=1))

for argv in (
    ["train", "--config", str(cfg_path)],
    ["eval", "--checkpoint", str(out / "checkpoint")],
    ["sweep", "--checkpoint", str(out / "checkpoint"), "--factors", "0.8,0.9,1.0,1.1,1.2"],
    ["hessian", "--checkpoint", str(out / "checkpoint"), "--probes", "32"],
    ["export", "--checkpoint", str(out / "checkpoint"), "--out", str(out / "export")],
):
    print(f"\n$ pqat {' '.join(argv)}")
    rc = main(argv)
    assert rc == 0, f"command failed with exit code {rc}"

summary = json.loads((out / "summary.json").read_text())
print("\nsummary:")
print("  final quant accuracy:", round(summary["final_metric"], 4))
print("  avg bits (w/a):", round(summary["avg_bits_weight"], 2),
      "/", round(summary["avg_bits_activation"], 2))
print("  total BOPs:", f"{summary['total_bops']:.3e}")
print("  artifacts:", sorted(p.name for p in out.iterdir() if p.is_file()))
