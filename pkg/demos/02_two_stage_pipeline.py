"""The two-stage pipeline end to end on a toy classification task.

Full-precision warm-up, noise-injection pre-training with budget penalties,
bit freeze, then quant-mode fine-tuning. Prints the per-epoch trajectory and
the final mixed-precision allocation.
"""

from pqat.data import make_gaussian_blobs
from pqat.models import NetworkSpec, build_network
from pqat.penalties import ResourceTarget
from pqat.training import TrainConfig, train_two_stage

data = make_gaussian_blobs(n=1200, classes=3, dim=16, seed=0)
spec = NetworkSpec(kind="mlp", in_dim=16, hidden=[32, 16], classes=3, batch_norm=False)
net = build_network(spec, seed=0)

cfg = TrainConfig(
    stage1_epochs=10,
    stage2_epochs=2,
    pretrain_epochs=4,
    lr=0.02,
    warmup_epochs=1,
    batch_size=64,
    seed=0,
    targets=[
        ResourceTarget("avg_bit_weight", 4.0, lam=1.0),
        ResourceTarget("avg_bit_activation", 4.0, lam=1.0),
    ],
)
metrics, summary = train_two_stage(net, data, cfg)

print(f"{'epoch':>5} {'stage':>10} {'train':>7} {'penalty':>8} {'val acc':>8}")
for m in metrics:
    print(f"{m['epoch']:>5} {m['stage']:>10} {m['train_loss']:>7.3f} "
          f"{m['penalty']:>8.3f} {m['metric']:>8.3f}")

print("\nfinal quant-mode accuracy:", round(summary["final_metric"], 4))
print("accuracy at the freeze point:", round(summary["transition_metric"], 4))
print("average weight bits:", round(summary["avg_bits_weight"], 2), "(target 4.0)")
print("average activation bits:", round(summary["avg_bits_activation"], 2), "(target 4.0)")
print("\nper-tensor allocation:")
for name, bit in summary["bits"].items():
    print(f"  {name:12s} {bit:5.2f} bits   alpha {summary['alphas'][name]:.3f}")
