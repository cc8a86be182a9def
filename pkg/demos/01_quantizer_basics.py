"""A tour of the fake-quantization operator.

Shows the two operating modes on a toy tensor: noise injection (training)
and on-grid rounding (deployment), plus how the learnable clipping boundary
and bit-width shape the level grid.
"""

import numpy as np

from pqat.autodiff import RngStream, Tensor, tsum
from pqat.quantizer import (
    QuantParams,
    effective_bit,
    minmax_forward,
    noise_forward,
    quant_forward,
)

rng = RngStream(seed=0, stream_id=1)

print("=== the level grid ===")
qp = QuantParams(signed=False, alpha_init=1.0)
qp.set_bit(3.0)
x = Tensor(np.linspace(-0.2, 1.2, 15).astype(np.float32))
qp.mode = "quant"
print("inputs :", np.round(x.data, 3))
print("levels :", np.round(quant_forward(x, qp).data, 3))
print("boundary alpha =", round(qp.alpha_value(), 4), "| bit =", qp.rounded_bit(),
      "| step =", round(qp.alpha_value() / (2**3 - 1), 4))

print("\n=== noise mode approximates the rounding distortion ===")
qp.mode = "noise"
qp.bit_noise_policy = "ste"
big = Tensor(np.full(200_000, 0.5, dtype=np.float32))
noisy = noise_forward(big, qp, rng)
delta = qp.alpha_value() / (2**3 - 1)
print(f"injected noise std = {float((noisy.data - 0.5).std()):.5f}"
      f"  (target delta/2 = {delta / 2:.5f})")

print("\n=== gradients reach the boundary through truncation ===")
qp2 = QuantParams(signed=False, alpha_init=0.6)
x2 = Tensor(np.array([0.1, 0.5, 0.9, 1.4], dtype=np.float32), requires_grad=True)
out = noise_forward(x2, qp2, z=np.zeros(4, dtype=np.float32), z_bit=0.0)
tsum(out).backward()
print("x grad        :", x2.grad, " (1 inside the boundary, 0 where truncated)")
print("alpha_raw grad:", float(qp2.alpha_raw.grad),
      " (each truncated element pushes the boundary)")

print("\n=== continuous bit-width is itself learnable ===")
qp3 = QuantParams(signed=True, alpha_init=1.0)
qp3.bit_raw.zero_grad()
x3 = Tensor(rng.normal((64,)), requires_grad=True)
out = noise_forward(x3, qp3, rng)
tsum(out).backward()
print("effective bit :", round(float(effective_bit(qp3).data), 3))
print("bit_raw grad  :", float(qp3.bit_raw.grad), " (flows through the step size)")

print("\n=== min-max ablation variant has no learned boundary ===")
w = Tensor(np.array([-2.0, -0.1, 0.0, 0.1, 2.0], dtype=np.float32))
print("min-max 3-bit :", np.round(minmax_forward(w, 3.0, 'quant').data, 3))
qp4 = QuantParams(signed=True, alpha_init=0.5)
qp4.set_bit(3.0)
qp4.mode = "quant"
print("clipped 3-bit :", np.round(quant_forward(w, qp4).data, 3),
      " (outliers saturate, fine steps near zero)")
