"""Compare tape gradients of the full model with central differences.

ReLU and max-pool make the loss piecewise smooth, so a coordinate is only
compared when the three stencil points share every ReLU sign and pool
winner. Gradients below about 1e-6 show larger relative error; that is
rounding noise in the difference quotient, not a tape error.
Run: python3 demos/gradient_check.py
"""

import numpy as np

from transnorm.config import ModelConfig, TransformerConfig
from transnorm.layers import Conv2d
from transnorm.losses import segmentation_loss
from transnorm.model import TransNorm
from transnorm.tensor import GradTape, Tensor, backward

rng = np.random.default_rng(0)
model = TransNorm(ModelConfig(input_size=32, base_width=8, transformer=TransformerConfig(layers=1, heads=2, dim=16)))
# Redraw conv weights at fan-in scale so gradients sit well above rounding noise.
for m in model.modules():
    if isinstance(m, Conv2d):
        m.weight.data = rng.normal(0.0, 1.0 / np.sqrt(m.weight.data[0].size), m.weight.shape)

x = Tensor(rng.uniform(0.0, 1.0, (2, 1, 32, 32)))
y = (rng.random((2, 32, 32)) < 0.3).astype(np.int64)


def loss_and_pattern():
    with GradTape() as tape:
        value = segmentation_loss(model(x)[0], y).item()
    pattern = []
    for n in tape.nodes:
        if n.op == "relu":
            pattern.append(n.output.data > 0)
        elif n.op == "max_pool2d":
            # winner mask: which input of each 2x2 window was the max
            up = np.repeat(np.repeat(n.output.data, 2, axis=-2), 2, axis=-1)
            pattern.append(n.inputs[0].data == up)
    return value, pattern


model.zero_grad()
with GradTape():
    loss = segmentation_loss(model(x)[0], y)
backward(loss)

h = 1e-6
for name, p in list(model.named_parameters())[::6]:
    idx = tuple(int(v) for v in np.unravel_index(np.argmax(np.abs(p.grad)), p.shape))
    orig = p.data[idx]
    p.data[idx] = orig + h
    up, pat_up = loss_and_pattern()
    p.data[idx] = orig - h
    down, pat_down = loss_and_pattern()
    p.data[idx] = orig
    same = all(np.array_equal(a, b) for a, b in zip(pat_up, pat_down))
    numeric = (up - down) / (2 * h)
    rel = abs(numeric - p.grad[idx]) / max(abs(numeric), abs(p.grad[idx]), 1e-8)
    print(f"{name:40s} tape {p.grad[idx]: .6e}  fd {numeric: .6e}  rel {rel:.1e}{'' if same else '  (kink crossed)'}")
