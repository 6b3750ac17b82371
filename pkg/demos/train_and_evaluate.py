"""Train a small TransNorm on synthetic shapes and print the metric report.

Run: python3 demos/train_and_evaluate.py   (about two minutes on one core)
"""

import numpy as np

from transnorm.config import ModelConfig, TransformerConfig
from transnorm.data import SynthSpec, generate, split
from transnorm.metrics import dataset_report
from transnorm.model import TransNorm
from transnorm.tensor import Tensor
from transnorm.training import TrainConfig, fit

# 120 grayscale 64x64 images with 1 to 3 shapes each; class 1 is foreground.
data = generate(SynthSpec(count=120, size=64, seed=3))
train, val, test = split(data, (0.8, 0.1, 0.1), seed=0)
print(f"train {len(train)}  val {len(val)}  test {len(test)}")

config = ModelConfig(base_width=8, transformer=TransformerConfig(layers=2))
model = TransNorm(config)
print(f"{model.parameter_count()} parameters")

# fit keeps the best-validation weights and stops after 10 epochs without improvement.
ckpt = fit(model, train, val, TrainConfig(max_epochs=15, lr=3e-3))
print(f"best epoch {ckpt.meta['best_epoch']} of {ckpt.meta['epochs_run']}")

preds = model.predict(Tensor(test.images))
report = dataset_report(preds, test.masks, config.num_classes, percentile=95)
print(report.to_csv())

# The spatial map W_s the skip gates use, at the transformer's token grid.
model.eval()
_, record = model(Tensor(test.images[:1]))
ws = record.spatial_map.data[0, 0]
print(f"W_s on the 4x4 token grid, min {ws.min():.4f} max {ws.max():.4f}:")
print(np.array2string(ws, precision=4))
