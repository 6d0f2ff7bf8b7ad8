"""A smoke-scale training run end to end.

Trains poly_q2 at a quarter of the default channels with its tuned placement
and with every batch-norm/ReLU site switched off, then writes the
accuracy/weight report.  CIFAR-10 is used when the archive is present
(see $POLYMGNET_DATA); otherwise a synthetic CIFAR-shaped set stands in, which
exercises the pipeline but says nothing about CIFAR accuracy.

    python demos/04_smoke_training.py [epochs]
"""
import logging
import sys
from pathlib import Path

from polymgnet.data import DatasetUnavailable, load_dataset, synthetic_dataset
from polymgnet.network import ArchConfig
from polymgnet.train import TrainConfig, emit_tradeoff_report, run_experiment

logging.basicConfig(level=logging.INFO, format="%(message)s")
OUT = Path(__file__).parent / "out" / "smoke"
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

try:
    data = load_dataset()
    cfg = TrainConfig(epochs=epochs, seeds=(0,), train_subset=5000, test_subset=2000)
except DatasetUnavailable:
    print("CIFAR-10 not found; using the synthetic stand-in")
    data = synthetic_dataset(1024, 512)
    cfg = TrainConfig(epochs=epochs, seeds=(0,))

records = []
for placement in (None, "linear"):
    arch = ArchConfig("poly_q2", channel_scale=0.25, placement=placement)
    rec = run_experiment(arch, cfg, data, out_dir=OUT)
    print(f"placement {arch.placement.code():>16s}: test {rec.mean_test:.2f}%  train {rec.mean_train:.2f}%"
          f"  ({rec.weights:,d} weights)")
    records.append(rec)

csv_path, png = emit_tradeoff_report(records, OUT)
print(f"report: {csv_path}, {png}")
