"""Training protocol, evaluation, checkpoints and multi-seed experiment records.

SGD with momentum 0.9, weight decay 1e-4 (not on polynomial coefficients or
batch-norm affines), initial learning rate 0.05 with per-epoch cosine
annealing to zero, softmax cross-entropy, batches of 128.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset, Split, iterate_batches
from .network import ArchConfig, build_model, coefficient_parameters, count_weights, project_coefficients

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "SeedRun",
    "ExperimentRecord",
    "CHECKPOINT_VERSION",
    "make_optimizer",
    "cosine_lr",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "run_experiment",
    "read_records",
    "emit_tradeoff_report",
    "seed_everything",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 400
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    seeds: tuple[int, ...] = (0, 1, 2)
    device: str = "cpu"
    train_subset: int | None = None
    test_subset: int | None = None
    checkpoint_every: int = 10

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        for name in ("batch_size", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.schedule != "cosine":
            raise ValueError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, checkpoint: Path | None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        where = f"; last good checkpoint {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss in epoch {epoch}{where}")


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Learning rate used during ``epoch`` (0-based)."""
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * epoch / config.epochs))


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.SGD:
    no_decay = {id(p) for p in coefficient_parameters(model)}
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            no_decay.update(id(p) for p in m.parameters())
    decay = [p for p in model.parameters() if id(p) not in no_decay]
    rest = [p for p in model.parameters() if id(p) in no_decay]
    groups = [{"params": decay, "weight_decay": config.weight_decay, "name": "decay"},
              {"params": rest, "weight_decay": 0.0, "name": "no_decay"}]
    return torch.optim.SGD(groups, lr=config.lr, momentum=config.momentum)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    train_accuracies: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def smoothed_nonincreasing(self, window: int = 20) -> bool:
        """Whether moving averages of the epoch loss never rise."""
        if len(self.losses) < window:
            window = max(1, len(self.losses))
        avg = np.convolve(self.losses, np.ones(window) / window, mode="valid")
        return bool(np.all(np.diff(avg) <= 1e-12))


def _config_digest(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: nn.Module, *, epoch: int, config_digest: str = "",
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "polymgnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config_digest": config_digest,
        "arch": model.config.to_dict(),
        "epoch": epoch,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != "polymgnet-checkpoint":
        raise ValueError(f"{path} is not a polymgnet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} has checkpoint version {payload.get('version')}, "
                         f"expected {CHECKPOINT_VERSION}")
    model = build_model(ArchConfig.from_dict(payload["arch"]), initialize=False)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta


@torch.no_grad()
def evaluate(model: nn.Module, split: Split, mean, std, batch_size: int = 500) -> float:
    """Top-1 accuracy in percent, in evaluation mode."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    correct = 0
    for x, y in iterate_batches(split, batch_size, mean, std, dtype=dtype):
        correct += int((model(x).argmax(1) == y).sum())
    model.train(was_training)
    return 100.0 * correct / max(1, len(split))


def train(model: nn.Module, dataset: Dataset, config: TrainConfig, *, seed: int = 0,
          checkpoint_dir: str | Path | None = None, config_digest: str = "") -> TrainReport:
    """Run the SGD/cosine protocol; checkpoints land in ``checkpoint_dir`` when given."""
    optimizer = make_optimizer(model, config)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs, eta_min=0.0)
    train_split = dataset.train.subset(config.train_subset, seed)
    dtype = next(model.parameters()).dtype
    report = TrainReport()
    last_good: Path | None = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    for epoch in range(config.epochs):
        model.train()
        gen = torch.Generator().manual_seed(seed * 100_003 + epoch)
        total, correct, loss_sum = 0, 0, 0.0
        lr = optimizer.param_groups[0]["lr"]
        for x, y in iterate_batches(train_split, config.batch_size, dataset.mean, dataset.std,
                                    train=True, generator=gen, dtype=dtype):
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, last_good)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            project_coefficients(model)
            loss_sum += loss.item() * y.numel()
            correct += int((logits.argmax(1) == y).sum())
            total += y.numel()
        scheduler.step()
        report.losses.append(loss_sum / total)
        report.train_accuracies.append(100.0 * correct / total)
        report.learning_rates.append(lr)
        log.info("epoch %d loss %.4f acc %.2f lr %.5f", epoch, report.losses[-1],
                 report.train_accuracies[-1], lr)
        done = epoch + 1 == config.epochs
        if ckpt_dir is not None and (done or (epoch + 1) % config.checkpoint_every == 0):
            last_good = save_checkpoint(ckpt_dir / ("final.pt" if done else "last.pt"), model,
                                        epoch=epoch + 1, config_digest=config_digest)
            report.checkpoints.append(str(last_good))
    return report


@dataclass
class SeedRun:
    seed: int
    status: str  # "ok" or "failed: <reason>"
    test_accuracy: float | None = None
    train_accuracy: float | None = None
    total_weights: int | None = None
    formula_weights: int | None = None
    wall_time: float | None = None
    checkpoint: str | None = None


@dataclass
class ExperimentRecord:
    config_digest: str
    family: str
    channel_scale: float
    placement: str
    init_strategy: str
    dataset: str
    runs: list[SeedRun]
    mean_test: float | None = None
    std_test: float | None = None
    mean_train: float | None = None
    std_train: float | None = None
    partial: bool = False
    digest: str = ""

    def finalize(self) -> "ExperimentRecord":
        ok = [r for r in self.runs if r.status == "ok"]
        self.partial = len(ok) < len(self.runs)
        if ok:
            test = np.array([r.test_accuracy for r in ok])
            tr = np.array([r.train_accuracy for r in ok])
            # population std so that a single seed reports 0 rather than nan
            self.mean_test, self.std_test = float(test.mean()), float(test.std())
            self.mean_train, self.std_train = float(tr.mean()), float(tr.std())
        stable = asdict(self)
        stable.pop("digest")
        for r in stable["runs"]:
            r.pop("wall_time")
            r.pop("checkpoint")
        self.digest = _config_digest(stable)
        return self

    @property
    def weights(self) -> int | None:
        return next((r.total_weights for r in self.runs if r.total_weights is not None), None)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ExperimentRecord":
        d = json.loads(line)
        d["runs"] = [SeedRun(**r) for r in d["runs"]]
        return cls(**d)


def run_experiment(arch: ArchConfig, config: TrainConfig, dataset: Dataset, *,
                   out_dir: str | Path | None = None, config_digest: str | None = None,
                   deterministic: bool = True) -> ExperimentRecord:
    """Train one model per seed and aggregate test/train accuracy as mean and std."""
    if config_digest is None:
        config_digest = _config_digest({"arch": arch.to_dict(), "train": config.to_dict()})
    out = Path(out_dir) if out_dir is not None else None
    test_split = dataset.test.subset(config.test_subset, 0)
    runs = []
    for seed in config.seeds:
        start = time.perf_counter()
        seed_everything(seed, deterministic)
        model = build_model(arch, initialize=True, seed=seed)
        ckpt_dir = out / "checkpoints" / config_digest / f"seed{seed}" if out else None
        counts = count_weights(model)
        try:
            train(model, dataset, config, seed=seed, checkpoint_dir=ckpt_dir, config_digest=config_digest)
        except (TrainingDiverged, FloatingPointError) as exc:
            log.warning("seed %d failed: %s", seed, exc)
            runs.append(SeedRun(seed, f"failed: {exc}", total_weights=counts.total_count,
                                formula_weights=counts.formula_count,
                                wall_time=time.perf_counter() - start))
            continue
        train_split = dataset.train.subset(config.train_subset, seed)
        runs.append(SeedRun(
            seed, "ok",
            test_accuracy=evaluate(model, test_split, dataset.mean, dataset.std),
            train_accuracy=evaluate(model, train_split, dataset.mean, dataset.std),
            total_weights=counts.total_count, formula_weights=counts.formula_count,
            wall_time=time.perf_counter() - start,
            checkpoint=str(ckpt_dir / "final.pt") if ckpt_dir else None))
    record = ExperimentRecord(config_digest, arch.family, arch.channel_scale, arch.placement.code(),
                              arch.init_strategy, dataset.source, runs).finalize()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.jsonl", "a") as fh:
            fh.write(record.to_json() + "\n")
    return record


def read_records(path: str | Path) -> list[ExperimentRecord]:
    with open(path) as fh:
        return [ExperimentRecord.from_json(line) for line in fh if line.strip()]


def emit_tradeoff_report(records: Sequence[ExperimentRecord], out_dir: str | Path,
                         plot: bool = True) -> tuple[Path, Path | None]:
    """CSV of (family, scale, weights, mean accuracy, std) and a weights-vs-accuracy scatter."""
    if not records:
        raise ValueError("need at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "tradeoff.csv"
    rows = [(r.family, r.channel_scale, r.weights, r.mean_test, r.std_test) for r in records]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "channel_scale", "weights", "mean_test_accuracy", "std_test_accuracy"])
        writer.writerows(rows)
    if not plot:
        return csv_path, None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for fam in sorted({r[0] for r in rows}):
        pts = sorted((w, m, s) for f, _, w, m, s in rows if f == fam and m is not None)
        if pts:
            w, m, s = zip(*pts)
            ax.errorbar(w, m, yerr=s, marker="o", capsize=3, label=fam)
    ax.set_xscale("log")
    ax.set_xlabel("learnable weights")
    ax.set_ylabel("test accuracy [%]")
    ax.legend()
    fig.tight_layout()
    png = out / "tradeoff.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return csv_path, png
