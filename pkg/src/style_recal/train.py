"""SGD training loop with step-wise learning-rate schedules and checkpointing.

Determinism contract: a run is a pure function of (model seed, train config,
dataset). Batch order and augmentation draws are derived statelessly from the
config seed and the step counter, so a run resumed from any logged checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .data import Dataset, augment, iterate_batches
from .models import ResNet
from .tensor import Tape, Tensor, cross_entropy

__all__ = [
    "TrainConfig",
    "TrainResult",
    "SGD",
    "lr_at",
    "step_schedule",
    "cifar_recipe",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
]

_SHUFFLE_TAG = 101
_AUG_TAG = 102


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: list[tuple[int, float]] | None = None  # (step, lr), strictly increasing
    seed: int = 0
    augment_policy: str = "none"
    log_every: int = 50
    eval_every: int = 0  # 0 disables mid-run evaluation

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = [(0, self.lr)]
        self.schedule = [(int(s), float(v)) for s, v in self.schedule]
        steps = [s for s, _ in self.schedule]
        if steps != sorted(set(steps)):
            raise ValueError("schedule steps must be strictly increasing")
        if any(v <= 0 for _, v in self.schedule):
            raise ValueError("schedule learning rates must be positive")
        if self.eval_every and self.eval_every % self.log_every != 0:
            raise ValueError("eval_every must be a multiple of log_every")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "schedule": [[s, v] for s, v in self.schedule],
            "seed": self.seed,
            "augment_policy": self.augment_policy,
            "log_every": self.log_every,
            "eval_every": self.eval_every,
        }

    def trajectory_dict(self) -> dict:
        """Fields that define the parameter trajectory; the stopping horizon and
        logging cadence are excluded so a longer run can resume a shorter one."""
        d = self.to_dict()
        for k in ("steps", "log_every", "eval_every"):
            d.pop(k)
        return d


def lr_at(schedule: list[tuple[int, float]], step: int) -> float:
    """Piecewise-constant rate; a boundary's new value applies at that step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    current = schedule[0][1]
    for boundary, value in schedule:
        if step >= boundary:
            current = value
        else:
            break
    return current


def step_schedule(initial: float, boundaries: list[int], factor: float = 0.1) -> list[tuple[int, float]]:
    sched = [(0, initial)]
    value = initial
    for b in boundaries:
        value *= factor
        sched.append((b, value))
    return sched


def cifar_recipe(seed: int = 0) -> TrainConfig:
    """64k iterations at batch 128; 0.2 divided by 10 at 32k and 48k steps."""
    return TrainConfig(
        steps=64000,
        batch_size=128,
        lr=0.2,
        momentum=0.9,
        weight_decay=1e-4,
        schedule=step_schedule(0.2, [32000, 48000]),
        seed=seed,
        augment_policy="pad-crop-flip",
        log_every=200,
    )


class SGD:
    """Momentum SGD with uniform weight decay over every trainable parameter.

    Update per parameter: g' = grad + wd * param; buf = momentum * buf + g';
    param <- param - lr * buf.
    """

    def __init__(self, named_params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        self.named_params = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.named_params.items()}
        self.decay_applied: set[str] = set()

    def zero_grad(self) -> None:
        for p in self.named_params.values():
            p.grad = None

    def step(self, lr: float) -> bool:
        """Apply one update; returns False (no mutation) if any grad is non-finite."""
        grads = {}
        for name, p in self.named_params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                return False
            grads[name] = g
        for name, p in self.named_params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.decay_applied.add(name)
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data -= lr * buf
        # Bookkeeping invariant: decay covers the full trainable set, no exclusions.
        assert self.decay_applied == set(self.named_params)
        return True


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    final_step: int = 0
    diverged: bool = False
    aborted_steps: int = 0
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def config_hash(model_config: dict, train_config: dict) -> str:
    blob = json.dumps({"arch": model_config, "train": train_config}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _model_state(model: ResNet, opt: SGD | None) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        entries["param." + name] = p.data
    for name, buf in model.named_buffers():
        entries["buffer." + name] = buf
    if opt is not None:
        for name, buf in opt.buffers.items():
            entries["opt." + name] = buf
    return entries


def save_checkpoint(path: str | Path, model: ResNet, opt: SGD | None, step: int, cfg_hash: str) -> None:
    entries = {k: v.copy() for k, v in _model_state(model, opt).items()}
    write_container(path, entries, meta={"kind": "checkpoint", "step": step, "config_hash": cfg_hash})


def load_checkpoint(path: str | Path, model: ResNet, opt: SGD | None = None,
                    expect_hash: str | None = None) -> int:
    """Restore parameters, buffers, and optimizer state in place; returns the step."""
    entries, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint container")
    if expect_hash is not None and meta.get("config_hash") not in (None, expect_hash):
        raise ValueError(f"{path}: checkpoint config hash {meta.get('config_hash')} != expected {expect_hash}")
    for name, p in model.named_parameters():
        src = entries["param." + name]
        if src.shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: {src.shape} vs {p.data.shape}")
        p.data = src.astype(p.data.dtype, copy=True)
    for name, buf in model.named_buffers():
        buf[...] = entries["buffer." + name]
    if opt is not None:
        for name in opt.buffers:
            opt.buffers[name] = entries["opt." + name].astype(opt.buffers[name].dtype, copy=True)
    return int(meta["step"])


def evaluate(model: ResNet, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy over the full set in eval mode."""
    was_training = model.training
    model.eval()
    correct = 0
    for images, labels in iterate_batches(dataset, batch_size):
        logits = model(Tensor(images))
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    if was_training:
        model.train()
    return correct / len(dataset)


def train(model: ResNet, dataset: Dataset, cfg: TrainConfig, out_dir: str | Path | None = None,
          eval_dataset: Dataset | None = None, resume_from: str | Path | None = None,
          stop_when=None) -> TrainResult:
    """Run the loop; logs per-interval metrics and checkpoints at log boundaries.

    ``stop_when``, if given, is called with each logged row and ends the run
    early when it returns True (the history up to that point is unchanged).
    """
    n = len(dataset)
    if n < cfg.batch_size:
        raise ValueError(f"dataset of {n} examples smaller than batch size {cfg.batch_size}")
    steps_per_epoch = n // cfg.batch_size  # partial trailing batches are dropped

    opt = SGD(dict(model.named_parameters()), momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    chash = config_hash(model.config.to_dict(), cfg.trajectory_dict())
    start_step = 0
    if resume_from is not None:
        start_step = load_checkpoint(resume_from, model, opt, expect_hash=chash)
    result = TrainResult()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_path / "checkpoint.bin"
        result.metrics_path = out_path / "metrics.csv"

    last_good: dict[str, np.ndarray] | None = None
    window_loss: list[float] = []
    window_hits = 0
    window_count = 0
    perm = None
    perm_epoch = -1

    model.train()
    for step in range(start_step, cfg.steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != perm_epoch:
            perm = np.random.default_rng((cfg.seed, _SHUFFLE_TAG, epoch)).permutation(n)
            perm_epoch = epoch
        sel = perm[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        images = dataset.images[sel]
        labels = dataset.labels[sel]
        if cfg.augment_policy != "none":
            images = augment(images, cfg.augment_policy, np.random.default_rng((cfg.seed, _AUG_TAG, step)))

        lr = lr_at(cfg.schedule, step)
        opt.zero_grad()
        with Tape() as tape:
            logits = model(Tensor(images))
            loss = cross_entropy(logits, labels)
        if not np.isfinite(loss.data).all():
            result.diverged = True
            result.final_step = step
            if last_good is not None:
                _restore_state(model, opt, last_good)
            break
        tape.backward(loss)
        if not opt.step(lr):
            result.aborted_steps += 1

        window_loss.append(float(loss.data))
        window_hits += int((logits.data.argmax(axis=1) == labels).sum())
        window_count += len(labels)

        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            row = {
                "step": step + 1,
                "lr": lr,
                "loss": sum(window_loss) / len(window_loss),
                "top1": window_hits / window_count,
            }
            if eval_dataset is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                row["test_top1"] = evaluate(model, eval_dataset)
            result.rows.append(row)
            window_loss, window_hits, window_count = [], 0, 0
            last_good = {k: v.copy() for k, v in _model_state(model, opt).items()}
            if result.checkpoint_path is not None:
                save_checkpoint(result.checkpoint_path, model, opt, step + 1, chash)
            result.final_step = step + 1
            if stop_when is not None and stop_when(row):
                break

    if not result.diverged and result.final_step == 0:
        result.final_step = start_step
    if result.metrics_path is not None:
        write_metrics_csv(result.metrics_path, result.rows)
    if result.checkpoint_path is not None and not result.diverged:
        save_checkpoint(result.checkpoint_path, model, opt, result.final_step, chash)
    return result


def _restore_state(model: ResNet, opt: SGD, state: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data = state["param." + name].copy()
    for name, buf in model.named_buffers():
        buf[...] = state["buffer." + name]
    for name in opt.buffers:
        opt.buffers[name] = state["opt." + name].copy()


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    fields = ["step", "lr", "loss", "top1"]
    if any("test_top1" in r for r in rows):
        fields.append("test_top1")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items() if k in fields})
