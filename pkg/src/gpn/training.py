"""BPTT training: losses, Adam, plateau LR decay, early stopping, metrics."""

from __future__ import annotations

import csv
import enum
import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Value
from .checkpoint import CheckpointBundle
from .datasets import BinnedDataset, batch_iter

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6


class LossMode(enum.Enum):
    ALL_STEP = "all_step"
    LAST_STEP = "last_step"


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, msg: str, checkpoint: CheckpointBundle | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    steps: int = 40
    lr: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 150
    loss_mode: LossMode = LossMode.ALL_STEP
    lr_decay_factor: float = 0.5
    lr_patience: int = 5
    lr_threshold: float = 1e-3
    early_stop_patience: int = 20
    seed: int = 0
    augment: str | None = "per_step"
    average: str = "logits"  # or "probs": average softmax outputs over time
    max_iterations: int | None = None

    def __post_init__(self):
        if isinstance(self.loss_mode, str):
            self.loss_mode = LossMode(self.loss_mode.lower())
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if self.lr < 0:
            out.append("lr must be >= 0")
        if self.steps < 1:
            out.append("T must be >= 1")
        if self.batch_size < 1:
            out.append("batch size must be >= 1")
        if self.max_epochs < 1:
            out.append("epochs must be >= 1")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            out.append("patience values must be >= 1")
        if not 0 < self.lr_decay_factor < 1:
            out.append("lr decay factor must lie in (0, 1)")
        if self.average not in ("logits", "probs"):
            out.append("average must be 'logits' or 'probs'")
        if self.augment not in (None, "per_step", "per_sample"):
            out.append("augment must be per_step, per_sample or none")
        return out


SHD_RECIPE = dict(steps=40, lr=5e-4, batch_size=128, max_epochs=150)
SSC_RECIPE = dict(steps=60, lr=1e-3, batch_size=1024, max_epochs=300)

# candidate constants for gates replaced by fixed values
ABLATION_GRID = {"beta": (0.3, 0.5, 0.7, 0.9), "v_th": (0.5, 1.0, 1.5)}


def ablation_grid(ablation) -> list[dict]:
    """Constant settings to try for an ablation: beta if FI is ablated, v_th if T is."""
    keys = [k for k, gate in (("beta", "FI"), ("v_th", "T")) if gate in ablation]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(ABLATION_GRID[k] for k in keys))]


# ---------------------------------------------------------------------------
# loss


def compute_loss(outputs: list[Value], labels, mode: LossMode = LossMode.ALL_STEP,
                 average: str = "logits") -> Value:
    if not outputs:
        raise ValueError("need at least one time step")
    mode = LossMode(mode) if not isinstance(mode, LossMode) else mode
    if mode is LossMode.LAST_STEP:
        return ad.softmax_cross_entropy(outputs[-1], labels)
    if average == "probs":
        return ad.nll_of_probs(ad.stack_mean([ad.softmax(o) for o in outputs]), labels)
    return ad.softmax_cross_entropy(ad.stack_mean(outputs), labels)


def predict(outputs: list[np.ndarray | Value]) -> np.ndarray:
    """Argmax of time-averaged logits; ties go to the lowest class index."""
    arrs = [o.data if isinstance(o, Value) else o for o in outputs]
    return np.argmax(np.mean(arrs, axis=0), axis=0)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; updates ``params`` in place and returns them."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"{name}: gradient shape {g.shape} != parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class PlateauSchedule:
    """Decay the LR when the epoch train loss stops improving."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5,
                 threshold: float = 1e-3, floor: float = LR_FLOOR):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.floor = floor
        self.best = float("inf")
        self.bad_epochs = 0

    def __call__(self, epoch_loss: float) -> float:
        if epoch_loss < self.best * (1 - self.threshold):
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor) if self.lr > 0 else 0.0
                self.bad_epochs = 0
        return self.lr


def lr_schedule(state: PlateauSchedule, epoch_train_loss: float) -> float:
    return state(epoch_train_loss)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class MetricsLog:
    rows: list[EpochMetrics] = field(default_factory=list)
    test_acc: float | None = None

    HEADER = ("epoch", "train_loss", "train_acc", "val_acc", "lr")

    def append(self, row: EpochMetrics):
        self.rows.append(row)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.epoch] + [repr(float(v)) for v in (r.train_loss, r.train_acc, r.val_acc, r.lr)])

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochMetrics(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                                 float(r["val_acc"]), float(r["lr"])) for r in rows])


# ---------------------------------------------------------------------------
# loops


@contextmanager
def rounded_like_checkpoint(net):
    """Temporarily round parameters to f32, as a saved checkpoint would.

    Validation accuracy is measured this way so that the logged value is
    exactly what a reloaded checkpoint reproduces.
    """
    saved = {k: p.data for k, p in net.params.items()}
    for p in net.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    try:
        yield
    finally:
        for k, p in net.params.items():
            p.data = saved[k]


def evaluate(net, data: BinnedDataset, batch_size: int = 256, indices=None) -> float:
    """Accuracy of time-averaged logits over ``data`` (eval mode)."""
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ValueError("empty split")
    correct = 0
    with ad.no_grad():
        for b in batch_iter(idx, batch_size):
            x, y = data.batch(b)
            res = net.forward_sequence(x, train=False)
            correct += int((predict(res.outputs) == y).sum())
    return correct / idx.size


def evaluate_loss(net, data: BinnedDataset, mode: LossMode = LossMode.ALL_STEP,
                  batch_size: int = 256, indices=None) -> float:
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    total = 0.0
    with ad.no_grad():
        for b in batch_iter(idx, batch_size):
            x, y = data.batch(b)
            res = net.forward_sequence(x, train=False)
            total += compute_loss(res.outputs, y, mode).item() * len(b)
    return total / idx.size


def train_step(net, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, adam: AdamState, lr: float,
               mask_seed: int) -> tuple[float, int]:
    """One forward/backward/Adam update; returns (loss, n_correct)."""
    res = net.forward_sequence(x, train=True, mask_seed=mask_seed)
    loss = compute_loss(res.outputs, y, cfg.loss_mode, cfg.average)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    names = list(net.params)
    grads = ad.grad_of(loss, [net.params[n] for n in names])
    adam_step({n: net.params[n].data for n in names}, dict(zip(names, grads)), adam, lr)
    return value, int((predict(res.outputs) == y).sum())


@dataclass
class TrainResult:
    checkpoint: CheckpointBundle
    metrics: MetricsLog
    epochs_run: int
    stopped_early: bool


def train(net, train_data: BinnedDataset, val_data: BinnedDataset, cfg: TrainConfig,
          test_data: BinnedDataset | None = None,
          on_epoch: Callable[[int, "object", EpochMetrics], bool | None] | None = None) -> TrainResult:
    """Train with early stopping on validation accuracy.

    ``on_epoch(epoch, net, metrics)`` runs after every epoch; returning True
    stops training (used to grab pre-convergence checkpoints).
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation sets must be non-empty")
    adam = AdamState()
    sched = PlateauSchedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_patience, cfg.lr_threshold)
    metrics = MetricsLog()
    lr = cfg.lr
    best: CheckpointBundle | None = None
    best_val = -1.0
    bad = 0
    iteration = 0
    stopped_early = False
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total_loss = 0.0
        correct = 0
        seen = 0
        for b_idx, b in enumerate(batch_iter(np.arange(len(train_data)), cfg.batch_size,
                                             shuffle_seed=cfg.seed, epoch=epoch)):
            x, y = train_data.batch(b, augment=cfg.augment, seed=cfg.seed, epoch=epoch)
            mask_seed = int(np.random.SeedSequence([cfg.seed, epoch, b_idx]).generate_state(1)[0])
            try:
                loss, ok = train_step(net, x, y, cfg, adam, lr, mask_seed)
            except (NonFiniteError, DivergenceError) as err:
                raise DivergenceError(f"epoch {epoch}, batch {b_idx}: {err}", best) from err
            total_loss += loss * len(b)
            correct += ok
            seen += len(b)
            iteration += 1
            if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                break
        train_loss = total_loss / seen
        with rounded_like_checkpoint(net):
            val_acc = evaluate(net, val_data)
        row = EpochMetrics(epoch, train_loss, correct / seen, val_acc, lr)
        metrics.append(row)
        log.info("epoch %d loss %.4f train %.4f val %.4f lr %.2e",
                 epoch, train_loss, row.train_acc, val_acc, lr)
        if val_acc > best_val:
            best_val = val_acc
            best = CheckpointBundle.from_network(net, epoch=epoch, val_acc=val_acc)
            bad = 0
        else:
            bad += 1
        lr = sched(train_loss)
        if on_epoch is not None and on_epoch(epoch, net, row):
            break
        if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
            break
        if bad >= cfg.early_stop_patience:
            stopped_early = True
            break
    if test_data is not None and len(test_data):
        metrics.test_acc = evaluate(best.to_network(), test_data)
    return TrainResult(best, metrics, epoch, stopped_early)
