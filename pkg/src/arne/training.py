"""Loss, Adam optimizer, loss-triggered LR decay, early stopping, and the
seeded training loop.

The loss combines cross entropy over the 8 choice logits with a weighted
binary cross entropy over the choice-summed rule logits; the weight beta
controls how much the auxiliary rule labels steer training.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .model import aggregate_meta_logits
from .tensor import Tensor


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.5e-4
    beta: float = 10.0
    scheduler_trigger_loss: float = 0.6
    scheduler_decay: float = 0.75
    early_stop_patience: int = 3
    grad_clip: float = None
    seed: int = 0
    max_epochs: int = 100

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.early_stop_patience}")
        if not 0 < self.scheduler_decay <= 1:
            raise ConfigError(f"decay must lie in (0, 1], got {self.scheduler_decay}")

    def to_dict(self):
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta": self.beta,
            "scheduler_trigger_loss": self.scheduler_trigger_loss,
            "scheduler_decay": self.scheduler_decay,
            "early_stop_patience": self.early_stop_patience,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "max_epochs": self.max_epochs,
        }


# -- loss ---------------------------------------------------------------


def loss_components(output, targets, meta_matrix, beta):
    """Batch-mean loss: CE(choices) + beta * BCE(summed rule logits).

    output: batched model output; targets: (B,) ints; meta_matrix: (B, 12)
    0/1 floats.  BCE averages over the 12 bits; both terms average over
    the batch.  Returns (total, ce, bce) tensors.
    """
    logits = output.choice_logits
    b, k = logits.shape
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= k:
        raise ContractError(f"targets must lie in [0, {k - 1}]")
    one_hot = np.zeros((b, k), dtype=logits.dtype)
    one_hot[np.arange(b), targets] = 1.0
    ce = -T.sum_(T.log_softmax(logits) * Tensor(one_hot)) / float(b)

    z = aggregate_meta_logits(output.meta_logits)      # (B, 12)
    y = Tensor(np.asarray(meta_matrix, dtype=logits.dtype))
    bce = T.mean(T.softplus(z) - z * y)
    total = ce if beta == 0 else ce + float(beta) * bce
    return total, ce, bce


def choice_accuracy(choice_logits, targets):
    preds = np.argmax(choice_logits.data, axis=-1)
    return float(np.mean(preds == np.asarray(targets)))


# -- optimizer -----------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; parameters without a gradient
    are left untouched."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params.items()) if isinstance(named_params, dict) else list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


def clip_grad_norm(params, max_norm):
    """Scale all gradients so the global L2 norm does not exceed max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# -- schedule and early stopping ------------------------------------------


def schedule_lr(epoch_val_loss, current_lr, trigger=0.6, decay=0.75):
    """Exponential decay triggered whenever the epoch loss falls below
    the trigger threshold."""
    if epoch_val_loss < trigger:
        return current_lr * decay
    return current_lr


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without a new best loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch, loss):
        """Returns (improved, should_stop)."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


# -- training loop ----------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    test_loss: float = None
    test_acc: float = None
    checkpoint: bytes = None

    CSV_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.CSV_FIELDS)
            for row in self.rows:
                writer.writerow([row.epoch, repr(row.train_loss), repr(row.train_acc),
                                 repr(row.val_loss), repr(row.val_acc), repr(row.lr)])

    def summary(self):
        out = {
            "epochs_run": len(self.rows),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
        }
        if self.rows:
            last = self.rows[-1]
            out.update(final_train_loss=last.train_loss, final_train_acc=last.train_acc,
                       final_val_loss=last.val_loss, final_val_acc=last.val_acc)
        if self.test_loss is not None:
            out.update(test_loss=self.test_loss, test_acc=self.test_acc)
        return out

    def save_summary(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def eval_pass(model, dataset, beta, batch_size=64):
    """Loss and choice accuracy over a dataset in eval mode."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    meta = dataset.meta_matrix()
    loss_sum = 0.0
    hits = 0
    try:
        with T.no_grad():
            for idx in _batches(len(dataset), batch_size):
                out = model.forward_batch(dataset.panels[idx])
                total, _, _ = loss_components(out, dataset.targets[idx], meta[idx], beta)
                loss_sum += total.item() * len(idx)
                hits += int(np.sum(np.argmax(out.choice_logits.data, axis=-1) == dataset.targets[idx]))
    finally:
        model.train(was_training)
    return loss_sum / len(dataset), hits / len(dataset)


def train(model, train_set, val_set, cfg, test_set=None):
    """Run the optimization loop; returns a TrainingReport.

    Keeps the checkpoint with the best validation loss and restores it
    into the model before returning.  Deterministic given the seed and
    single-threaded kernels.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("train and validation sets must be non-empty")
    if (train_set.height, train_set.width) != (model.config.height, model.config.width):
        raise ConfigError(
            f"dataset panels are {train_set.height}x{train_set.width} but the model expects "
            f"{model.config.height}x{model.config.width}"
        )
    rng = np.random.default_rng(cfg.seed)
    model.set_rng(rng)
    opt = Adam(model.named_parameters())
    stopper = EarlyStopper(cfg.early_stop_patience)
    report = TrainingReport()
    lr = cfg.lr
    meta = train_set.meta_matrix()

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        hits = 0
        for step, idx in enumerate(_batches(len(train_set), cfg.batch_size, order)):
            out = model.forward_batch(train_set.panels[idx])
            total, _, _ = loss_components(out, train_set.targets[idx], meta[idx], cfg.beta)
            value = total.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            total.backward()
            if cfg.grad_clip:
                clip_grad_norm(model.parameters(), cfg.grad_clip)
            opt.step(lr)
            model.zero_grads()
            loss_sum += value * len(idx)
            hits += int(np.sum(np.argmax(out.choice_logits.data, axis=-1) == train_set.targets[idx]))

        val_loss, val_acc = eval_pass(model, val_set, cfg.beta, cfg.batch_size)
        report.rows.append(EpochRow(
            epoch=epoch,
            train_loss=loss_sum / len(train_set),
            train_acc=hits / len(train_set),
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr,
        ))
        improved, should_stop = stopper.update(epoch, val_loss)
        if improved:
            report.best_epoch = epoch
            report.best_val_loss = val_loss
            report.checkpoint = nn.checkpoint_bytes(model, model.kind)
        lr = schedule_lr(val_loss, lr, cfg.scheduler_trigger_loss, cfg.scheduler_decay)
        if should_stop:
            report.stopped_early = True
            break

    if report.checkpoint is not None:
        _, arrays = nn.load_arrays(io.BytesIO(report.checkpoint))
        model.load_arrays(arrays)
    if test_set is not None and len(test_set) > 0:
        report.test_loss, report.test_acc = eval_pass(model, test_set, cfg.beta, cfg.batch_size)
    return report
