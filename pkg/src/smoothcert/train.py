"""Gaussian-noise-augmented training, evaluation and joint adaptation."""

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from smoothcert import tensor as T
from smoothcert.peft import attach
from smoothcert.vit import VitModel, forward, predict_logits

MODES = ("clean_pretrain", "noise_finetune", "joint_adapt")
OPTIMIZERS = ("adam", "sgd")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 0.25
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float | None = None
    optimizer: str = "adam"
    seed: int = 0
    mode: str = "noise_finetune"
    eval_size: int = 500

    def __post_init__(self):
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ValueError(f"train.sigma must be finite and >= 0, got {self.sigma}")
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ValueError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"train.optimizer must be one of {OPTIMIZERS}")
        if self.mode not in MODES:
            raise ValueError(f"train.mode must be one of {MODES}")
        if self.mode == "clean_pretrain" and self.sigma != 0:
            raise ValueError("clean_pretrain trains without noise; set train.sigma=0")

    def lr_for(self, model):
        """Explicit rate, else 1e-3 for PEFT and from-scratch pretraining, 1e-4 for full fine-tuning."""
        if self.learning_rate is not None:
            return self.learning_rate
        full = model.peft is not None and model.peft.method == "full"
        return 1e-4 if full and self.mode != "clean_pretrain" else 1e-3

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(name, params, lr):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


def augment_batch(images, sigma, rng):
    """``images + N(0, sigma^2)`` per pixel, unclipped; sigma=0 returns an exact copy."""
    images = np.asarray(images)
    if sigma == 0:
        return images.copy()
    if images.dtype not in (np.float32, np.float64):
        images = images.astype(np.float32)
    noise = rng.standard_normal(images.shape, dtype=images.dtype)
    noise *= sigma
    noise += images
    return noise


def batch_rng(seed, epoch, batch_index):
    """Noise stream for one batch, fixed by (seed, epoch, batch) alone."""
    return np.random.default_rng([seed, epoch, batch_index, 1])


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def evaluate(classifier, dataset, sigma=0.0, seed=0, batch_size=256):
    """Top-1 accuracy under one noise draw per image.

    ``classifier`` is a :class:`VitModel` or any callable mapping a batch of
    images to class scores.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(classifier, VitModel):
        def score(x):
            return predict_logits(classifier, x, batch_size)
    else:
        score = classifier
    rng = np.random.default_rng([seed, 7])
    correct = 0
    for s in range(0, len(dataset), batch_size):
        x = dataset.images[s:s + batch_size]
        if sigma > 0:
            x = augment_batch(x, sigma, rng)
        pred = np.argmax(np.asarray(score(x)), axis=1)
        correct += int((pred == dataset.labels[s:s + batch_size]).sum())
    return correct / len(dataset)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    clean_acc: float
    noisy_acc: float


@dataclass
class TrainResult:
    model: VitModel
    trace: list = field(default_factory=list)

    def write_csv(self, path, header_lines=()):
        write_trace(self.trace, path, header_lines)


def write_trace(trace, path, header_lines=()):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "clean_acc", "noisy_acc"])
        for s in trace:
            w.writerow([s.epoch, f"{s.mean_loss:.6f}", f"{s.clean_acc:.4f}", f"{s.noisy_acc:.4f}"])


def train(model, dataset, config, eval_data=None, on_batch=None, log=None):
    """Minimise cross-entropy of ``model(x + delta)`` over the trainable tensors.

    Fresh noise is drawn for every batch of every epoch from a stream keyed by
    ``(seed, epoch, batch)``. Each epoch appends an :class:`EpochStats` with the
    mean training loss and single-draw accuracies on ``eval_data`` (default: the
    first ``eval_size`` training examples). ``on_batch(epoch, batch, indices,
    noisy_images)`` is called before every step.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    params = list(model.trainable_tensors().values())
    if not params:
        raise ValueError("model has no trainable tensors; attach a PEFT method or use method=full")
    if config.mode != "clean_pretrain" and model.peft is None and not model.trainable:
        raise ValueError(f"{config.mode} needs an attached PEFT state")
    if eval_data is None:
        eval_data = dataset.take(np.arange(min(config.eval_size, len(dataset))), "train-eval")
    dtype = model.dtype
    opt = make_optimizer(config.optimizer, params, config.lr_for(model))
    result = TrainResult(model)
    n, bs = len(dataset), config.batch_size
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, n)
        total = 0.0
        for b, s in enumerate(range(0, n, bs)):
            idx = order[s:s + bs]
            x = augment_batch(dataset.images[idx].astype(dtype, copy=False), config.sigma,
                              batch_rng(config.seed, epoch, b))
            if on_batch is not None:
                on_batch(epoch, b, idx, x)
            T.zero_grad(params)
            loss = T.softmax_cross_entropy(forward(model, x), dataset.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                   f"(lr={opt.lr}, sigma={config.sigma})")
            T.backward(loss)
            opt.step()
            total += value * len(idx)
        stats = EpochStats(epoch + 1, total / n, evaluate(model, eval_data, 0.0, config.seed),
                           evaluate(model, eval_data, config.sigma, config.seed + 1))
        result.trace.append(stats)
        if log is not None:
            log(stats)
    T.zero_grad(params)
    return result


def joint_adapt(pretrained, new_dataset, config, peft_config, seed=0, **kw):
    """One PEFT run on the noise-augmented downstream data."""
    cfg = TrainConfig(**{**config.to_dict(), "mode": "joint_adapt"})
    return train(attach(pretrained, peft_config, seed), new_dataset, cfg, **kw)


def two_stage_adapt(pretrained, new_dataset, clean_config, noise_config, peft_config, seed=0, **kw):
    """Clean downstream adaptation followed by noise fine-tuning of the same PEFT state."""
    clean = TrainConfig(**{**clean_config.to_dict(), "sigma": 0.0, "mode": "noise_finetune"})
    first = train(attach(pretrained, peft_config, seed), new_dataset, clean, **kw)
    second = train(first.model, new_dataset, noise_config, **kw)
    second.trace = first.trace + [EpochStats(len(first.trace) + s.epoch, s.mean_loss, s.clean_acc,
                                             s.noisy_acc) for s in second.trace]
    return second
