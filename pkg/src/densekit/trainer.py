"""SGD training loop with step learning-rate schedule, Nesterov momentum and
weight decay, plus evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, NormStats, batcher, compute_norm_stats, split_validation
from .errors import ConfigError, TrainingDivergedError, UsageError
from .model import Model, loss_and_grads, predict
from .ops import cross_entropy_with_grad
from .rng import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    dropout_rate: Optional[float] = None    # None keeps the architecture's value
    lr_milestones: tuple = (0.5, 0.75)
    seed: int = 42
    val_fraction: float = 0.0
    limit_train_n: Optional[int] = None
    log_every: int = 0
    augment: bool = True
    decay_bn: bool = True
    eval_batch_size: int = 256
    eval_train: bool = False     # also log eval-mode error on the training set

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(float(m) for m in self.lr_milestones))
        ms = self.lr_milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"lr_milestones must be strictly increasing in (0,1), got {ms}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**doc)


PRESETS = {
    # full recipe; far too slow for CI on a CPU
    "paper-cifar": TrainConfig(epochs=300, batch_size=64),
    "desk": TrainConfig(epochs=20, batch_size=64, limit_train_n=5000),
    # kept for reference only: 90 epochs, lr /10 at epochs 30 and 60
    "paper-imagenet": TrainConfig(epochs=90, batch_size=256, lr_milestones=(1 / 3, 2 / 3), augment=False),
}


def load_train_config(path_or_preset) -> TrainConfig:
    if str(path_or_preset) in PRESETS:
        return PRESETS[str(path_or_preset)]
    with open(path_or_preset, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path_or_preset}: invalid JSON ({exc})") from exc
    if "preset" in doc:
        base = PRESETS[doc.pop("preset")].to_dict()
        base.update(doc)
        doc = base
    return TrainConfig.from_dict(doc)


def lr_schedule(epoch: int, total_epochs: int, base_lr: float, milestones=(0.5, 0.75)) -> float:
    """Divide ``base_lr`` by 10 at each milestone fraction of ``total_epochs``."""
    drops = sum(1 for m in milestones if epoch >= math.floor(m * total_epochs))
    return base_lr * 10.0 ** (-drops)


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, model: Model) -> "OptimizerState":
        return cls({k: np.zeros_like(v.data) for k, v in model.params.items()}, 0)


def sgd_step(model: Model, grads: dict, state: OptimizerState, lr: float, momentum: float,
             weight_decay: float, nesterov: bool = True, decay_mask: Optional[dict] = None) -> None:
    """One SGD update without dampening, in place.

    g' = g + wd*w;  v = mu*v + g';  w -= lr*(g' + mu*v) (Nesterov) or lr*v.
    """
    for name, p in model.params.items():
        if name not in grads:
            raise UsageError(f"missing gradient for parameter {name}")
        w = p.data
        g = np.asarray(grads[name], dtype=w.dtype)
        wd = weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        if wd:
            g = g + w.dtype.type(wd) * w
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        mu = w.dtype.type(momentum)
        v *= mu
        v += g
        step = g + mu * v if nesterov else v
        w -= w.dtype.type(lr) * step
    state.step += 1


def is_bn_param(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


@dataclass
class EvalResult:
    top1_error: float
    mean_loss: float

    def to_dict(self) -> dict:
        return {"top1_error": self.top1_error, "loss": self.mean_loss}


def top1_error(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) differs from the label."""
    return float(np.mean(np.argmax(logits, axis=1) != np.asarray(labels)))


def evaluate(model: Model, dataset: Dataset, stats: NormStats, batch_size: int = 256) -> EvalResult:
    """Top-1 error (argmax ties go to the lowest class index) and mean loss."""
    prev = model.mode
    model.eval()
    wrong = 0
    loss_sum = 0.0
    try:
        for x, y in batcher(dataset, batch_size, shuffle_seed=None, stats=stats):
            logits = predict(model, x)
            wrong += int(np.sum(np.argmax(logits, axis=1) != y))
            loss, _ = cross_entropy_with_grad(logits, y)
            loss_sum += loss * len(y)
    finally:
        model.mode = prev
    n = len(dataset)
    return EvalResult(wrong / n, loss_sum / n)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    norm_stats: Optional[NormStats] = None

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}


def median_smooth(values, window: int = 3) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([np.median(v[max(0, i - half):i + half + 1]) for i in range(len(v))])


def loss_trend_flagged(losses, epochs: int = 5) -> bool:
    """True when the median-smoothed loss of the first epochs ever increases."""
    sm = median_smooth(list(losses)[:epochs])
    return bool(np.any(np.diff(sm) > 0))


def _prepare_train(train: Dataset, cfg: TrainConfig) -> tuple:
    if cfg.limit_train_n is not None:
        train = train.subset(np.arange(min(cfg.limit_train_n, len(train))))
    return split_validation(train, cfg.val_fraction, cfg.seed)


def train(
    model: Model,
    train_set: Dataset,
    test_set: Optional[Dataset],
    cfg: TrainConfig,
    out_dir=None,
    report_path=None,
    resume: Optional["ckpt.Checkpoint"] = None,
    stop_epoch: Optional[int] = None,
) -> TrainReport:
    """Run ``cfg.epochs`` epochs of SGD (or up to ``stop_epoch``).

    Each epoch logs ``{epoch, lr, train_loss, train_err, test_err, wall_seconds}``
    to ``report_path`` as a JSON line and writes ``{out_dir}/epoch_{n}.dkpt``.
    """
    if model.mode != "train":
        raise UsageError("train() requires the model to be in train mode")
    if cfg.dropout_rate is not None and cfg.dropout_rate != model.config.dropout_rate:
        raise ConfigError(
            f"train config dropout_rate {cfg.dropout_rate} differs from the model's "
            f"{model.config.dropout_rate}; build the model with the intended rate"
        )
    train_set, val_set = _prepare_train(train_set, cfg)
    stats = compute_norm_stats(train_set)
    state = OptimizerState.zeros_like(model)
    start = 0
    if resume is not None:
        model = resume.model
        model.train()
        start = resume.epoch
        for name in model.params:
            state.velocity[name] = resume.tensors[f"velocity/{name}"].copy()
        state.step = int(resume.extra.get("opt_step", 0))
        stats = NormStats.from_dict(resume.extra["norm_stats"])
    decay_mask = None if cfg.decay_bn else {k: not is_bn_param(k) for k in model.params}

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = TrainReport(norm_stats=stats)
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)

    for epoch in range(start, end):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg.epochs, cfg.base_lr, cfg.lr_milestones)
        loss_sum, wrong, seen = 0.0, 0, 0
        for step, (x, y) in enumerate(batcher(train_set, cfg.batch_size, cfg.seed, epoch,
                                              stats, augment_images=cfg.augment)):
            rng = substream(cfg.seed, "dropout", epoch, step)
            loss, grads, logits = loss_and_grads(model, x, y, rng, return_logits=True)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}, lr {lr}"
                )
            sgd_step(model, grads, state, lr, cfg.momentum, cfg.weight_decay,
                     cfg.nesterov, decay_mask)
            loss_sum += loss * len(y)
            wrong += int(np.sum(np.argmax(logits, axis=1) != y))
            seen += len(y)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("epoch %d step %d lr %.4g loss %.4f", epoch, step, lr, loss)
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_err": wrong / seen,
            "test_err": None,
            "seed": cfg.seed,
        }
        if test_set is not None:
            record["test_err"] = evaluate(model, test_set, stats, cfg.eval_batch_size).top1_error
        if cfg.eval_train:
            record["train_eval_err"] = evaluate(model, train_set, stats,
                                                cfg.eval_batch_size).top1_error
        if val_set is not None:
            record["val_err"] = evaluate(model, val_set, stats, cfg.eval_batch_size).top1_error
        record["wall_seconds"] = round(time.perf_counter() - t0, 3)
        report.records.append(record)
        log.info("epoch %d: %s", epoch + 1, record)
        if report_path is not None:
            with open(report_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out is not None:
            path = out / f"epoch_{epoch + 1}.dkpt"
            ckpt.save_checkpoint(
                model, path, epoch=epoch + 1,
                rng_state={"seed": cfg.seed, "next_epoch": epoch + 1},
                extra={"norm_stats": stats.to_dict(), "opt_step": state.step,
                       "train_config": cfg.to_dict()},
                extra_tensors={f"velocity/{k}": v for k, v in state.velocity.items()},
            )
            report.checkpoints.append(path)
    if len(report.records) >= 2 and loss_trend_flagged([r["train_loss"] for r in report.records]):
        report.flags.append("train loss increased over the first epochs (median-smoothed)")
    report.model = model
    return report
