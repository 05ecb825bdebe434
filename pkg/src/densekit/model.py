"""Live models: a parameter store bound to a plan, plus the plan executor."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Tape, Tensor
from .errors import ConfigError, UsageError
from .plan import LayerPlan, build_plan, ArchConfig
from .rng import substream


@dataclass
class Model:
    plan: LayerPlan
    params: "OrderedDict[str, Tensor]"
    running_stats: dict
    mode: str = "train"
    seed: int = 0

    @property
    def config(self) -> ArchConfig:
        return self.plan.config

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class ForwardTrace:
    sources: dict = field(default_factory=dict)   # slot -> list of retained outputs
    widths: dict = field(default_factory=dict)    # "block{b}.layer{l}" -> input channels seen
    logits: Optional[Tensor] = None


def param_names(plan: LayerPlan) -> list:
    names = []
    for s in plan.layers:
        if s.kind == "conv":
            names.append(f"{s.name}.weight")
        elif s.kind == "bn":
            names += [f"{s.name}.gamma", f"{s.name}.beta"]
        elif s.kind == "linear":
            names += [f"{s.name}.weight", f"{s.name}.bias"]
    return names


def init_model(plan_or_config, seed: int = 0) -> Model:
    """He-normal conv and classifier weights, unit BN scale, zero shifts and biases."""
    plan = plan_or_config if isinstance(plan_or_config, LayerPlan) else build_plan(plan_or_config)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    running = {}
    for i, s in enumerate(plan.layers):
        if s.kind == "conv":
            fan_in = s.kernel * s.kernel * s.in_channels
            rng = substream(seed, "init", i)
            w = rng.standard_normal((s.out_channels, s.in_channels, s.kernel, s.kernel))
            params[f"{s.name}.weight"] = Tensor(w * np.sqrt(2.0 / fan_in), requires_grad=True)
        elif s.kind == "bn":
            params[f"{s.name}.gamma"] = Tensor(np.ones(s.out_channels), requires_grad=True)
            params[f"{s.name}.beta"] = Tensor(np.zeros(s.out_channels), requires_grad=True)
            running[s.name] = ops.RunningStats.fresh(s.out_channels)
        elif s.kind == "linear":
            rng = substream(seed, "init", i)
            w = rng.standard_normal((s.out_channels, s.in_channels)) * np.sqrt(2.0 / s.in_channels)
            params[f"{s.name}.weight"] = Tensor(w, requires_grad=True)
            params[f"{s.name}.bias"] = Tensor(np.zeros(s.out_channels), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return Model(plan, params, running, "train", seed)


def forward(model: Model, batch, rng: Optional[np.random.Generator] = None):
    """Run the plan on ``batch`` [N,3,H,W]; returns ``(logits, ForwardTrace)``.

    Dropout layers (train mode only) draw masks from ``rng``; when omitted a
    fixed substream of the model seed is used.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.resolution, cfg.resolution):
        raise ConfigError(
            f"input batch shape {x.shape} does not match the plan's "
            f"[N,3,{cfg.resolution},{cfg.resolution}]"
        )
    mode = model.mode
    if mode == "train" and rng is None:
        rng = substream(model.seed, "dropout")
    p = model.params
    trace = ForwardTrace()
    slots = trace.sources
    cur = x
    for s in model.plan.layers:
        kind = s.kind
        if kind == "conv":
            src = slots[s.slot][-1] if s.slot else cur
            out = ops.conv2d(src, p[f"{s.name}.weight"], s.stride, s.padding)
            if s.slot:
                slots[s.slot][-1] = out
            else:
                cur = out
        elif kind == "bn":
            cur = ops.batch_norm(cur, p[f"{s.name}.gamma"], p[f"{s.name}.beta"],
                                 model.running_stats[s.name], mode)
        elif kind == "relu":
            cur = ops.relu(cur)
        elif kind == "dropout":
            cur = ops.dropout(cur, cfg.dropout_rate, mode, rng)
        elif kind == "store":
            # layer 0 opens a dense block; residual shortcuts keep one entry
            if s.slot == "res" or s.layer == 0:
                slots[s.slot] = [cur]
            else:
                slots[s.slot].append(cur)
        elif kind == "concat_source":
            pool = slots[s.slot]
            cur = ops.concat_channels([pool[i] for i in s.sources])
            if s.layer > 0:
                trace.widths[f"{s.slot}.layer{s.layer}"] = [pool[i].shape[1] for i in s.sources]
        elif kind == "add":
            cur = ops.add(cur, slots[s.slot][-1])
        elif kind == "pool_avg":
            cur = ops.avg_pool2d(cur, s.kernel, s.stride)
        elif kind == "pool_max":
            cur = ops.max_pool2d(cur, s.kernel, s.stride, s.padding)
        elif kind == "global_pool":
            cur = ops.global_avg_pool(cur)
        elif kind == "linear":
            cur = ops.linear(cur, p[f"{s.name}.weight"], p[f"{s.name}.bias"])
        else:
            raise ConfigError(f"unknown layer kind {kind!r} in plan")
    trace.logits = cur
    return cur, trace


def loss_and_grads(model: Model, batch, labels, rng: Optional[np.random.Generator] = None,
                   return_logits: bool = False):
    """Cross-entropy loss and the gradient of every parameter (name -> ndarray)."""
    if model.mode != "train":
        raise UsageError("loss_and_grads requires the model to be in train mode")
    model.zero_grad()
    with Tape() as tape:
        logits, _ = forward(model, batch, rng)
        loss = ops.softmax_cross_entropy(logits, labels)
        tape.backward(loss)
    grads = OrderedDict()
    for name, t in model.params.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    if return_logits:
        return loss.item(), grads, logits.data
    return loss.item(), grads


def predict(model: Model, batch) -> np.ndarray:
    """Eval-mode logits without recording a tape."""
    prev = model.mode
    model.eval()
    try:
        logits, _ = forward(model, batch)
    finally:
        model.mode = prev
    return logits.data


def copy_params(model: Model) -> dict:
    return {k: v.data.copy() for k, v in model.params.items()}


def set_param(model: Model, name: str, value) -> None:
    t = model.params[name]
    arr = np.asarray(value, dtype=t.data.dtype)
    if arr.shape != t.shape:
        raise ConfigError(f"{name}: expected shape {t.shape}, got {arr.shape}")
    t.data = np.ascontiguousarray(arr)
