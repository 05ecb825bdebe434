"""Parameter and FLOP accounting over a :class:`~densekit.plan.LayerPlan`.

Conventions: conv layers have no bias; BN contributes gamma and beta (running
statistics are buffers, not parameters); a linear layer has K*F weights plus K
biases.  One multiply-add counts as 2 FLOPs.  BN, ReLU, pooling and residual
adds cost one FLOP per output element; dropout and bookkeeping entries are free
at test time.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .plan import LayerPlan, LayerSpec, build_plan, with_input_size

FLOP_CONVENTION = "1 multiply-add = 2 FLOPs; BN/ReLU/pool/add = 1 FLOP per output element"


@dataclass
class LayerAudit:
    index: int
    kind: str
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    out_spatial: int
    params: int
    flops: int
    macs: int


@dataclass
class AuditReport:
    variant: str
    input_resolution: int
    layers: list = field(default_factory=list)
    convention: str = FLOP_CONVENTION

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    def params_millions(self) -> float:
        return round(self.total_params / 1e6, 1)

    def by_kind(self) -> dict:
        out: dict = {}
        for l in self.layers:
            agg = out.setdefault(l.kind, {"params": 0, "flops": 0, "macs": 0, "count": 0})
            agg["params"] += l.params
            agg["flops"] += l.flops
            agg["macs"] += l.macs
            agg["count"] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_resolution": self.input_resolution,
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_macs": self.total_macs,
            "by_kind": self.by_kind(),
            "layers": [asdict(l) for l in self.layers],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def to_table(self) -> str:
        cols = ("index", "kind", "in_ch", "out_ch", "kernel", "stride", "out_spatial", "params", "flops")
        widths = (6, 14, 7, 7, 7, 7, 12, 12, 16)
        lines = [
            f"# {self.variant} @ {self.input_resolution}x{self.input_resolution}",
            f"# FLOP convention: {self.convention}",
            "".join(c.rjust(w) for c, w in zip(cols, widths)),
        ]
        for l in self.layers:
            row = (l.index, l.kind, l.in_ch, l.out_ch, l.kernel, l.stride, l.out_spatial, l.params, l.flops)
            lines.append("".join(str(v).rjust(w) for v, w in zip(row, widths)))
        lines.append(
            f"# total params: {self.total_params} ({self.total_params / 1e6:.1f}M)  "
            f"total FLOPs: {self.total_flops}  total MACs: {self.total_macs}"
        )
        return "\n".join(lines)


def layer_params(spec: LayerSpec) -> int:
    if spec.kind == "conv":
        return spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
    if spec.kind == "bn":
        return 2 * spec.out_channels
    if spec.kind == "linear":
        return spec.out_channels * spec.in_channels + spec.out_channels
    return 0


def layer_macs(spec: LayerSpec) -> int:
    if spec.kind == "conv":
        return layer_params(spec) * spec.out_spatial * spec.out_spatial
    if spec.kind == "linear":
        return spec.out_channels * spec.in_channels
    return 0


def layer_flops(spec: LayerSpec) -> int:
    if spec.kind in ("conv", "linear"):
        return 2 * layer_macs(spec)
    if spec.kind in ("bn", "relu", "pool_avg", "pool_max", "global_pool", "add"):
        return spec.out_channels * spec.out_spatial * spec.out_spatial
    return 0


def _report(plan: LayerPlan) -> AuditReport:
    rep = AuditReport(plan.config.variant, plan.config.resolution)
    for s in plan.layers:
        rep.layers.append(LayerAudit(
            s.index, s.kind, s.name, s.in_channels, s.out_channels, s.kernel, s.stride,
            s.out_spatial, layer_params(s), layer_flops(s), layer_macs(s),
        ))
    return rep


def count_params(plan: LayerPlan) -> AuditReport:
    return _report(plan)


def count_flops(plan: LayerPlan, input_resolution: Optional[int] = None) -> AuditReport:
    """FLOPs for one image; re-plans when ``input_resolution`` differs from the plan's."""
    if input_resolution is not None and input_resolution != plan.config.resolution:
        plan = build_plan(with_input_size(plan.config, input_resolution))
    return _report(plan)
