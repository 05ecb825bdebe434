"""Architecture configs and their compilation into explicit layer plans.

A :class:`LayerPlan` is a flat, ordered list of :class:`LayerSpec` entries that
an executor can walk linearly.  Dense connectivity is expressed with two
bookkeeping kinds: ``store`` appends the current activation to a named slot
and ``concat_source`` replaces the current activation by the channel
concatenation of selected slot entries.  Residual networks use the same slot
mechanism together with ``add``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Optional

from .errors import ConfigError

FAMILIES = ("densenet", "resnet_preact")
DATASET_FAMILIES = ("cifar_style", "imagenet_style")

LAYER_KINDS = (
    "conv", "bn", "relu", "pool_avg", "pool_max", "global_pool",
    "concat_source", "store", "add", "linear", "dropout",
)

# Standard ImageNet variants, all with k=32, bottleneck and theta=0.5.
IMAGENET_BLOCKS = {
    121: (6, 12, 24, 16),
    169: (6, 12, 32, 32),
    201: (6, 12, 48, 32),
    264: (6, 12, 64, 48),
}


@dataclass(frozen=True)
class ArchConfig:
    family: str = "densenet"
    depth_L: int = 40
    growth_k: int = 12
    bottleneck: bool = False
    compression_theta: Fraction = Fraction(1)
    dataset_family: str = "cifar_style"
    block_layers: Optional[tuple] = None
    num_classes: int = 10
    dropout_rate: float = 0.0
    input_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "compression_theta", _as_fraction(self.compression_theta))
        if self.block_layers is not None:
            object.__setattr__(self, "block_layers", tuple(int(b) for b in self.block_layers))

    @property
    def initial_channels(self) -> int:
        if self.family == "resnet_preact":
            return 16
        if self.dataset_family == "imagenet_style" or self.bottleneck:
            return 2 * self.growth_k
        return 16

    @property
    def resolution(self) -> int:
        if self.input_size is not None:
            return self.input_size
        return 224 if self.dataset_family == "imagenet_style" else 32

    @property
    def variant(self) -> str:
        if self.family == "resnet_preact":
            return "ResNet-preact"
        suffix = ("B" if self.bottleneck else "") + ("C" if self.compression_theta < 1 else "")
        return "DenseNet" + (f"-{suffix}" if suffix else "")

    def layers_per_block(self) -> tuple:
        """Units per dense block (a bottleneck unit counts once here)."""
        validate(self)
        if self.block_layers is not None:
            return self.block_layers
        per = (self.depth_L - 4) // (6 if self.bottleneck else 3)
        return (per, per, per)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        theta = self.compression_theta
        d["compression_theta"] = float(theta) if theta.denominator in (1, 2, 4, 5, 10) else str(theta)
        if self.block_layers is not None:
            d["block_layers"] = list(self.block_layers)
        if d["input_size"] is None:
            del d["input_size"]
        if d["block_layers"] is None:
            del d["block_layers"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1000)
    return Fraction(value)


def config_from_dict(doc: dict) -> ArchConfig:
    """Build an :class:`ArchConfig` from a JSON object, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("architecture config must be a JSON object")
    known = {f.name for f in fields(ArchConfig)}
    extra = set(doc) - known - {"initial_channels"}
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    kwargs = {k: v for k, v in doc.items() if k != "initial_channels"}
    cfg = ArchConfig(**kwargs)
    if "initial_channels" in doc and doc["initial_channels"] != cfg.initial_channels:
        raise ConfigError(
            f"initial_channels is derived ({cfg.initial_channels}) and cannot be set to "
            f"{doc['initial_channels']}"
        )
    validate(cfg)
    return cfg


def load_config(path) -> ArchConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def implied_depth(cfg: ArchConfig, block_layers) -> int:
    if cfg.family == "resnet_preact":
        return 9 * block_layers[0] + 2
    convs_per_unit = 2 if cfg.bottleneck else 1
    return 1 + convs_per_unit * sum(block_layers) + (len(block_layers) - 1) + 1


def validate(cfg: ArchConfig) -> None:
    if cfg.family not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}, got {cfg.family!r}")
    if cfg.dataset_family not in DATASET_FAMILIES:
        raise ConfigError(f"dataset_family must be one of {DATASET_FAMILIES}, got {cfg.dataset_family!r}")
    if not (0 < cfg.compression_theta <= 1):
        raise ConfigError(f"constraint 0 < theta <= 1 violated: theta={cfg.compression_theta}")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must be in [0, 1), got {cfg.dropout_rate}")
    if cfg.num_classes < 1:
        raise ConfigError("num_classes must be positive")
    if cfg.growth_k < 1:
        raise ConfigError("growth_k must be positive")
    if cfg.input_size is not None and cfg.input_size < 1:
        raise ConfigError("input_size must be positive")

    if cfg.family == "resnet_preact":
        if cfg.dataset_family != "cifar_style":
            raise ConfigError("resnet_preact is only supported for cifar_style inputs")
        if cfg.block_layers is None and (cfg.depth_L < 11 or (cfg.depth_L - 2) % 9):
            raise ConfigError(
                f"unsupported depth L={cfg.depth_L}: constraint (L-2)%9==0 violated"
            )
    elif cfg.block_layers is None:
        if cfg.dataset_family == "imagenet_style":
            raise ConfigError("imagenet_style requires explicit block_layers")
        if cfg.bottleneck:
            if cfg.depth_L < 10 or (cfg.depth_L - 4) % 6:
                raise ConfigError(
                    f"depth L={cfg.depth_L}: constraint (L-4)%6==0 violated for bottleneck networks"
                )
        elif cfg.depth_L < 7 or (cfg.depth_L - 4) % 3:
            raise ConfigError(f"depth L={cfg.depth_L}: constraint (L-4)%3==0 violated")
    if cfg.block_layers is not None:
        if not cfg.block_layers or any(b < 1 for b in cfg.block_layers):
            raise ConfigError(f"block_layers must be positive counts, got {cfg.block_layers}")
        if cfg.family == "resnet_preact" and (
            len(cfg.block_layers) != 3 or len(set(cfg.block_layers)) != 1
        ):
            raise ConfigError("resnet_preact block_layers must be three equal stage sizes")
        if cfg.dataset_family == "imagenet_style" and len(cfg.block_layers) != 4:
            raise ConfigError("imagenet_style requires four block_layers entries")
        want = implied_depth(cfg, cfg.block_layers)
        # ImageNet depths are nominal labels (the 264 variant implies 265 layers)
        if cfg.dataset_family == "cifar_style" and cfg.depth_L != want:
            raise ConfigError(
                f"depth L={cfg.depth_L} inconsistent with block_layers {list(cfg.block_layers)} "
                f"(implies L={want})"
            )


def densenet_bc(depth: int, k: int, **kw) -> ArchConfig:
    return ArchConfig(depth_L=depth, growth_k=k, bottleneck=True,
                      compression_theta=Fraction(1, 2), **kw)


def densenet_imagenet(depth: int, **kw) -> ArchConfig:
    return ArchConfig(depth_L=depth, growth_k=32, bottleneck=True,
                      compression_theta=Fraction(1, 2), dataset_family="imagenet_style",
                      block_layers=IMAGENET_BLOCKS[depth], num_classes=1000, **kw)


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

@dataclass
class LayerSpec:
    index: int
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_spatial: int = 0
    out_spatial: int = 0
    block: int = 0
    layer: int = 0
    slot: Optional[str] = None
    sources: Optional[tuple] = None


@dataclass
class LayerPlan:
    config: ArchConfig
    layers: list = field(default_factory=list)
    block_channels: list = field(default_factory=list)   # (k0, channels at block end)
    block_spatial: list = field(default_factory=list)

    @property
    def total_conv_layers(self) -> int:
        return sum(1 for s in self.layers if s.kind == "conv")

    @property
    def dense_edges(self) -> int:
        return sum(
            len(s.sources) for s in self.layers
            if s.kind == "concat_source" and s.layer > 0
        )

    def edges_in_block(self, block: int) -> int:
        return sum(
            len(s.sources) for s in self.layers
            if s.kind == "concat_source" and s.layer > 0 and s.block == block
        )

    def summary(self) -> dict:
        return {"total_conv_layers": self.total_conv_layers, "dense_edges": self.dense_edges}

    def parametric(self):
        return [s for s in self.layers if s.kind in ("conv", "bn", "linear")]

    def to_dict(self) -> dict:
        layers = []
        for s in self.layers:
            d = asdict(s)
            if d["sources"] is not None:
                d["sources"] = list(d["sources"])
            layers.append(d)
        return {
            "config": self.config.to_json_dict(),
            "layers": layers,
            "block_channels": [list(b) for b in self.block_channels],
            "block_spatial": list(self.block_spatial),
            "summary": self.summary(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "LayerPlan":
        layers = []
        for d in doc["layers"]:
            d = dict(d)
            if d.get("sources") is not None:
                d["sources"] = tuple(d["sources"])
            layers.append(LayerSpec(**d))
        return cls(
            config=config_from_dict(doc["config"]),
            layers=layers,
            block_channels=[tuple(b) for b in doc["block_channels"]],
            block_spatial=list(doc["block_spatial"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "LayerPlan":
        return cls.from_dict(json.loads(text))


class _Builder:
    def __init__(self, cfg: ArchConfig):
        self.plan = LayerPlan(cfg)
        self.channels = 3
        self.spatial = cfg.resolution

    def add(self, kind: str, **kw) -> LayerSpec:
        kw.setdefault("in_channels", self.channels)
        kw.setdefault("out_channels", kw["in_channels"])
        kw.setdefault("in_spatial", self.spatial)
        kw.setdefault("out_spatial", kw["in_spatial"])
        spec = LayerSpec(index=len(self.plan.layers), kind=kind, **kw)
        self.plan.layers.append(spec)
        if spec.slot is None or kind in ("concat_source", "add"):
            self.channels = spec.out_channels
            self.spatial = spec.out_spatial
        return spec

    def conv(self, name, out_ch, kernel, stride=1, padding=None, **kw):
        if padding is None:
            padding = kernel // 2
        in_sp = kw.pop("in_spatial", self.spatial)
        span = in_sp + 2 * padding - kernel
        if span < 0:
            raise ConfigError(
                f"{name}: spatial extent {in_sp} does not tile with kernel {kernel}, stride {stride}"
            )
        return self.add("conv", name=name, out_channels=out_ch, kernel=kernel, stride=stride,
                        padding=padding, in_spatial=in_sp, out_spatial=span // stride + 1, **kw)

    def bn(self, name, **kw):
        return self.add("bn", name=name, **kw)

    def dropout(self, name, **kw):
        if self.plan.config.dropout_rate > 0:
            self.add("dropout", name=name, **kw)

    def avg_pool(self, name, window, **kw):
        if self.spatial % window:
            raise ConfigError(f"{name}: extent {self.spatial} is not divisible by {window}")
        return self.add("pool_avg", name=name, kernel=window, stride=window,
                        out_spatial=self.spatial // window, **kw)

    def head(self, num_classes):
        self.bn("final.bn")
        self.add("relu", name="final.relu")
        self.add("global_pool", name="final.pool", kernel=self.spatial, out_spatial=1)
        self.add("linear", name="classifier", out_channels=num_classes, out_spatial=1)


def build_densenet_plan(cfg: ArchConfig) -> LayerPlan:
    """Compile a DenseNet config into an explicit layer plan."""
    validate(cfg)
    if cfg.family != "densenet":
        raise ConfigError(f"build_densenet_plan needs family 'densenet', got {cfg.family!r}")
    k = cfg.growth_k
    blocks = cfg.layers_per_block()
    b = _Builder(cfg)

    if cfg.dataset_family == "imagenet_style":
        if cfg.resolution % 32:
            raise ConfigError(f"imagenet_style input size {cfg.resolution} must be a multiple of 32")
        b.conv("stem.conv", cfg.initial_channels, 7, stride=2, padding=3)
        b.bn("stem.bn")
        b.add("relu", name="stem.relu")
        b.add("pool_max", name="stem.pool", kernel=3, stride=2, padding=1,
              out_spatial=(b.spatial + 2 - 3) // 2 + 1)
    else:
        b.conv("stem.conv", cfg.initial_channels, 3, stride=1, padding=1)

    for bi, n in enumerate(blocks, start=1):
        slot = f"block{bi}"
        k0 = b.channels
        b.plan.block_spatial.append(b.spatial)
        b.add("store", name=f"{slot}.input", slot=slot, block=bi, layer=0)
        for ell in range(1, n + 1):
            pre = f"{slot}.layer{ell}"
            cin = k0 + k * (ell - 1)
            b.add("concat_source", name=f"{pre}.concat", slot=slot, block=bi, layer=ell,
                  in_channels=cin, out_channels=cin, sources=tuple(range(ell)))
            j = 1
            if cfg.bottleneck:
                b.bn(f"{pre}.bn{j}", block=bi, layer=ell)
                b.add("relu", name=f"{pre}.relu{j}", block=bi, layer=ell)
                b.conv(f"{pre}.conv{j}", 4 * k, 1, block=bi, layer=ell)
                b.dropout(f"{pre}.drop{j}", block=bi, layer=ell)
                j += 1
            b.bn(f"{pre}.bn{j}", block=bi, layer=ell)
            b.add("relu", name=f"{pre}.relu{j}", block=bi, layer=ell)
            b.conv(f"{pre}.conv{j}", k, 3, block=bi, layer=ell)
            b.dropout(f"{pre}.drop{j}", block=bi, layer=ell)
            b.add("store", name=f"{pre}.store", slot=slot, block=bi, layer=ell)
        m = k0 + k * n
        b.add("concat_source", name=f"{slot}.output", slot=slot, block=bi, layer=0,
              in_channels=m, out_channels=m, sources=tuple(range(n + 1)))
        b.plan.block_channels.append((k0, m))
        if bi < len(blocks):
            pre = f"transition{bi}"
            out = int(cfg.compression_theta * m)   # floor for positive rationals
            b.bn(f"{pre}.bn1", block=bi)
            b.add("relu", name=f"{pre}.relu1", block=bi)
            b.conv(f"{pre}.conv1", out, 1, block=bi)
            b.dropout(f"{pre}.drop1", block=bi)
            b.avg_pool(f"{pre}.pool", 2, block=bi)
    b.head(cfg.num_classes)
    return b.plan


def build_resnet_plan(cfg: ArchConfig) -> LayerPlan:
    """Pre-activation bottleneck ResNet for 32x32 inputs (e.g. depth 164 or 1001)."""
    validate(cfg)
    if cfg.family != "resnet_preact":
        raise ConfigError(f"build_resnet_plan needs family 'resnet_preact', got {cfg.family!r}")
    units = cfg.block_layers[0] if cfg.block_layers else (cfg.depth_L - 2) // 9
    b = _Builder(cfg)
    b.conv("stem.conv", 16, 3)
    for si, width in enumerate((16, 32, 64), start=1):
        k0 = b.channels
        for u in range(1, units + 1):
            pre = f"stage{si}.unit{u}"
            stride = 2 if (u == 1 and si > 1) else 1
            project = u == 1
            kw = dict(block=si, layer=u)
            if not project:
                b.add("store", name=f"{pre}.shortcut", slot="res", **kw)
            b.bn(f"{pre}.bn1", **kw)
            b.add("relu", name=f"{pre}.relu1", **kw)
            cin, sp_in = b.channels, b.spatial
            if project:
                b.add("store", name=f"{pre}.shortcut", slot="res", **kw)
            b.conv(f"{pre}.conv1", width, 1, **kw)
            b.bn(f"{pre}.bn2", **kw)
            b.add("relu", name=f"{pre}.relu2", **kw)
            b.conv(f"{pre}.conv2", width, 3, stride=stride, **kw)
            b.bn(f"{pre}.bn3", **kw)
            b.add("relu", name=f"{pre}.relu3", **kw)
            b.conv(f"{pre}.conv3", 4 * width, 1, **kw)
            if project:
                span = sp_in - 1
                b.add("conv", name=f"{pre}.proj", slot="res", in_channels=cin,
                      out_channels=4 * width, kernel=1, stride=stride, padding=0,
                      in_spatial=sp_in, out_spatial=span // stride + 1, **kw)
            b.add("add", name=f"{pre}.add", slot="res", **kw)
        b.plan.block_channels.append((k0, b.channels))
        b.plan.block_spatial.append(b.spatial)
    b.head(cfg.num_classes)
    return b.plan


def build_plan(cfg: ArchConfig) -> LayerPlan:
    if cfg.family == "resnet_preact":
        return build_resnet_plan(cfg)
    return build_densenet_plan(cfg)


def with_input_size(cfg: ArchConfig, size: int) -> ArchConfig:
    return replace(cfg, input_size=size)
