"""Post-hoc analysis: the feature-reuse weight heatmap and parameter-efficiency sweeps."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audit import count_flops, count_params
from .errors import DenseKitError, UnsupportedAnalysisError
from .model import Model, init_model
from .plan import ArchConfig, build_plan

log = logging.getLogger(__name__)

CSV_HEADER = ("block", "source_s", "target_l", "value")
SWEEP_HEADER = ("config_id", "params", "test_error", "flops")


@dataclass
class HeatmapReport:
    """Average absolute weight per (source, target) pair of each dense block.

    ``matrices[b-1]`` has shape ``(n_b + 1, n_b + 1)``: rows are sources
    ``0..n_b`` (row 0 is the block input), columns ``0..n_b-1`` are target
    layers ``1..n_b`` and the last column is the transition (or classifier
    for the final block).  Undefined cells hold NaN.
    """

    matrices: list
    trailing: list = field(default_factory=list)   # "transition{b}" or "classifier"

    @property
    def num_blocks(self) -> int:
        return len(self.matrices)

    def defined_mask(self, block: int) -> np.ndarray:
        return ~np.isnan(self.matrices[block - 1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeatmapReport) or len(self.matrices) != len(other.matrices):
            return False
        return all(np.array_equal(a, b, equal_nan=True) for a, b in zip(self.matrices, other.matrices))


def _slice_bounds(k0: int, k: int, n_sources: int) -> list:
    bounds = [(0, k0)]
    for j in range(1, n_sources):
        lo = k0 + k * (j - 1)
        bounds.append((lo, lo + k))
    return bounds


def _slice_means(w: np.ndarray, bounds: list) -> list:
    """Mean |w| over each input-channel slice of a [Cout, Cin, ...] weight."""
    a = np.abs(w.astype(np.float64))
    return [float(a[:, lo:hi].mean()) for lo, hi in bounds]


def weight_heatmap(model: Model) -> HeatmapReport:
    """Feature-reuse matrix of a plain (non-bottleneck) DenseNet.

    Each entry is the summed absolute weight of a source slice divided by
    ``out_channels * slice_channels * kernel_area``.  The classifier column
    normalizes by ``num_classes * slice_channels``.
    """
    cfg = model.config
    if cfg.family != "densenet":
        raise UnsupportedAnalysisError(
            f"the feature-reuse heatmap needs a DenseNet, got family {cfg.family!r}"
        )
    if cfg.bottleneck:
        raise UnsupportedAnalysisError(
            "bottleneck models mix the concatenated inputs through a 1x1 conv first, "
            "so the 3x3 conv weights cannot be attributed to individual source layers"
        )
    blocks = cfg.layers_per_block()
    k = cfg.growth_k
    p = model.params
    matrices, trailing = [], []
    for bi, n in enumerate(blocks, start=1):
        k0, _ = model.plan.block_channels[bi - 1]
        mat = np.full((n + 1, n + 1), np.nan)
        for ell in range(1, n + 1):
            w = p[f"block{bi}.layer{ell}.conv1.weight"].data
            mat[:ell, ell - 1] = _slice_means(w, _slice_bounds(k0, k, ell))
        bounds = _slice_bounds(k0, k, n + 1)
        if bi < len(blocks):
            w = p[f"transition{bi}.conv1.weight"].data
            trailing.append(f"transition{bi}")
        else:
            w = p["classifier.weight"].data
            trailing.append("classifier")
        mat[:, n] = _slice_means(w, bounds)
        matrices.append(mat)
    return HeatmapReport(matrices, trailing)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def heatmap_to_csv(report: HeatmapReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for bi, mat in enumerate(report.matrices, start=1):
            for s in range(mat.shape[0]):
                for c in range(mat.shape[1]):
                    v = mat[s, c]
                    w.writerow((bi, s, c + 1, "NaN" if math.isnan(v) else repr(float(v))))
    return path


def heatmap_from_csv(path) -> HeatmapReport:
    """Parse a CSV written by :func:`heatmap_to_csv` back into matrices."""
    cells: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = tuple(next(rows))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected heatmap CSV header {header}")
        for b, s, t, v in rows:
            cells.setdefault(int(b), []).append((int(s), int(t), float(v)))
    matrices = []
    for b in sorted(cells):
        n = max(s for s, _, _ in cells[b]) + 1
        m = np.full((n, n), np.nan)
        for s, t, v in cells[b]:
            m[s, t - 1] = v
        matrices.append(m)
    return HeatmapReport(matrices)


def heatmap_to_pgm(mat: np.ndarray, path) -> Path:
    """Plain (P2) grayscale image, scaled so the block maximum maps to 255.

    Undefined cells render as 0.
    """
    path = Path(path)
    vals = np.nan_to_num(mat, nan=0.0)
    top = vals.max()
    pix = np.zeros(vals.shape, dtype=int) if top <= 0 else np.rint(vals / top * 255).astype(int)
    rows, cols = pix.shape
    lines = ["P2", f"{cols} {rows}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def heatmap_export(report: HeatmapReport, stem, fmt: str = "csv") -> list:
    """Write ``{stem}.csv`` and/or ``{stem}_block{b}.pgm``; returns the paths."""
    if fmt not in ("csv", "pgm", "both"):
        raise ValueError(f"format must be csv, pgm or both, got {fmt!r}")
    stem = Path(stem)
    if stem.suffix == ".csv":
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        written.append(heatmap_to_csv(report, stem.with_name(stem.name + ".csv")))
    if fmt in ("pgm", "both"):
        for bi, mat in enumerate(report.matrices, start=1):
            written.append(heatmap_to_pgm(mat, stem.with_name(f"{stem.name}_block{bi}.pgm")))
    return written


# ---------------------------------------------------------------------------
# parameter-efficiency sweep
# ---------------------------------------------------------------------------

@dataclass
class EfficiencyPoint:
    config_id: str
    params: int
    test_error: float
    flops: int
    error: Optional[str] = None   # set when training this config failed

    def __post_init__(self):
        if self.params <= 0:
            raise ValueError("params must be positive")


def config_id(cfg: ArchConfig) -> str:
    return f"{cfg.variant}-L{cfg.depth_L}-k{cfg.growth_k}"


def efficiency_sweep(configs: Sequence[ArchConfig], train_config, data=None,
                     out_csv=None) -> list:
    """Train each config and record (params, final test error, flops).

    ``data`` is a ``(train, test)`` pair; by default a synthetic set of the
    train config's ``limit_train_n`` (or 5000) images.  A config whose
    training fails is kept with ``test_error = NaN`` and its error message.
    Points are sorted by parameter count.
    """
    from .data import parse_data_spec
    from .trainer import train

    if data is None:
        n = train_config.limit_train_n or 5000
        data = parse_data_spec(f"synthetic:{n}", train_config.seed)
    train_set, test_set = data
    points = []
    for cfg in configs:
        plan = build_plan(cfg)
        params = count_params(plan).total_params
        flops = count_flops(plan).total_flops
        try:
            model = init_model(plan, train_config.seed)
            report = train(model, train_set, test_set, train_config)
            point = EfficiencyPoint(config_id(cfg), params, report.final["test_err"], flops)
        except DenseKitError as exc:
            log.warning("sweep: %s failed: %s", config_id(cfg), exc)
            point = EfficiencyPoint(config_id(cfg), params, float("nan"), flops, str(exc))
        points.append(point)
    points.sort(key=lambda p: (p.params, p.config_id))
    if out_csv is not None:
        write_sweep_csv(points, out_csv)
    return points


def write_sweep_csv(points: Sequence[EfficiencyPoint], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p in sorted(points, key=lambda p: (p.params, p.config_id)):
            err = "NaN" if math.isnan(p.test_error) else repr(float(p.test_error))
            w.writerow((p.config_id, p.params, err, p.flops))
    return path
