"""Design-choice grids over the enhancer, trained under one shared budget."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import replace
from pathlib import Path

from .data import Dataset
from .enhancer import param_count
from .train import TrainConfig, train

ABLATION_HEADER = ("axis", "config", "epoch", "train_loss", "val_loss", "val_acc", "seconds",
                   "params", "status")

# each grid: axis name -> [(row label, EnhancerConfig overrides)]
GRIDS: dict[str, list[tuple[str, dict]]] = {
    "aggregation": [
        ("simple averaging", {"aggregation_high": "average"}),
        ("skip connections", {"aggregation_high": "skip"}),
        ("SAFA", {"aggregation_high": "safa"}),
    ],
    "fusion": [
        ("(SC,SC)", {"aggregation_high": "skip", "aggregation_low": "skip"}),
        ("(SAFA,SAFA)", {"aggregation_high": "safa", "aggregation_low": "safa"}),
        ("(SC,SAFA)", {"aggregation_high": "skip", "aggregation_low": "safa"}),
        ("(SAFA,SC)", {"aggregation_high": "safa", "aggregation_low": "skip"}),
    ],
    "downsample": [
        ("maxpool", {"downsample_method": "maxpool"}),
        ("adavgpool", {"downsample_method": "adaptive_avg_pool"}),
        ("interpolation", {"downsample_method": "interpolation"}),
        ("convolution", {"downsample_method": "conv"}),
    ],
    "scales": [
        ("(2,4)", {"scale_pair": (2, 4)}),
        ("(4,8)", {"scale_pair": (4, 8)}),
        ("(4,16)", {"scale_pair": (4, 16)}),
        ("(8,16)", {"scale_pair": (8, 16)}),
    ],
    "blocks": [(f"N={n}", {"num_blocks": n}) for n in (2, 4, 8, 12)],
}
GRID_ORDER = ("aggregation", "fusion", "downsample", "scales", "blocks")


def resolve_grid(name: str) -> list[str]:
    if name == "all":
        return list(GRID_ORDER)
    if name not in GRIDS:
        raise ValueError(f"unknown grid {name!r}; choose from {GRID_ORDER + ('all',)}")
    return [name]


def apply_delta(base: TrainConfig, delta: dict) -> TrainConfig:
    """Base config with enhancer overrides applied.

    When the requested block count does not divide the channel width, the
    width is rounded up to the next multiple of the block count.
    """
    n = delta.get("num_blocks", base.enhancer.num_blocks)
    c = base.enhancer.feat_channels
    if c % n:
        delta = {**delta, "feat_channels": -(-c // n) * n}
    return replace(base, enhancer=base.enhancer.replace(**delta))


def run_ablation(axis: str, grid: list[tuple[str, dict]], base: TrainConfig, train_set: Dataset,
                 val_set: Dataset, timing: bool = True) -> list[dict]:
    """Train and evaluate every grid cell with the base seed and budget.

    A failing cell is recorded with ``status`` set to the error text; the
    remaining cells still run.
    """
    rows = []
    for label, delta in grid:
        row = {"axis": axis, "config": label, "epoch": "", "train_loss": "", "val_loss": "",
               "val_acc": "", "seconds": "", "params": "", "status": "ok"}
        t0 = time.perf_counter()
        try:
            cfg = apply_delta(base, delta)
            cfg = replace(cfg, label=f"{axis}:{label}")
            row["params"] = str(param_count(cfg.enhancer))
            ckpt = train(cfg, train_set, val_set, timing=False)
            if ckpt.rows:
                last = ckpt.rows[-1]
                row.update(epoch=str(last.epoch), train_loss=repr(last.train_loss),
                           val_loss=repr(last.val_loss), val_acc=repr(last.val_acc))
        except Exception as exc:  # recorded per row; the grid continues
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        seconds = time.perf_counter() - t0 if timing else 0.0
        row["seconds"] = f"{seconds:.3f}"
        rows.append(row)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def run_grids(name: str, base: TrainConfig, train_set: Dataset, val_set: Dataset,
              out_dir: str | Path | None = None, timing: bool = True) -> dict[str, list[dict]]:
    """Run one named grid (or ``all``), writing ``ablation_<axis>.csv`` per grid."""
    results = {}
    for axis in resolve_grid(name):
        rows = run_ablation(axis, GRIDS[axis], base, train_set, val_set, timing)
        results[axis] = rows
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"ablation_{axis}.csv").write_text(ablation_csv(rows))
    return results
