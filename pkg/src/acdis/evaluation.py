"""Dice scoring over nested tumor regions and the 15-mask evaluation table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .volume_data import MODALITIES, ModalityMask, MultiModalVolume, enumerate_masks

REGIONS = ("WT", "TC", "ET")
# label values belonging to each region
REGION_LABELS = {"WT": (1, 2, 3), "TC": (1, 3), "ET": (3,)}


@dataclass(frozen=True)
class RegionMasks:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __getitem__(self, region: str) -> np.ndarray:
        return getattr(self, region.lower())


def to_regions(label) -> RegionMasks:
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() > 3):
        raise ValueError("label values must lie in {0, 1, 2, 3}")
    return RegionMasks(*(np.isin(label, REGION_LABELS[r]) for r in REGIONS))


def dice(pred, gt) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks agree perfectly and score 1.0."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def region_dice(pred_label, gt_label) -> Dict[str, float]:
    p, g = to_regions(pred_label), to_regions(gt_label)
    return {r: dice(p[r], g[r]) for r in REGIONS}


@dataclass
class DiceTable:
    """Region x mask grid in the standard column order, plus a per-region average."""

    masks: List[ModalityMask]
    cells: Dict[str, List[float]]
    avg: Dict[str, float] = field(default_factory=dict)
    per_case: Optional[Dict[str, List[Dict[str, float]]]] = None

    def __post_init__(self):
        for r in REGIONS:
            if len(self.cells[r]) != len(self.masks):
                raise ShapeError(f"region {r} has {len(self.cells[r])} cells for {len(self.masks)} masks")
        if not self.avg:
            self.avg = {r: row_mean(self.cells[r]) for r in REGIONS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region"] + [m.symbol for m in self.masks] + ["AVG"])
        for r in REGIONS:
            w.writerow([r] + [repr(float(v)) for v in self.cells[r]] + [repr(float(self.avg[r]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DiceTable":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if header[0] != "region" or header[-1] != "AVG":
            raise ValueError("not a dice table CSV")
        masks = [ModalityMask(tuple(ch == "●" for ch in sym)) for sym in header[1:-1]]
        cells, avg = {}, {}
        for row in rows[1:]:
            cells[row[0]] = [float(v) for v in row[1:-1]]
            avg[row[0]] = float(row[-1])
        return cls(masks, cells, avg)

    def to_markdown(self) -> str:
        lines = []
        # one header row per modality, columns are masks
        lines.append("| M | " + " | ".join(str(i + 1) for i in range(len(self.masks))) + " | |")
        lines.append("|---" * (len(self.masks) + 2) + "|")
        for i, name in enumerate(MODALITIES):
            lines.append(f"| {name} | " + " | ".join(m.symbol[i] for m in self.masks) + " | |")
        lines.append(f"| **Region** | " + " | ".join(" " for _ in self.masks) + " | **AVG** |")
        for r in REGIONS:
            lines.append(f"| {r} | " + " | ".join(f"{100 * v:.2f}" for v in self.cells[r])
                         + f" | {100 * self.avg[r]:.2f} |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "masks": [m.bits for m in self.masks],
            "cells": self.cells,
            "avg": self.avg,
            "per_case": self.per_case,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiceTable":
        return cls([ModalityMask.from_bits(b) for b in d["masks"]], d["cells"], d["avg"], d.get("per_case"))


def row_mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


def evaluate_all_masks(model_or_checkpoint, dataset: Sequence[MultiModalVolume],
                       masks: Optional[Sequence[ModalityMask]] = None) -> DiceTable:
    """Score the inference path under every modality mask.

    Per mask: zero-fill missing modalities, run inference, argmax, derive
    WT/TC/ET, Dice per case, then average over cases.
    """
    if not dataset:
        raise ConfigError("evaluation dataset is empty")
    model = model_or_checkpoint.model() if hasattr(model_or_checkpoint, "model") and not isinstance(
        model_or_checkpoint, torch.nn.Module) else model_or_checkpoint
    model.eval()
    dtype = next(model.parameters()).dtype
    masks = list(masks) if masks is not None else enumerate_masks()

    cells = {r: [] for r in REGIONS}
    per_case = {}
    for m in masks:
        scores = []
        for v in dataset:
            x = torch.from_numpy(v.stack()[None]).to(dtype)
            pred = model.predict(x, m).argmax(1)[0].numpy()
            scores.append(region_dice(pred, v.label))
        per_case[m.bits] = scores
        for r in REGIONS:
            cells[r].append(row_mean([s[r] for s in scores]))
    return DiceTable(masks, cells, per_case=per_case)


def render_report(table: DiceTable, out_dir, run_meta: Optional[dict] = None, plots: bool = True) -> Dict[str, Path]:
    """Write ``dice_table.csv``, ``dice_table.md``, ``report.json`` and one bar chart per region."""
    out_dir = Path(out_dir)
    written = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written["csv"] = out_dir / "dice_table.csv"
        written["csv"].write_text(table.to_csv(), encoding="utf-8")
        written["md"] = out_dir / "dice_table.md"
        written["md"].write_text(table.to_markdown(), encoding="utf-8")
        written["json"] = out_dir / "report.json"
        written["json"].write_text(json.dumps({"table": table.to_json(), "run": run_meta or {}},
                                              indent=2, sort_keys=True), encoding="utf-8")
        if plots:
            written.update(_plot_regions(table, out_dir))
    except OSError as exc:
        raise OSError(f"failed writing report to {exc.filename or out_dir}: {exc.strerror}") from exc
    return written


def _plot_regions(table: DiceTable, out_dir: Path) -> Dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    labels = [m.bits for m in table.masks]
    for r in REGIONS:
        fig, ax = plt.subplots(figsize=(9, 3))
        ax.bar(range(len(labels)), [100 * v for v in table.cells[r]], color="tab:blue")
        ax.axhline(100 * table.avg[r], color="tab:red", lw=1, ls="--", label=f"AVG {100 * table.avg[r]:.2f}")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, fontsize=7, family="monospace")
        ax.set_ylim(0, 100)
        ax.set_ylabel(f"{r} Dice (%)")
        ax.set_xlabel("available modalities (FLAIR T1ce T1 T2)")
        ax.legend(loc="lower right", fontsize=7)
        fig.tight_layout()
        path = out_dir / f"dice_{r}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths[f"plot_{r}"] = path
    return paths
