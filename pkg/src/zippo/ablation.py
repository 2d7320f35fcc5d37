"""Task-mode comparison: train single / dual / full under one budget and score R2M.

Every mode sees the same data, seed, step count and sampler settings; only
the set of trained branches differs. The output CSV has one row per mode
with the mean matting metrics over the test set, plus the row order the
full-mode-best hypothesis predicts.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .codec import Codec
from .metrics import CSV_COLUMNS, evaluate, mean_row
from .sampler import SampleRequest, batch_sample
from .trainer import EncodedBatch, TaskMode, TrainConfig, encode_dataset, train
from .unet import DistributionIdentifier, UNetConfig

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("mode",) + CSV_COLUMNS[1:]


@dataclass
class AblationRow:
    mode: TaskMode
    metrics: dict[str, float]
    train_seconds: float

    def as_list(self) -> list:
        return [self.mode.value] + [repr(float(self.metrics[c])) for c in CSV_COLUMNS[1:]]


@dataclass
class AblationResult:
    rows: list[AblationRow]
    full_is_best: bool  # by mean SAD


def score_r2m(model, codec: Codec, schedule, images, mattes, steps: int = 20, seed: int = 0) -> dict[str, float]:
    """Mean matting metrics of RGB-to-matte predictions on a test set."""
    reqs = [SampleRequest(DistributionIdentifier.R2M, img, steps=steps, seed=seed + i) for i, img in enumerate(images)]
    preds = batch_sample(reqs, model, codec, schedule)
    return mean_row([evaluate(p, g).row() for p, g in zip(preds, mattes)])


def run_ablation(train_data, test_images, test_mattes, codec: Codec, config: TrainConfig,
                 modes: Sequence[TaskMode] = tuple(TaskMode), unet_config: UNetConfig | None = None,
                 sample_steps: int = 20, out_dir=None) -> AblationResult:
    data = train_data if isinstance(train_data, EncodedBatch) else encode_dataset(codec, *train_data)
    rows = []
    for mode in modes:
        mode = TaskMode(mode)
        res = train(data, replace(config, mode=mode), codec, unet_config=unet_config)
        metrics = score_r2m(res.model, codec, res.schedule, test_images, test_mattes, sample_steps, config.seed)
        log.info("mode %s: SAD %.4f MAD %.4f (%.0fs)", mode.value, metrics["sad"], metrics["mad"], res.seconds)
        rows.append(AblationRow(mode, metrics, res.seconds))
    by_mode = {r.mode: r.metrics["sad"] for r in rows}
    full_best = TaskMode.FULL in by_mode and all(by_mode[TaskMode.FULL] <= v for v in by_mode.values())
    if TaskMode.FULL in by_mode and not full_best:
        log.warning("full mode is not the best by SAD at this budget: %s",
                    ", ".join(f"{m.value}={v:.4f}" for m, v in by_mode.items()))
    result = AblationResult(rows, full_best)
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / "ablation.csv", result)
    return result


def write_ablation_csv(path, result: AblationResult) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in result.rows:
            w.writerow(r.as_list())
        w.writerow(["# full_mode_best", str(result.full_is_best).lower()] + [""] * (len(ABLATION_COLUMNS) - 2))


def read_ablation_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if not r["mode"].startswith("#")]
    return {r["mode"]: {k: float(v) for k, v in r.items() if k != "mode"} for r in rows}


def ordering_summary(result: AblationResult) -> str:
    ranked = sorted(result.rows, key=lambda r: r.metrics["sad"])
    flag = "" if result.full_is_best else "  [full mode not best at this budget]"
    return " < ".join(f"{r.mode.value}({r.metrics['sad']:.4f})" for r in ranked) + flag


__all__ = ["ABLATION_COLUMNS", "AblationRow", "AblationResult", "run_ablation", "score_r2m",
           "write_ablation_csv", "read_ablation_csv", "ordering_summary"]
