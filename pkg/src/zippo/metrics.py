"""Matting metrics: SAD, MSE, MAD, region SAD, connectivity error and IoU.

Mattes are quantized to 8 bits before any metric is computed, matching
file-based evaluation. SAD-family values and CONN are divided by 1000.
FG/BG regions come from the ground truth's 8-bit extremes (255 / 0); every
other ground-truth pixel is the transition band.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

CSV_COLUMNS = ("name", "sad", "mse", "mad", "sad_fg", "sad_bg", "conn")
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def quantize(matte) -> np.ndarray:
    """Map a matte to integer 8-bit levels (int64 array).

    Float input is read as [0, 1]; integer input is taken as already 8-bit;
    booleans map to 0/255.
    """
    m = np.asarray(matte)
    if m.dtype == bool:
        return m.astype(np.int64) * 255
    if np.issubdtype(m.dtype, np.integer):
        return m.astype(np.int64)
    return np.round(np.clip(m, 0.0, 1.0) * 255.0).astype(np.int64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    qp, qg = quantize(pred), quantize(gt)
    if qp.shape != qg.shape:
        raise ValueError(f"prediction {qp.shape} and ground truth {qg.shape} differ in shape")
    return qp, qg


def sad(pred, gt) -> float:
    qp, qg = _pair(pred, gt)
    return int(np.abs(qp - qg).sum()) / 255.0 / 1000.0


def mse(pred, gt) -> float:
    qp, qg = _pair(pred, gt)
    d = (qp - qg) / 255.0
    return float(np.mean(d * d))


def mad(pred, gt) -> float:
    qp, qg = _pair(pred, gt)
    return float(np.mean(np.abs(qp - qg) / 255.0))


FG, BG, TRANSITION = "FG", "BG", "TRANSITION"


def region_mask(gt, region: str) -> np.ndarray:
    qg = quantize(gt)
    if region == FG:
        return qg == 255
    if region == BG:
        return qg == 0
    if region == TRANSITION:
        return (qg > 0) & (qg < 255)
    raise ValueError(f"unknown region {region!r}")


def region_sad(pred, gt, region: str) -> float:
    """SAD restricted to a ground-truth region; 0 for an empty region."""
    qp, qg = _pair(pred, gt)
    mask = region_mask(qg, region)
    return int(np.abs(qp - qg)[mask].sum()) / 255.0 / 1000.0


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: mask shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # labels are numbered in raster order, so argmax picks the earliest on ties
    return labels == (int(np.argmax(sizes)) + 1)


def _levels(m: np.ndarray, omega: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    level = np.zeros(m.shape, dtype=np.float64)
    if not omega.any():
        return level
    for theta in thresholds:
        labels, n = ndimage.label(m >= theta, structure=_FOUR_CONNECTED)
        if n == 0:
            break
        touching = np.unique(labels[omega & (labels > 0)])
        if touching.size == 0:
            break
        level[np.isin(labels, touching)] = theta
    return level


def conn_details(pred, gt, theta_step: float = 0.1, phi_threshold: float = 0.15) -> tuple[float, bool]:
    """Connectivity error and a flag set when the shared opaque region is empty."""
    qp, qg = _pair(pred, gt)
    p, g = qp / 255.0, qg / 255.0
    # both fully opaque at 8 bits (anything within half a level of 1)
    omega = _largest_component((qp == 255) & (qg == 255))
    k = int(round(1.0 / theta_step))
    thresholds = np.arange(k + 1) / k
    phis = []
    for m in (p, g):
        d = m - _levels(m, omega, thresholds)
        phis.append(1.0 - d * (d >= phi_threshold))
    return float(np.abs(phis[0] - phis[1]).sum()) / 1000.0, not omega.any()


def conn(pred, gt, theta_step: float = 0.1, phi_threshold: float = 0.15) -> float:
    return conn_details(pred, gt, theta_step, phi_threshold)[0]


@dataclass
class MetricReport:
    sad: float
    mse: float
    mad: float
    sad_fg: float
    sad_bg: float
    conn: float
    sad_transition: float = 0.0
    n_fg: int = 0
    n_bg: int = 0
    n_transition: int = 0
    # integer sums of |pred - gt| in 8-bit units; these partition exactly
    abs_sum: int = 0
    abs_sum_fg: int = 0
    abs_sum_bg: int = 0
    abs_sum_transition: int = 0
    conn_degenerate: bool = False

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in CSV_COLUMNS[1:]}


def evaluate(pred, gt, theta_step: float = 0.1, phi_threshold: float = 0.15) -> MetricReport:
    qp, qg = _pair(pred, gt)
    diff = np.abs(qp - qg)
    masks = {r: region_mask(qg, r) for r in (FG, BG, TRANSITION)}
    sums = {r: int(diff[m].sum()) for r, m in masks.items()}
    c, degenerate = conn_details(qp, qg, theta_step, phi_threshold)
    return MetricReport(
        sad=sad(qp, qg),
        mse=mse(qp, qg),
        mad=mad(qp, qg),
        sad_fg=sums[FG] / 255.0 / 1000.0,
        sad_bg=sums[BG] / 255.0 / 1000.0,
        conn=c,
        sad_transition=sums[TRANSITION] / 255.0 / 1000.0,
        n_fg=int(masks[FG].sum()),
        n_bg=int(masks[BG].sum()),
        n_transition=int(masks[TRANSITION].sum()),
        abs_sum=int(diff.sum()),
        abs_sum_fg=sums[FG],
        abs_sum_bg=sums[BG],
        abs_sum_transition=sums[TRANSITION],
        conn_degenerate=degenerate,
    )


def mean_row(rows: Sequence[dict[str, float]]) -> dict[str, float]:
    cols = CSV_COLUMNS[1:]
    if not rows:
        return {c: float("nan") for c in cols}
    return {c: float(sum(r[c] for r in rows) / len(rows)) for c in cols}


def write_metrics_csv(path, named_rows: Iterable[tuple[str, dict[str, float]]], mean: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for name, row in named_rows:
            w.writerow([name] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])
        w.writerow(["MEAN"] + [repr(float(mean[c])) for c in CSV_COLUMNS[1:]])


def read_pairs_manifest(path) -> list[tuple[str, str, str]]:
    """Lines ``pred_path<TAB>gt_path[<TAB>name]``; relative paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ValueError(f"{path}: malformed line {line!r}")
            pred, gt = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts[:2])
            name = parts[2] if len(parts) > 2 else os.path.splitext(os.path.basename(parts[0]))[0]
            out.append((name, pred, gt))
    return out


@dataclass
class EvalResult:
    rows: list[tuple[str, MetricReport]]
    mean: dict[str, float]
    errors: list[tuple[str, str]]


def evaluate_pairs(pairs, csv_path=None, theta_step: float = 0.1, phi_threshold: float = 0.15) -> EvalResult:
    """Evaluate (name, pred_path, gt_path) triples, or a pairs manifest path.

    Unreadable or mismatched items are recorded in ``errors`` and skipped;
    the mean is over the items that succeeded.
    """
    from .imageio import read_matte

    if isinstance(pairs, (str, os.PathLike)):
        pairs = read_pairs_manifest(pairs)
    rows, errors = [], []
    for name, pred_path, gt_path in pairs:
        try:
            report = evaluate(read_matte(pred_path), read_matte(gt_path), theta_step, phi_threshold)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", name, exc)
            errors.append((name, str(exc)))
            continue
        rows.append((name, report))
    mean = mean_row([r.row() for _, r in rows])
    if csv_path is not None:
        write_metrics_csv(csv_path, ((n, r.row()) for n, r in rows), mean)
    return EvalResult(rows, mean, errors)


def as_dict(report: MetricReport) -> dict:
    return asdict(report)
