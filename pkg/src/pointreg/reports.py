"""CSV report writing/reading and evaluation aggregation.

All reports are RFC-4180-style CSV with a header row so they can be diffed
and consumed by any plotting tool. The evaluation summary mirrors a
four-column overlap binning: aggregates are reported for samples with
overlap ratio above 0.6, 0.5, 0.4, and 0 (the last bin covering the whole
set of registrable pairs).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OVERLAP_BINS = (
    ("overlap>0.6", 0.6),
    ("overlap>0.5", 0.5),
    ("overlap>0.4", 0.4),
    ("overlap>0.0", 0.0),
)

EVAL_SAMPLE_HEADER = (
    "scene_id", "overlap", "te_m", "re_deg", "success", "inliers", "elapsed_s", "error"
)
EVAL_SUMMARY_HEADER = (
    "bin", "count", "mte_m", "mre_deg", "recall", "time_mean_s", "time_std_s"
)


@dataclass
class EvalSample:
    """One evaluated scene pair; te/re are None when registration failed."""

    scene_id: str
    overlap: float
    te: float | None
    re: float | None
    success: bool
    inliers: int
    elapsed: float
    error: str = ""


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def eval_sample_rows(samples: list[EvalSample]) -> list[list[str]]:
    rows = []
    for s in sorted(samples, key=lambda s: s.scene_id):
        rows.append(
            [
                s.scene_id, _fmt(s.overlap), _fmt(s.te), _fmt(s.re),
                _fmt(s.success), _fmt(s.inliers), _fmt(s.elapsed), s.error,
            ]
        )
    return rows


def aggregate_eval(samples: list[EvalSample]) -> list[list[str]]:
    """Per-overlap-bin aggregate rows: MTE/MRE over solved samples, recall
    over all samples in the bin, and mean/std of the wall-clock time.

    Empty bins are still emitted, with count 0 and blank aggregates.
    """
    rows = []
    for label, threshold in OVERLAP_BINS:
        in_bin = [s for s in samples if s.overlap > threshold]
        if not in_bin:
            rows.append([label, "0", "", "", "", "", ""])
            continue
        tes = [s.te for s in in_bin if s.te is not None]
        res = [s.re for s in in_bin if s.re is not None]
        times = np.array([s.elapsed for s in in_bin])
        recall = sum(1 for s in in_bin if s.success) / len(in_bin)
        rows.append(
            [
                label,
                str(len(in_bin)),
                _fmt(float(np.mean(tes))) if tes else "",
                _fmt(float(np.mean(res))) if res else "",
                _fmt(recall),
                _fmt(float(times.mean())),
                _fmt(float(times.std())),
            ]
        )
    return rows
