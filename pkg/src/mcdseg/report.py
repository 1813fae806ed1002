"""Figure panels, Dice/uncertainty tables and boxplot data."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError
from .metrics import ScoreSummary, format_row, summarize
from .png import to_uint8
from .uncertainty import to_gray8

SEPARATOR = 2
SEPARATOR_VALUE = 128
TABLE_HEADER = "Model | Size | Median | Min | Max"


def render_panels(image: np.ndarray, truth: np.ndarray | None, prediction: np.ndarray,
                  uncertainty: np.ndarray) -> np.ndarray:
    """One row of panels, input | truth | prediction | uncertainty, as 3 x H x W' uint8.

    ``truth`` may be None, which drops that panel.  Probability panels map
    [0, 1] linearly onto 0..255; the uncertainty panel maps [0, ln 2] onto
    black..white.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    h, w = image.shape[1:]
    grays = [] if truth is None else [to_uint8(np.asarray(truth, dtype=np.float64).reshape(h, -1))]
    for name, arr in (("prediction", prediction), ("uncertainty", uncertainty)):
        if np.asarray(arr).shape[-2:] != (h, w):
            raise ShapeError(f"{name} panel is {np.asarray(arr).shape}, expected {(h, w)}")
    if grays and grays[0].shape != (h, w):
        raise ShapeError(f"truth panel is {grays[0].shape}, expected {(h, w)}")
    grays.append(to_uint8(np.asarray(prediction).reshape(h, w)))
    grays.append(to_gray8(np.asarray(uncertainty).reshape(h, w)))

    panels = [to_uint8(image)] + [np.repeat(g[None], 3, axis=0) for g in grays]
    sep = np.full((3, h, SEPARATOR), SEPARATOR_VALUE, dtype=np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=2)


def boxplot_stats(scores: Sequence[float]) -> dict:
    """Quartiles, 1.5 IQR whiskers clipped to the data, and outliers."""
    x = np.sort(np.asarray(scores, dtype=np.float64))
    if x.size == 0:
        raise ValueError("boxplot of an empty score list")
    q1, med, q3 = (float(v) for v in np.percentile(x, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    return {
        "q1": q1,
        "median": med,
        "q3": q3,
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(v) for v in x if v < lo_fence or v > hi_fence],
        "n": int(x.size),
    }


def table(summaries: Sequence[ScoreSummary]) -> str:
    rows = [TABLE_HEADER] + [format_row(s.model, s.size, s.median, s.min, s.max) for s in summaries]
    return "\n".join(rows) + "\n"


def load_metrics(paths: Sequence[str | Path]) -> list[dict]:
    records = []
    for p in paths:
        try:
            rec = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read metrics file {p}: {exc}") from exc
        for key in ("model", "dice", "uncertainty"):
            if key not in rec:
                raise DataError(f"metrics file {p} lacks {key!r}")
        records.append(rec)
    return records


def cmd_report(records: Sequence[dict]) -> dict:
    """Tables 1-2 style text plus raw score lists and boxplot statistics per model."""
    if not records:
        raise ValueError("report needs at least one evaluated model")
    dice_rows, unc_rows, box = [], [], {}
    for rec in records:
        name, size = rec["model"], rec.get("size")
        groups = rec.get("groups")
        if rec["dice"]:
            dice_rows.append(summarize(rec["dice"], name, size,
                                       groups if groups and len(groups) == len(rec["dice"]) else None))
        if rec["uncertainty"]:
            unc_rows.append(summarize(rec["uncertainty"], name, size))
        box[name] = {
            "dice": {"scores": list(rec["dice"]),
                     **(boxplot_stats(rec["dice"]) if rec["dice"] else {})},
            "uncertainty": {"scores": list(rec["uncertainty"]),
                            **(boxplot_stats(rec["uncertainty"]) if rec["uncertainty"] else {})},
        }
    return {
        "dice_table": table(dice_rows),
        "uncertainty_table": table(unc_rows),
        "dice": dice_rows,
        "uncertainty": unc_rows,
        "boxplot": box,
    }


def render_boxplot(box: dict, metric: str, path: str | Path) -> None:
    """Draw one box per model (whiskers at 1.5 IQR, outliers as points)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [n for n in box if box[n][metric]["scores"]]
    fig, ax = plt.subplots(figsize=(1.6 * max(len(names), 2) + 1, 3.2))
    ax.boxplot([box[n][metric]["scores"] for n in names], whis=1.5)
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("Dice" if metric == "dice" else "uncertainty (nats)")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
