"""Dice evaluation and Median/Min/Max summaries."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError


class EmptyMasksWarning(UserWarning):
    """Both masks are empty; Dice is reported as 1.0."""


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """2|X & Y| / (|X| + |Y|); two empty masks count as perfect agreement."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    xb, yb = x != 0, y != 0
    denom = int(xb.sum()) + int(yb.sum())
    if denom == 0:
        warnings.warn("dice of two empty masks", EmptyMasksWarning, stacklevel=2)
        return 1.0
    return 2.0 * int((xb & yb).sum()) / denom


def lower_median(values: Sequence[float]) -> float:
    """Median that picks the lower middle element for even counts."""
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


@dataclass
class ScoreSummary:
    """Per-image scores of one model with their Median/Min/Max."""

    scores: list[float]
    median: float
    min: float
    max: float
    model: str = ""
    size: int | None = None
    groups: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


DiceResult = ScoreSummary


def summarize(per_image: Sequence[float], model: str = "", size: int | None = None,
              groups: Sequence[int] | None = None) -> ScoreSummary:
    """Median (lower-middle), min and max of per-image scores, optionally per group too."""
    scores = [float(v) for v in per_image]
    if not scores:
        raise ValueError("cannot summarize an empty score list")
    by_group = {}
    if groups is not None:
        if len(groups) != len(scores):
            raise ValueError("one group label per score is required")
        for g in sorted(set(groups)):
            sub = [s for s, gg in zip(scores, groups) if gg == g]
            by_group[str(g)] = {"median": lower_median(sub), "min": min(sub), "max": max(sub),
                                "n": len(sub)}
    return ScoreSummary(scores, lower_median(scores), min(scores), max(scores), model, size, by_group)


def format_size(n: int | None) -> str:
    """494000 -> '494K', 7200000 -> '7.2M'."""
    if n is None:
        return "-"
    if n >= 1_000_000:
        return f"{n / 1_000_000:.1f}".rstrip("0").rstrip(".") + "M"
    if n >= 1_000:
        return f"{round(n / 1000)}K"
    return str(n)


def format_row(model: str, size: int | None, median: float, lo: float, hi: float) -> str:
    return f"{model} | {format_size(size)} | {median:.3f} | {lo:.3f} | {hi:.3f}"


def result_row(res: ScoreSummary) -> str:
    return format_row(res.model, res.size, res.median, res.min, res.max)


def to_delimited(results: Sequence[ScoreSummary], sep: str = "\t") -> str:
    lines = [sep.join(["model", "size", "median", "min", "max"])]
    for r in results:
        lines.append(sep.join([r.model, str(r.size if r.size is not None else ""),
                               f"{r.median:.17g}", f"{r.min:.17g}", f"{r.max:.17g}"]))
    return "\n".join(lines) + "\n"


def metrics_record(model: str, size: int | None, dice_scores: Sequence[float],
                   uncertainty_scores: Sequence[float], stems: Sequence[str] = (),
                   groups: Sequence[int] | None = None, extra: dict | None = None) -> str:
    """JSON metrics file consumed by the report command."""
    rec = {
        "model": model,
        "size": size,
        "stems": list(stems),
        "groups": list(groups) if groups is not None else None,
        "dice": [float(v) for v in dice_scores],
        "uncertainty": [float(v) for v in uncertainty_scores],
        "extra": extra or {},
    }
    return json.dumps(rec, indent=1, sort_keys=True) + "\n"
