"""Monte Carlo dropout sampling and per-pixel entropy uncertainty (nats).

For a stack of T foreground-probability maps:

* predictive entropy  U = H[mean_t p_t]
* aleatoric           A = mean_t H[p_t]       (MC estimate of E_w H[p(y|x,w)])
* epistemic           U - A >= 0              (Jensen; floored at 0)

with H the binary entropy, probabilities clamped to [1e-7, 1 - 1e-7].
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError
from .metrics import ScoreSummary, summarize
from .tensor import PROB_EPS, no_grad
from .unet import ModelGraph, forward_seg

LN2 = math.log(2.0)
GRID_MAGIC = "MCDGRID1"
DEFAULT_SAMPLES = 20


def mc_sample(model: ModelGraph, image: np.ndarray, T: int = DEFAULT_SAMPLES, seed: int = 0) -> np.ndarray:
    """T stochastic forward passes of one 3 x H x W image -> T x 1 x H x W.

    Pass t draws its dropout masks from a generator seeded by (seed, t),
    so sample t does not depend on T or on how passes are scheduled.
    """
    if T < 1:
        raise ValueError("need at least one Monte Carlo sample")
    image = np.asarray(image, dtype=np.float64)
    out = np.empty((T, 1) + image.shape[1:])
    with no_grad():
        for t in range(T):
            rng = np.random.default_rng([seed, t])
            out[t] = forward_seg(model, image[None], "mc_active", rng).data[0]
    return out


def sample_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0, computed as first + mean(deviation) so equal samples average exactly."""
    stack = np.asarray(stack, dtype=np.float64)
    first = stack[0]
    return first + (stack - first).mean(axis=0)


def pixel_entropy(p, eps: float = PROB_EPS) -> np.ndarray:
    """Binary entropy in nats, exactly symmetric under p -> 1 - p."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    q = 1.0 - p
    p = 1.0 - q  # canonical pair: (p, q) and (q, p) evaluate the same two terms
    u = -(p * np.log(p) + q * np.log(q))
    return np.clip(u, 0.0, LN2)


def predictive_entropy(samples: np.ndarray) -> np.ndarray:
    return pixel_entropy(sample_mean(samples))


def aleatoric_uncertainty(samples: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel mean of per-sample entropies, and its mean over all pixels."""
    amap = sample_mean(pixel_entropy(samples))
    return amap, float(amap.mean())


@dataclass
class McPrediction:
    samples: np.ndarray  # T x 1 x H x W
    mean_prob: np.ndarray  # H x W
    entropy_map: np.ndarray
    aleatoric_map: np.ndarray
    epistemic_map: np.ndarray
    T: int
    seed: int

    @classmethod
    def from_samples(cls, samples: np.ndarray, seed: int = 0) -> "McPrediction":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 3:
            samples = samples[:, None]
        stack = samples[:, 0]
        entropy = predictive_entropy(stack)
        aleatoric, _ = aleatoric_uncertainty(stack)
        pred = cls(samples, sample_mean(stack), entropy, aleatoric, np.zeros_like(entropy),
                   len(samples), seed)
        pred.epistemic_map = epistemic_uncertainty(pred)
        return pred

    @property
    def aleatoric_score(self) -> float:
        return float(self.aleatoric_map.mean())

    def metadata(self) -> dict:
        return {
            "T": self.T,
            "seed": self.seed,
            "height": int(self.mean_prob.shape[0]),
            "width": int(self.mean_prob.shape[1]),
            "mean_entropy": float(self.entropy_map.mean()),
            "mean_aleatoric": float(self.aleatoric_map.mean()),
            "mean_epistemic": float(self.epistemic_map.mean()),
            "max_entropy": float(self.entropy_map.max()),
            "max_sample_spread": float((self.samples.max(0) - self.samples.min(0)).max()),
        }


def epistemic_uncertainty(pred: McPrediction) -> np.ndarray:
    return np.maximum(pred.entropy_map - pred.aleatoric_map, 0.0)


def mc_predict(model: ModelGraph, image: np.ndarray, T: int = DEFAULT_SAMPLES, seed: int = 0) -> McPrediction:
    return McPrediction.from_samples(mc_sample(model, image, T, seed), seed)


def worker_count(default: int | None = None) -> int:
    """Worker cap from MCDSEG_THREADS (default: CPU count)."""
    raw = os.environ.get("MCDSEG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"MCDSEG_THREADS must be an integer, got {raw!r}") from None
    return default or os.cpu_count() or 1


def mc_predict_many(model: ModelGraph, images: Sequence[np.ndarray], T: int = DEFAULT_SAMPLES,
                    seed: int = 0, workers: int | None = None) -> list[McPrediction]:
    """Per-image predictions in input order; every image uses the same ``seed``."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(images) <= 1:
        return [mc_predict(model, im, T, seed) for im in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda im: mc_predict(model, im, T, seed), images))


def image_uncertainty(pred: McPrediction, reduction: str = "pixels", threshold: float = 0.5) -> float:
    """Image-level scalar from the aleatoric map.

    ``pixels`` averages over every pixel; ``foreground`` over pixels whose
    mean probability reaches ``threshold`` (0 if there are none).
    """
    if reduction == "pixels":
        return pred.aleatoric_score
    if reduction == "foreground":
        fg = pred.mean_prob >= threshold
        return float(pred.aleatoric_map[fg].mean()) if fg.any() else 0.0
    raise ValueError(f"unknown reduction {reduction!r}")


def model_uncertainty_score(predictions: Sequence[McPrediction], model: str = "",
                            size: int | None = None, reduction: str = "pixels") -> ScoreSummary:
    """Median/Min/Max over images of the per-image aleatoric scalar."""
    if not predictions:
        raise ValueError("need at least one prediction")
    return summarize([image_uncertainty(p, reduction) for p in predictions], model, size)


# --------------------------------------------------------------------------
# boundary rings


def boundary_band(mask: np.ndarray) -> np.ndarray:
    """Pixels within one pixel of a mask edge on either side (a 2-pixel-wide band)."""
    m = np.asarray(mask).astype(bool)
    return ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)


def ring_contrast(entropy: np.ndarray, mask: np.ndarray) -> float:
    """Mean entropy on the boundary band divided by the mean everywhere else."""
    band = boundary_band(mask)
    if not band.any() or band.all():
        return float("nan")
    rest = float(entropy[~band].mean())
    on = float(entropy[band].mean())
    return on / rest if rest > 0 else float("inf")


# --------------------------------------------------------------------------
# export


def to_gray8(u: np.ndarray) -> np.ndarray:
    """Entropy map -> 0..255 with white = ln 2."""
    return np.clip(np.rint(255.0 * np.asarray(u) / LN2), 0, 255).astype(np.uint8)


def write_grid(path: str | Path, grid: np.ndarray) -> None:
    """Raw float64 grid: text line 'MCDGRID1 H W' then H*W little-endian doubles, row-major."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"{GRID_MAGIC} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(grid, dtype="<f8").tobytes())


def read_grid(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    line, sep, payload = blob.partition(b"\n")
    parts = line.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 3 or parts[0] != GRID_MAGIC:
        raise DataError(f"{path} is not an {GRID_MAGIC} grid")
    h, w = int(parts[1]), int(parts[2])
    if len(payload) != 8 * h * w:
        raise DataError(f"{path}: expected {h * w} values, found {len(payload) // 8}")
    return np.frombuffer(payload, dtype="<f8").reshape(h, w).astype(np.float64)
