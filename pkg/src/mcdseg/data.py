"""Segmentation datasets: synthetic stained-cell generator, PNG loading, group-aware splits."""
from __future__ import annotations

import colorsys
import csv
import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DataError, ShapeError
from .png import read_png, to_uint8, write_gray, write_rgb

SPLITS = ("train", "val", "test")
GROUP_RE = re.compile(r"^g(\d+)_")


@dataclass(eq=False)
class SegItem:
    image: np.ndarray  # 3 x H x W in [0, 1]
    mask: np.ndarray  # 1 x H x W in {0, 1}
    group: int
    stem: str
    split: str | None = None
    meta: dict = field(default_factory=dict)

    def replace(self, **changes) -> "SegItem":
        return dataclasses.replace(self, **changes)


class SegDataset:
    """Ordered collection of image/mask pairs sharing one extent."""

    def __init__(self, items: list[SegItem]):
        self.items = list(items)
        if self.items:
            h, w = self.items[0].image.shape[1:]
            for it in self.items:
                if it.image.shape[1:] != (h, w) or it.mask.shape != (1, h, w):
                    raise ShapeError(f"item {it.stem} does not match extent {h}x{w}")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i) -> SegItem:
        return self.items[i]

    @property
    def H(self) -> int:
        return self.items[0].image.shape[1]

    @property
    def W(self) -> int:
        return self.items[0].image.shape[2]

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items]).astype(np.float64)

    def masks(self) -> np.ndarray:
        return np.stack([it.mask for it in self.items]).astype(np.float64)

    def groups(self) -> set[int]:
        return {it.group for it in self.items}

    def subset(self, split: str) -> "SegDataset":
        return SegDataset([it for it in self.items if it.split == split])

    def split_groups(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {}
        for it in self.items:
            out.setdefault(it.split, set()).add(it.group)
        return out


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    count: int = 200
    extent: int = 64
    groups: int = 10
    cells: tuple[int, int] = (2, 6)
    radius: tuple[float, float] = (3.0, 7.0)
    cluster_prob: float = 0.25
    fg_hue: tuple[float, float] = (0.94, 1.0)
    bg_hue: float = 0.85
    texture_amplitude: float = 0.08
    noise_sigma: float = 0.04
    edge_softness: float = 0.8
    placement: str = "random"
    max_retries: int = 60
    seed: int = 42

    def validate(self, depth: int | None = None) -> None:
        if self.count < 0 or self.groups < 1 or self.extent < 1:
            raise ValueError("count must be >= 0, groups and extent >= 1")
        if depth is not None and self.extent % (2 ** depth):
            raise ShapeError(f"extent {self.extent} not divisible by 2^{depth}")
        lo, hi = self.cells
        if lo < 0 or hi < lo:
            raise ValueError(f"bad cells-per-image range {self.cells}")
        rlo, rhi = self.radius
        if rlo < 2 or rhi < rlo:
            raise ValueError(f"cell radii must be >= 2 px with lo <= hi, got {self.radius}")
        if not 0.0 <= self.cluster_prob <= 1.0:
            raise ValueError("cluster_prob must lie in [0, 1]")
        if self.placement not in ("random", "center"):
            raise ValueError("placement must be 'random' or 'center'")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def ellipse_radius(shape: tuple[int, int], cy: float, cx: float, a: float, b: float,
                   theta: float) -> np.ndarray:
    """Normalized elliptical radius at every pixel center (<= 1 means inside)."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    cos, sin = np.cos(theta), np.sin(theta)
    u = dx * cos + dy * sin
    v = -dx * sin + dy * cos
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def rasterize_cells(shape: tuple[int, int], cells: list[dict]) -> np.ndarray:
    """Union of ellipse interiors as a uint8 mask."""
    mask = np.zeros(shape, dtype=bool)
    for c in cells:
        mask |= ellipse_radius(shape, c["cy"], c["cx"], c["a"], c["b"], c["theta"]) <= 1.0
    return mask.astype(np.uint8)


def _place_cells(cfg: SynthConfig, rng: np.random.Generator) -> tuple[list[dict], int]:
    n = int(rng.integers(cfg.cells[0], cfg.cells[1] + 1))
    size = cfg.extent
    cells: list[dict] = []
    dropped = 0
    for _ in range(n):
        placed = False
        for _ in range(cfg.max_retries):
            a, b = rng.uniform(cfg.radius[0], cfg.radius[1], size=2)
            theta = rng.uniform(0, np.pi)
            r = max(a, b)
            clustered = bool(cells) and rng.random() < cfg.cluster_prob
            if cfg.placement == "center":
                cy = cx = (size - 1) / 2.0
            elif clustered:
                anchor = cells[int(rng.integers(len(cells)))]
                dist = rng.uniform(0.6, 1.0) * (r + max(anchor["a"], anchor["b"]))
                ang = rng.uniform(0, 2 * np.pi)
                cy, cx = anchor["cy"] + dist * np.sin(ang), anchor["cx"] + dist * np.cos(ang)
            else:
                cy, cx = rng.uniform(r, size - 1 - r, size=2) if size - 1 - r > r else (size / 2,) * 2
            if not (r <= cy <= size - 1 - r and r <= cx <= size - 1 - r):
                continue
            if not clustered and cfg.placement != "center" and any(
                    np.hypot(cy - c["cy"], cx - c["cx"]) < r + max(c["a"], c["b"]) + 1 for c in cells):
                continue
            cells.append({"cy": float(cy), "cx": float(cx), "a": float(a), "b": float(b),
                          "theta": float(theta), "clustered": clustered})
            placed = True
            break
        if not placed:
            dropped += 1
    return cells, dropped


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0)))


def _render(cfg: SynthConfig, cells: list[dict], rng: np.random.Generator,
            stain: dict) -> np.ndarray:
    size = cfg.extent
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    texture = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.02, 0.15, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fy * rr + fx * cc) + phase)
    texture *= cfg.texture_amplitude / 3.0
    bg = _hsv(cfg.bg_hue + stain["hue"], 0.28 * stain["sat"], 0.88)
    img = bg[:, None, None] * (1.0 + texture[None])

    for c in cells:
        rho = ellipse_radius((size, size), c["cy"], c["cx"], c["a"], c["b"], c["theta"])
        r_eff = np.sqrt(c["a"] * c["b"])
        alpha = expit((1.0 - rho) * r_eff / cfg.edge_softness)
        hue = rng.uniform(*cfg.fg_hue) + stain["hue"]
        fg = _hsv(hue, 0.72 * stain["sat"], 0.82)
        grain = 1.0 + 0.06 * rng.standard_normal((size, size))
        img = img * (1.0 - alpha[None]) + (fg[:, None, None] * grain[None]) * alpha[None]

    img = img + cfg.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(config: SynthConfig) -> SegDataset:
    """Deterministic stained-cell scenes; item i depends only on (seed, i) and its group."""
    config.validate()
    stains = {}
    for g in range(config.groups):
        grng = np.random.default_rng([config.seed, 1_000_000 + g])
        stains[g] = {"hue": float(grng.uniform(-0.02, 0.02)), "sat": float(grng.uniform(0.85, 1.15))}
    items = []
    for i in range(config.count):
        group = i * config.groups // max(config.count, 1)
        rng = np.random.default_rng([config.seed, i])
        cells, dropped = _place_cells(config, rng)
        image = _render(config, cells, rng, stains[group])
        mask = rasterize_cells((config.extent, config.extent), cells)[None]
        meta = {"cells": cells, "dropped_cells": dropped, "extent": config.extent}
        items.append(SegItem(image, mask, group, f"g{group}_{i:04d}", meta=meta))
    return SegDataset(items)


# --------------------------------------------------------------------------
# disk format


def save_dataset(dataset: SegDataset, root: str | Path) -> Path:
    """Write images/, masks/, params/ sidecars and manifest.tsv under ``root``."""
    root = Path(root)
    for sub in ("images", "masks", "params"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for it in dataset:
        write_rgb(root / "images" / f"{it.stem}.png", to_uint8(it.image))
        write_gray(root / "masks" / f"{it.stem}.png", it.mask[0].astype(np.uint8) * 255)
        if it.meta:
            (root / "params" / f"{it.stem}.json").write_text(json.dumps(it.meta, sort_keys=True))
    write_manifest(dataset, root / "manifest.tsv")
    return root


def write_manifest(dataset: SegDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["stem", "group", "split"])
        for it in dataset:
            w.writerow([it.stem, it.group, it.split or ""])


def read_manifest(path: str | Path) -> dict[str, tuple[int, str | None]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return {r["stem"]: (int(r["group"]), r["split"] or None) for r in rows}


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def load_dataset(image_dir: str | Path, mask_dir: str | Path,
                 manifest: str | Path | None = None) -> SegDataset:
    """Load paired RGB images and grayscale masks matched by filename stem.

    Masks are binarized at >= 128.  Groups come from the manifest when
    given, else from a ``g<id>_`` filename prefix, else each image is its
    own group.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"directory not found: {d}")
    imgs, msks = _stems(image_dir), _stems(mask_dir)
    missing = sorted(set(imgs) ^ set(msks))
    if missing:
        raise DataError(f"no counterpart for: {', '.join(missing)}")
    tags = read_manifest(manifest) if manifest is not None else {}

    items = []
    singleton = 0
    for stem in sorted(imgs):
        img, mode = read_png(imgs[stem])
        if mode != "RGB":
            raise DataError(f"image {stem} must be 8-bit RGB, got mode {mode}")
        mask, mmode = read_png(msks[stem])
        if mmode != "L":
            raise DataError(f"mask {stem} must be 8-bit grayscale, got mode {mmode}")
        if img.shape[1:] != mask.shape:
            raise DataError(f"size mismatch for {stem}: image {img.shape[1:]} vs mask {mask.shape}")
        if stem in tags:
            group, split_tag = tags[stem]
        else:
            m = GROUP_RE.match(stem)
            if m:
                group = int(m.group(1))
            else:
                group = -1 - singleton
                singleton += 1
            split_tag = None
        items.append(SegItem(img.astype(np.float64) / 255.0,
                             (mask >= 128).astype(np.uint8)[None], group, stem, split_tag))
    return SegDataset(items)


def load_dataset_dir(root: str | Path) -> SegDataset:
    """Load a directory written by :func:`save_dataset` (manifest optional)."""
    root = Path(root)
    manifest = root / "manifest.tsv"
    ds = load_dataset(root / "images", root / "masks", manifest if manifest.exists() else None)
    params = root / "params"
    for it in ds:
        side = params / f"{it.stem}.json"
        if side.exists():
            it.meta = json.loads(side.read_text())
    return ds


# --------------------------------------------------------------------------
# splitting


def split(dataset: SegDataset, ratios=(0.7, 0.15, 0.15), seed: int = 0,
          names=SPLITS) -> SegDataset:
    """Assign whole groups to splits.

    Groups are shuffled by ``seed``; the first ``len(ratios)`` groups seed
    one split each, every later group goes to the split whose item count
    is furthest below its target (ties to the earlier split).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(names):
        raise ValueError("one ratio per split name is required")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    sizes: dict[int, int] = {}
    for it in dataset:
        sizes[it.group] = sizes.get(it.group, 0) + 1
    groups = sorted(sizes)
    if len(groups) < len(ratios):
        raise DataError(f"{len(groups)} groups cannot fill {len(ratios)} splits")
    order = [groups[i] for i in np.random.default_rng(seed).permutation(len(groups))]
    total = len(dataset)
    targets = [r * total for r in ratios]
    filled = [0] * len(ratios)
    assign: dict[int, str] = {}
    for k, g in enumerate(order):
        if k < len(ratios):
            s = k
        else:
            deficits = [t - f for t, f in zip(targets, filled)]
            s = int(np.argmax(deficits))
        assign[g] = names[s]
        filled[s] += sizes[g]
    return SegDataset([it.replace(split=assign[it.group]) for it in dataset])
