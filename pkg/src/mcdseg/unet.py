"""Encoder-decoder UNet with skip connections and optional MC-dropout sites.

Layout for ``depth`` d and ``conv_per_block`` k::

    encoder level i (i = 0..d-1): k x [dropout] conv3x3 -> BN -> act, then 2x2 max pool
    bottleneck:                   k x [dropout] conv3x3 -> BN -> act
    decoder level i (i = d-1..0): nearest x2 up-sample, concat encoder skip i,
                                  k x [dropout] conv3x3 -> BN -> act
    head:                         [dropout] conv1x1 -> sigmoid

Widths double per level starting at ``base_width``.  With d=5, k=2 that is
2*5*2 + 2 + 1 = 23 convolutions, and ``base_width=4`` gives 493,553
trainable parameters.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .layers import (BatchNormLayer, ConvLayer, DropoutLayer, batchnorm, conv2d,
                     dropout, max_pool, upsample_nearest, _check_mode)
from .tensor import Tensor, concat, leaky_relu, no_grad, relu, sigmoid

ACTIVATIONS = ("relu", "leaky_relu")
CHECKPOINT_MAGIC = b"MCDSEG1"
REFERENCE_PARAM_COUNT = 494_000


@dataclass
class UNetConfig:
    input_channels: int = 3
    base_width: int = 4
    depth: int = 5
    conv_per_block: int = 2
    input_extent: int = 64
    bottleneck_extent: int | None = None
    dropout_rate: float = 0.1
    mcd_enabled: bool = True
    encoder_activation: str = "leaky_relu"
    decoder_activation: str = "relu"
    leaky_slope: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.bottleneck_extent is None and self.depth >= 0 and self.input_extent > 0:
            self.bottleneck_extent = self.input_extent // (2 ** self.depth)

    def validate(self) -> None:
        if min(self.input_channels, self.base_width, self.conv_per_block, self.input_extent) < 1:
            raise ValueError("channel counts, conv_per_block and input_extent must be positive")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.input_extent % (2 ** self.depth):
            raise ShapeError(f"input extent {self.input_extent} not divisible by 2^{self.depth}")
        reachable = self.input_extent // (2 ** self.depth)
        if self.bottleneck_extent != reachable:
            raise ShapeError(f"bottleneck extent {self.bottleneck_extent} unreachable: "
                             f"{self.input_extent} / 2^{self.depth} = {reachable}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        for act in (self.encoder_activation, self.decoder_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {ACTIVATIONS}")

    @property
    def widths(self) -> list[int]:
        """Channel count at each level, shallowest first, bottleneck last."""
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]

    @property
    def conv_layer_count(self) -> int:
        return 2 * self.depth * self.conv_per_block + self.conv_per_block + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class ConvUnit:
    """One weight layer: optional dropout, convolution, optional BN, activation."""

    conv: ConvLayer
    norm: BatchNormLayer | None
    activation: str
    dropout: DropoutLayer | None = None


@dataclass(eq=False)
class ModelGraph:
    config: UNetConfig
    encoder: list[list[ConvUnit]]
    bottleneck: list[ConvUnit]
    decoder: list[list[ConvUnit]]  # deepest level first
    head: ConvUnit

    @property
    def skips(self) -> list[tuple[int, int]]:
        """(encoder block, decoder block) pairs joined by channel concatenation."""
        d = self.config.depth
        return [(i, d - 1 - i) for i in range(d)]

    def units(self) -> list[ConvUnit]:
        out = [u for block in self.encoder for u in block]
        out += self.bottleneck
        out += [u for block in self.decoder for u in block]
        out.append(self.head)
        return out

    def conv_layers(self) -> list[ConvLayer]:
        return [u.conv for u in self.units()]

    def dropout_layers(self) -> list[DropoutLayer]:
        return [u.dropout for u in self.units() if u.dropout is not None]

    @property
    def layers(self) -> list[tuple[str, object]]:
        """Execution-ordered layer list, with structural steps named."""
        seq: list[tuple[str, object]] = []

        def add_units(prefix, units):
            for j, u in enumerate(units):
                if u.dropout is not None:
                    seq.append((f"{prefix}.{j}.dropout", u.dropout))
                seq.append((f"{prefix}.{j}.conv", u.conv))
                if u.norm is not None:
                    seq.append((f"{prefix}.{j}.bn", u.norm))
                seq.append((f"{prefix}.{j}.{u.activation}", u.activation))

        for i, block in enumerate(self.encoder):
            add_units(f"enc{i}", block)
            seq.append((f"enc{i}.max_pool", "max_pool"))
        add_units("mid", self.bottleneck)
        d = self.config.depth
        for k, block in enumerate(self.decoder):
            level = d - 1 - k
            seq.append((f"dec{level}.upsample", "upsample_nearest"))
            seq.append((f"dec{level}.concat", f"skip enc{level}"))
            add_units(f"dec{level}", block)
        add_units("head", [self.head])
        return seq

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Ordered parameter registry: conv weight, bias, then BN gamma, beta per unit."""
        reg = []
        for idx, u in enumerate(self.units()):
            reg.append((f"conv{idx}.weight", u.conv.weight))
            reg.append((f"conv{idx}.bias", u.conv.bias))
            if u.norm is not None:
                reg.append((f"bn{idx}.gamma", u.norm.gamma))
                reg.append((f"bn{idx}.beta", u.norm.beta))
        return reg

    def norms(self) -> list[BatchNormLayer]:
        return [u.norm for u in self.units() if u.norm is not None]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for idx, u in enumerate(self.units()):
            if u.norm is not None:
                out.append((f"bn{idx}.running_mean", u.norm.running_mean))
                out.append((f"bn{idx}.running_var", u.norm.running_var))
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameters and running statistics."""
        snap = {k: t.data.copy() for k, t in self.parameters()}
        snap.update({k: v.copy() for k, v in self.buffers()})
        return snap

    def load_state(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.parameters():
            t.data = snap[k].copy()
        for idx, u in enumerate(self.units()):
            if u.norm is not None:
                u.norm.running_mean = snap[f"bn{idx}.running_mean"].copy()
                u.norm.running_var = snap[f"bn{idx}.running_var"].copy()


def _unit(in_ch, out_ch, kernel, activation, cfg: UNetConfig, rng, norm=True) -> ConvUnit:
    conv = ConvLayer.create(in_ch, out_ch, kernel, rng=rng)
    drop = DropoutLayer(cfg.dropout_rate) if cfg.mcd_enabled else None
    return ConvUnit(conv, BatchNormLayer.create(out_ch) if norm else None, activation, drop)


def build_unet(config: UNetConfig) -> ModelGraph:
    """Build a freshly initialized UNet; initialization depends only on ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    widths = config.widths
    k = config.conv_per_block
    enc_act, dec_act = config.encoder_activation, config.decoder_activation

    encoder = []
    prev = config.input_channels
    for w in widths[:-1]:
        block = []
        for _ in range(k):
            block.append(_unit(prev, w, 3, enc_act, config, rng))
            prev = w
        encoder.append(block)
    bottleneck = []
    for _ in range(k):
        bottleneck.append(_unit(prev, widths[-1], 3, enc_act, config, rng))
        prev = widths[-1]
    decoder = []
    for level in reversed(range(config.depth)):
        w = widths[level]
        prev = prev + w  # up-sampled features + skip
        block = []
        for _ in range(k):
            block.append(_unit(prev, w, 3, dec_act, config, rng))
            prev = w
        decoder.append(block)
    head = _unit(prev, 1, 1, "sigmoid", config, rng, norm=False)
    return ModelGraph(config, encoder, bottleneck, decoder, head)


def param_count(model: ModelGraph) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(t.size for _, t in model.parameters())


def analytic_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count of ``build_unet(config)`` without building it."""
    w = config.widths
    k = config.conv_per_block

    def unit(i, o, ks=3):
        return i * o * ks * ks + o + 2 * o

    total = unit(config.input_channels, w[0]) + (k - 1) * unit(w[0], w[0])
    for lvl in range(1, config.depth + 1):
        total += unit(w[lvl - 1], w[lvl]) + (k - 1) * unit(w[lvl], w[lvl])
    for lvl in range(config.depth):
        total += unit(w[lvl + 1] + w[lvl], w[lvl]) + (k - 1) * unit(w[lvl], w[lvl])
    return total + w[0] + 1


def solve_base_width(target: int = REFERENCE_PARAM_COUNT, config: UNetConfig | None = None,
                     max_width: int = 128) -> int:
    """Base width whose analytic parameter count is closest to ``target``."""
    base = config or UNetConfig()
    best = min(range(1, max_width + 1),
               key=lambda b: abs(analytic_param_count(_with_width(base, b)) - target))
    return best


def _with_width(cfg: UNetConfig, width: int) -> UNetConfig:
    d = cfg.to_dict()
    d["base_width"] = width
    return UNetConfig.from_dict(d)


# --------------------------------------------------------------------------
# forward


def _activate(x: Tensor, name: str, slope: float) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "leaky_relu":
        return leaky_relu(x, slope)
    if name == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def _run_unit(x: Tensor, u: ConvUnit, mode: str, rng, slope: float) -> Tensor:
    if u.dropout is not None:
        x = dropout(x, u.dropout, rng, mode=mode)
    x = conv2d(x, u.conv)
    if u.norm is not None:
        x = batchnorm(x, u.norm, mode)
    return _activate(x, u.activation, slope)


def forward_seg(model: ModelGraph, batch, mode: str = "inference",
                rng: np.random.Generator | None = None) -> Tensor:
    """Foreground probabilities N x 1 x H x W for an N x C x H x W batch.

    ``train``: dropout on, batch statistics.  ``inference``: dropout off,
    running statistics.  ``mc_active``: dropout on, running statistics.
    """
    _check_mode(mode)
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected N x {cfg.input_channels} x H x W, got {x.shape}")
    h, w = x.shape[2:]
    if h != w or h % (2 ** cfg.depth):
        raise ShapeError(f"extent {h}x{w} must be square and divisible by 2^{cfg.depth}")
    if mode != "inference" and any(d.rate > 0 for d in model.dropout_layers()) and rng is None:
        raise ValueError(f"mode {mode!r} with dropout needs a random generator")
    slope = cfg.leaky_slope

    skips = []
    for block in model.encoder:
        for u in block:
            x = _run_unit(x, u, mode, rng, slope)
        skips.append(x)
        x = max_pool(x, 2)
    for u in model.bottleneck:
        x = _run_unit(x, u, mode, rng, slope)
    for block, skip in zip(model.decoder, reversed(skips)):
        x = concat([upsample_nearest(x, 2), skip], axis=1)
        for u in block:
            x = _run_unit(x, u, mode, rng, slope)
    return _run_unit(x, model.head, mode, rng, slope)


def predict_proba(model: ModelGraph, images: np.ndarray, mode: str = "inference",
                  rng: np.random.Generator | None = None, batch_size: int = 16) -> np.ndarray:
    """Tape-free forward over an array of images; returns N x H x W probabilities."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            probs = forward_seg(model, images[start:start + batch_size], mode, rng)
            out.append(probs.data[:, 0])
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# checkpoint


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(model: ModelGraph, path: str | Path | None = None,
                    extra: dict | None = None) -> bytes:
    """Serialize to the MCDSEG1 format; write to ``path`` if given and return the bytes.

    Layout: magic, u32 header length, UTF-8 JSON header (config, widths,
    parameter and buffer names/shapes, extra), parameters then running
    statistics as little-endian float64, u64 blake2b-64 checksum of every
    preceding byte.
    """
    params = model.parameters()
    bufs = model.buffers()
    header = {
        "config": model.config.to_dict(),
        "widths": model.config.widths,
        "params": [[k, list(t.shape)] for k, t in params],
        "buffers": [[k, list(v.shape)] for k, v in bufs],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for _, t in params:
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    for _, v in bufs:
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = buf.getvalue()
    blob = body + struct.pack("<Q", checksum64(body))
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def read_checkpoint_header(blob: bytes) -> dict:
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not an MCDSEG1 checkpoint")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if checksum64(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", body, off)
    try:
        return json.loads(body[off + 4:off + 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc


def load_checkpoint(source: str | Path | bytes) -> ModelGraph:
    """Rebuild a model from checkpoint bytes or a file path, verifying the checksum."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    blob = bytes(blob)
    header = read_checkpoint_header(blob)
    model = build_unet(UNetConfig.from_dict(header["config"]))
    params = model.parameters()
    bufs = model.buffers()
    if [[k, list(t.shape)] for k, t in params] != header["params"] or \
            [[k, list(v.shape)] for k, v in bufs] != header["buffers"]:
        raise CheckpointError("checkpoint layout does not match its config")
    off = len(CHECKPOINT_MAGIC) + 4 + struct.unpack_from("<I", blob, len(CHECKPOINT_MAGIC))[0]
    total = sum(t.size for _, t in params) + sum(v.size for _, v in bufs)
    if len(blob) - 8 - off != 8 * total:
        raise CheckpointError("checkpoint payload has the wrong length")
    values = np.frombuffer(blob, dtype="<f8", count=total, offset=off).astype(np.float64)
    pos = 0
    snap = {}
    for k, t in params:
        snap[k] = values[pos:pos + t.size].reshape(t.shape)
        pos += t.size
    for k, v in bufs:
        snap[k] = values[pos:pos + v.size].reshape(v.shape)
        pos += v.size
    model.load_state(snap)
    return model
