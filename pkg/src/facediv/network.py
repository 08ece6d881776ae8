"""Hypercolumn backbone with a diversity filter bank and an identity head.

Dataflow: stacked 3x3 conv blocks (ReLU after each conv); the block at
``hc_resolution`` enters the hypercolumn directly, every deeper block is
nearest-upsampled to ``hc_resolution`` and projected by a 1x1 conv.  The
concatenation is the hypercolumn descriptor; a 3x3 filter bank (no bias, no
activation) turns it into the signed response bank; large magnitude
filtering then global average pooling give the feature; a linear layer
gives the logits.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import lmf
from .tensor import Graph, Tensor, concat_channels, conv2d, global_avg_pool, linear, relu, upsample

__all__ = [
    "NetConfig",
    "toy_config",
    "full_scale_config",
    "Model",
    "ForwardResult",
    "build",
    "forward",
    "truncated_normal",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = "FACEDIV-CHECKPOINT 1"


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyper-parameters.

    ``blocks`` is a tuple of blocks, each a tuple of ``(out_channels, stride)``
    3x3 convs.  ``input_mean`` is subtracted from array inputs.  ``mid_block``
    indexes the block whose output is tapped at ``hc_resolution``; all later
    blocks are upsampled and projected to ``proj_width`` channels.  ``init``
    is ``"trunc_normal"`` (truncated normal with ``init_std`` everywhere) or
    ``"fan_in"`` (std ``sqrt(2/fan_in)`` before a ReLU, ``sqrt(1/fan_in)`` for
    the filter bank and classifier).
    """

    input_size: int = 32
    in_channels: int = 1
    blocks: tuple = (((8, 1), (16, 2)), ((16, 2), (24, 1)), ((24, 2), (32, 1)))
    mid_block: int = 1
    proj_width: int = 16
    K: int = 32
    hc_resolution: int = 8
    d_percent: float = 95.83
    num_classes: int = 20
    upsample_mode: str = "nearest"
    init: str = "fan_in"
    init_std: float = 0.02
    input_mean: float = 0.5

    def __post_init__(self):
        blocks = tuple(tuple((int(c), int(s)) for c, s in b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        self.validate()

    def validate(self) -> None:
        if self.input_size % 4 or self.hc_resolution != self.input_size // 4:
            raise ValueError(f"hc_resolution must be input_size/4 "
                             f"({self.input_size}/4), got {self.hc_resolution}")
        if not 0 <= self.mid_block < len(self.blocks):
            raise ValueError("mid_block out of range")
        res = self.block_resolutions()
        if res[self.mid_block] != self.hc_resolution:
            raise ValueError(f"block {self.mid_block} runs at {res[self.mid_block]}, "
                             f"not the hypercolumn resolution {self.hc_resolution}")
        for b in range(self.mid_block + 1, len(self.blocks)):
            if self.hc_resolution % res[b]:
                raise ValueError(f"block {b} resolution {res[b]} does not divide {self.hc_resolution}")
        if not 0 <= self.d_percent < 100:
            raise ValueError("d_percent must lie in [0, 100)")
        if self.K < 1 or self.num_classes < 2:
            raise ValueError("need K >= 1 and at least two classes")
        if self.init not in ("trunc_normal", "fan_in"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")

    def block_resolutions(self) -> list:
        res, out = self.input_size, []
        for block in self.blocks:
            for _, stride in block:
                res = -(-res // stride)
            out.append(res)
        return out

    @property
    def hc_channels(self) -> int:
        deep = len(self.blocks) - 1 - self.mid_block
        return self.blocks[self.mid_block][-1][0] + deep * self.proj_width

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        return cls(**json.loads(text))


def toy_config(**overrides) -> NetConfig:
    """Desk-scale preset: 32x32 grayscale input, K=32, 8x8 hypercolumn."""
    return NetConfig(**overrides)


def full_scale_config(**overrides) -> NetConfig:
    """The CASIA-Net-style architecture with HC descriptor (96x96, K=320)."""
    base = dict(
        input_size=96, in_channels=3,
        blocks=(((32, 1), (64, 1)),
                ((64, 2), (64, 1), (128, 1)),
                ((128, 2), (96, 1), (192, 1)),
                ((192, 2), (128, 1), (256, 1)),
                ((256, 2), (160, 1), (320, 1))),
        mid_block=2, proj_width=192, K=320, hc_resolution=24, d_percent=95.83,
        num_classes=10575, init="trunc_normal", input_mean=0.0)
    base.update(overrides)
    return NetConfig(**base)


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) samples redrawn until inside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class Model:
    config: NetConfig
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def conv_names(self):
        for b, block in enumerate(self.config.blocks):
            for j in range(len(block)):
                yield b, j, f"conv{b + 1}{j + 1}"

    def copy(self) -> "Model":
        return Model(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()))


def build(config: NetConfig, rng: Optional[np.random.Generator] = None) -> Model:
    """Allocate and initialize every parameter in a fixed order."""
    config.validate()
    rng = np.random.default_rng(0) if rng is None else rng
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def conv_std(fan_in: int) -> float:
        return float(np.sqrt(2.0 / fan_in)) if config.init == "fan_in" else config.init_std

    c_in = config.in_channels
    for b, block in enumerate(config.blocks):
        for j, (c_out, _) in enumerate(block):
            params[f"conv{b + 1}{j + 1}.w"] = truncated_normal(rng, (c_out, c_in, 3, 3), conv_std(9 * c_in))
            params[f"conv{b + 1}{j + 1}.b"] = np.zeros(c_out)
            c_in = c_out
    for b in range(config.mid_block + 1, len(config.blocks)):
        width = config.blocks[b][-1][0]
        params[f"proj{b + 1}.w"] = truncated_normal(rng, (config.proj_width, width, 1, 1), conv_std(width))
        params[f"proj{b + 1}.b"] = np.zeros(config.proj_width)
    fan_in = config.init == "fan_in"
    params["filters"] = truncated_normal(
        rng, (config.K, config.hc_channels, 3, 3),
        float(np.sqrt(1.0 / (9 * config.hc_channels))) if fan_in else config.init_std)
    params["cls.w"] = truncated_normal(
        rng, (config.num_classes, config.K),
        float(np.sqrt(1.0 / config.K)) if fan_in else config.init_std)
    params["cls.b"] = np.zeros(config.num_classes)
    return Model(config, params)


@dataclass
class ForwardResult:
    phi: Tensor
    psi: Tensor
    psi_lmf: Tensor
    feature: Tensor
    logits: Tensor
    graph: Graph


def forward(model: Model, image, graph: Optional[Graph] = None,
            d_percent: Optional[float] = None) -> ForwardResult:
    """Run the network on ``[C, H, W]`` or ``[N, C, H, W]`` images.

    Passing an existing ``graph`` binds the same parameter tensors, so two
    calls (clean and occluded branch) share weights and accumulate gradients
    into one copy.
    """
    cfg = model.config
    graph = Graph() if graph is None else graph
    if isinstance(image, Tensor):
        x = image
    else:
        x = graph.constant(np.asarray(image, dtype=np.float64) - cfg.input_mean)
    if x.shape[-3:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ValueError(f"expected images of shape {(cfg.in_channels, cfg.input_size, cfg.input_size)}, "
                         f"got {x.shape}")
    p = {k: graph.param(k, v) for k, v in model.params.items()}
    taps = []
    h = x
    for b, block in enumerate(cfg.blocks):
        for j, (_, stride) in enumerate(block):
            name = f"conv{b + 1}{j + 1}"
            h = relu(conv2d(h, p[name + ".w"], p[name + ".b"], stride=stride))
        if b == cfg.mid_block:
            taps.append(h)
        elif b > cfg.mid_block:
            factor = cfg.hc_resolution // h.shape[-1]
            up = upsample(h, factor, cfg.upsample_mode) if factor > 1 else h
            taps.append(relu(conv2d(up, p[f"proj{b + 1}.w"], p[f"proj{b + 1}.b"], padding="same")))
    phi = concat_channels(taps)
    psi = conv2d(phi, p["filters"])
    psi_lmf = lmf(psi, cfg.d_percent if d_percent is None else d_percent)
    feature = global_avg_pool(psi_lmf)
    logits = linear(feature, p["cls.w"], p["cls.b"])
    return ForwardResult(phi, psi, psi_lmf, feature, logits, graph)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, extra: Optional[dict] = None) -> None:
    """Text header then raw little-endian float64 arrays in header order.

    Header lines: the magic ``FACEDIV-CHECKPOINT 1``; ``config <json>``;
    optional ``meta <json>``; one ``param <name> <d0,d1,...>`` per array;
    ``end``.
    """
    lines = [_CKPT_MAGIC, "config " + model.config.to_json()]
    if extra:
        lines.append("meta " + json.dumps(extra, sort_keys=True, separators=(",", ":")))
    for name, v in model.params.items():
        lines.append(f"param {name} {','.join(str(d) for d in v.shape)}")
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + payload)


def load_checkpoint(path, with_meta: bool = False):
    data = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        nl = data.index(b"\n", pos)
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a facediv checkpoint")
    config, meta, shapes = None, {}, []
    for line in header[1:]:
        key, rest = line.split(" ", 1)
        if key == "config":
            config = NetConfig.from_json(rest)
        elif key == "meta":
            meta = json.loads(rest)
        elif key == "param":
            name, dims = rest.split(" ")
            shapes.append((name, tuple(int(d) for d in dims.split(",") if d)))
        else:
            raise ValueError(f"{path}: unknown header record {key!r}")
    params = OrderedDict()
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter payload")
    model = Model(config, params)
    return (model, meta) if with_meta else model
