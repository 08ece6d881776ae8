"""Two-branch (clean/occluded) training with shared weights.

A run is fully determined by its :class:`TrainConfig` and the dataset: one
``numpy`` generator seeded from ``config.seed`` drives the epoch shuffles,
occluder placements and noise fills, in that consumption order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import (FaceTemplate, OccluderSpec, anchor_point, default_template, occluder_rect,
                       rect_corners, render_occlusion, warp_anchors)
from .losses import (LOSS_TERMS, fad_loss, fad_mask, occluded_id_loss,
                     sad_filter_loss, sad_response_loss, total_loss)
from .network import Model, NetConfig, forward, full_scale_config, save_checkpoint, toy_config
from .tensor import Graph, softmax_xent

__all__ = [
    "TrainConfig",
    "TOY_RECIPES",
    "toy_train_config",
    "PairBatch",
    "TrainState",
    "FitResult",
    "LOG_COLUMNS",
    "make_pair_batch",
    "train_step",
    "fit",
    "read_kv",
    "config_from_kv",
    "read_config",
    "write_config",
]

LOG_COLUMNS = ("epoch", "lr", "L_id", "L_sad_f", "L_sad_r", "L_fad", "L_occ", "total")


@dataclass
class TrainConfig:
    """Optimizer, loss and occluder settings of one run.

    ``net`` holds :class:`NetConfig` overrides applied on top of ``preset``.
    ``fad_t`` is an element count in ``count`` mode and a difference
    threshold in ``value`` mode.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    decay_factor: float = 10.0
    max_decays: int = 2
    plateau_window: int = 3
    plateau_tol: float = 0.01
    w_id: float = 1.0
    w_sad_f: float = 1.0
    w_sad_r: float = 1.0
    w_fad: float = 1.0
    w_occ: float = 1.0
    fad_mode: str = "count"
    fad_t: float = 26
    sigma: float = 1.5
    occluder_fill: str = "black"
    occluder_size: str = "static"
    seed: int = 0
    preset: str = "toy"
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.decay_factor <= 1 or self.max_decays < 0 or self.plateau_window < 1:
            raise ValueError("invalid learning-rate schedule")
        for name, w in self.loss_weights.items():
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative")
        if self.fad_mode not in ("count", "value"):
            raise ValueError(f"unknown fad_mode {self.fad_mode!r}")
        if self.preset not in ("toy", "full"):
            raise ValueError(f"unknown preset {self.preset!r}")
        OccluderSpec(self.occluder_fill, self.occluder_size)

    @property
    def loss_weights(self) -> dict:
        return {n: float(getattr(self, "w_" + n)) for n in LOSS_TERMS}

    @property
    def occluder(self) -> OccluderSpec:
        return OccluderSpec(self.occluder_fill, self.occluder_size, self.seed)

    @property
    def uses_occlusion(self) -> bool:
        return self.w_fad > 0 or self.w_occ > 0

    def net_config(self, **extra) -> NetConfig:
        make = toy_config if self.preset == "toy" else full_scale_config
        return make(**{**self.net, **extra})


# Settings that train the 32x32 toy network in a few minutes on one core.
# Momentum SGD at the default 1e-3 barely moves it; sigma is scaled to the
# 8x8 response map.
TOY_RECIPES = {
    "baseline": dict(w_sad_f=0.0, w_sad_r=0.0, w_fad=0.0, w_occ=0.0, net={"d_percent": 0.0}),
    "sad": dict(w_sad_f=0.01, w_sad_r=0.01, w_fad=0.0, w_occ=0.0),
    "full": dict(w_sad_f=0.01, w_sad_r=0.01, w_fad=0.01, w_occ=0.3),
}


def toy_train_config(recipe: str = "full", **overrides) -> TrainConfig:
    """Toy-scale :class:`TrainConfig` for one of ``TOY_RECIPES``.

    ``net`` overrides are merged into the recipe's network overrides.
    """
    if recipe not in TOY_RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; have {sorted(TOY_RECIPES)}")
    base = dict(lr=0.05, batch_size=16, epochs=20, plateau_window=20, sigma=0.5)
    spec = {**TOY_RECIPES[recipe], **overrides}
    net = {**TOY_RECIPES[recipe].get("net", {}), **overrides.get("net", {})}
    spec.pop("net", None)
    return TrainConfig(**{**base, **spec}, net=net)


def _parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        return text.lower() in ("1", "true", "yes")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


_NET_KINDS = {f.name: f.type for f in fields(NetConfig)}


def _net_value(key: str, text: str):
    if key == "blocks":
        # "8:1,16:2 / 16:2,24:1 / ..."
        return tuple(tuple(tuple(int(v) for v in conv.split(":")) for conv in blk.split(","))
                     for blk in text.split("/"))
    kind = {"int": int, "float": float, "str": str}.get(_NET_KINDS.get(key), str)
    return _parse_value(text, kind)


def _net_text(key: str, value) -> str:
    if key == "blocks":
        return " / ".join(",".join(f"{c}:{s}" for c, s in blk) for blk in value)
    return repr(value) if isinstance(value, float) else str(value)


def read_kv(path) -> dict:
    """Flat ``key = value`` file (``#`` starts a comment) as a dict of strings."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def config_from_kv(kv: dict, **overrides) -> TrainConfig:
    """Build a :class:`TrainConfig` from string values; ``net.X`` keys go to the network."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    net: dict = {}
    for key, val in kv.items():
        if key.startswith("net."):
            sub = key[4:]
            if sub not in _NET_KINDS:
                raise ValueError(f"unknown network key {sub!r}")
            net[sub] = _net_value(sub, val)
        elif key in kinds and key != "net":
            kind = {"int": int, "float": float, "str": str}.get(kinds[key], str)
            values[key] = _parse_value(val, kind)
        else:
            raise ValueError(f"unknown training key {key!r}")
    values.update({k: v for k, v in overrides.items() if k != "net"})
    net.update(overrides.get("net", {}))
    return TrainConfig(net=net, **values)


def read_config(path, **overrides) -> TrainConfig:
    return config_from_kv(read_kv(path), **overrides)


def write_config(path, config: TrainConfig) -> None:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "net":
            continue
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
    for k in sorted(config.net):
        lines.append(f"net.{k} = {_net_text(k, config.net[k])}")
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------------
# batches


@dataclass
class PairBatch:
    images: np.ndarray  # [N, C, H, W]
    landmarks: np.ndarray  # [N, 68, 2]
    labels: np.ndarray  # [N]
    occluded: Optional[np.ndarray]  # [N, C, H, W] or None
    rect: Optional[tuple] = None  # template-space (x, y, w, h)
    quads: Optional[np.ndarray] = None  # [N, 4, 2] image-space

    def __len__(self) -> int:
        return len(self.labels)


def make_pair_batch(samples: Sequence, occluder: Optional[OccluderSpec],
                    rng: np.random.Generator,
                    template: Optional[FaceTemplate] = None) -> PairBatch:
    """Stack samples and occlude every image with one shared template rectangle.

    ``occluder=None`` gives a clean-only batch.  The clean images in the batch
    are copies of the sample images, never modified.
    """
    if not samples:
        raise ValueError("empty batch")
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    landmarks = np.stack([np.asarray(s.landmarks, dtype=np.float64) for s in samples])
    labels = np.array([s.identity for s in samples], dtype=np.int64)
    if occluder is None:
        return PairBatch(images, landmarks, labels, None)
    template = default_template() if template is None else template
    rect = occluder_rect(occluder, template, rng)
    anchors = tuple(anchor_point(c, template) for c in rect_corners(rect))
    quads = np.stack([warp_anchors(anchors, lm, template) for lm in landmarks])
    occluded = np.stack([render_occlusion(img, q, occluder.fill, rng)
                         for img, q in zip(images, quads)])
    return PairBatch(images, landmarks, labels, occluded, rect, quads)


# ----------------------------------------------------------------------------
# optimization


@dataclass
class TrainState:
    lr: float
    velocity: dict = field(default_factory=dict)
    step: int = 0


def _finite_or_raise(values: dict) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            dump = ", ".join(f"{k}={values[k]!r}" for k in values)
            raise FloatingPointError(f"non-finite {name} loss ({v!r}); terms: {dump}")


def batch_losses(model: Model, batch: PairBatch, config: TrainConfig):
    """Record every active loss term; returns ``(graph, terms, mask)``."""
    cfg = model.config
    graph = Graph()
    clean = forward(model, batch.images, graph)
    filters = graph.param("filters", model.params["filters"])
    terms = {
        "id": softmax_xent(clean.logits, batch.labels),
        "sad_f": sad_filter_loss(filters),
        "sad_r": sad_response_loss(clean.psi, cfg.d_percent, config.sigma),
    }
    mask = None
    if config.uses_occlusion:
        if batch.occluded is None:
            raise ValueError("configuration needs occluded pairs but the batch has none")
        occ = forward(model, batch.occluded, graph)
        t = config.fad_t if config.fad_mode == "value" else int(config.fad_t)
        mask = fad_mask(clean.feature, occ.feature, config.fad_mode, t)
        terms["fad"] = fad_loss(clean.feature, occ.feature, mask)
        terms["occ"] = occluded_id_loss(occ.feature, mask, graph.param("cls.w", model.params["cls.w"]),
                                        graph.param("cls.b", model.params["cls.b"]), batch.labels)
    return graph, terms, mask


def train_step(model: Model, batch: PairBatch, config: TrainConfig,
               state: Optional[TrainState] = None) -> dict:
    """One SGD-with-momentum update; returns the term values and weighted total.

    Terms not computed (no occluded branch) are reported as NaN.
    """
    state = TrainState(config.lr) if state is None else state
    graph, terms, _ = batch_losses(model, batch, config)
    total = total_loss(terms, config.loss_weights)
    values = {n: float(t.values) for n, t in terms.items()}
    values["total"] = float(total.values)
    _finite_or_raise(values)
    graph.backward(total)
    for name, w in model.params.items():
        p = graph.params[name]
        if p.values is not w:
            raise RuntimeError(f"parameter {name!r} was copied inside the graph")
        g = p.grad if p.grad is not None else np.zeros_like(w)
        v = state.velocity.get(name)
        v = -state.lr * g if v is None else config.momentum * v - state.lr * g
        state.velocity[name] = v
        w += v
    state.step += 1
    return {**{n: values.get(n, float("nan")) for n in LOSS_TERMS}, "total": values["total"]}


@dataclass
class FitResult:
    rows: list
    checkpoints: list
    lr_history: list


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def fit(model: Model, samples: Sequence, config: TrainConfig, out_dir=None,
        step: Optional[Callable] = None, template: Optional[FaceTemplate] = None,
        progress: Optional[Callable] = None) -> FitResult:
    """Train for ``config.epochs`` epochs with plateau learning-rate decay.

    After each epoch, if the epoch-mean total loss improved by less than
    ``plateau_tol`` (relative) over the last ``plateau_window`` epochs since
    the previous decay, the learning rate is divided by ``decay_factor``; at
    most ``max_decays`` times.  With ``out_dir`` set, ``train_log.csv`` and
    checkpoints (``ckpt_decayN.bin`` at each decay, ``ckpt_final.bin``) are
    written there.  ``step`` replaces :func:`train_step` (same signature).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    step = train_step if step is None else step
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    occluder = config.occluder if config.uses_occlusion else None
    state = TrainState(config.lr)
    rows, ckpts, lrs, history = [], [], [], []
    decays, since_decay = 0, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        sums = {n: 0.0 for n in LOSS_TERMS + ("total",)}
        nb = 0
        lr_epoch = state.lr
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            batch = make_pair_batch(chunk, occluder, rng, template)
            vals = step(model, batch, config, state)
            for n in sums:
                sums[n] += vals[n]
            nb += 1
        means = {n: sums[n] / nb for n in sums}
        rows.append({"epoch": epoch, "lr": lr_epoch, **{"L_" + n: means[n] for n in LOSS_TERMS},
                     "total": means["total"]})
        lrs.append(lr_epoch)
        history.append(means["total"])
        since_decay += 1
        if progress is not None:
            progress(rows[-1])
        if decays < config.max_decays and since_decay >= config.plateau_window:
            ref = history[-1 - config.plateau_window] if len(history) > config.plateau_window else None
            if ref is not None and ref - history[-1] < config.plateau_tol * abs(ref):
                state.lr /= config.decay_factor
                decays += 1
                since_decay = 0
                if out is not None:
                    path = out / f"ckpt_decay{decays}.bin"
                    save_checkpoint(path, model, {"epoch": epoch, "lr": state.lr})
                    ckpts.append(path)
    if out is not None:
        path = out / "ckpt_final.bin"
        save_checkpoint(path, model, {"epoch": config.epochs, "lr": state.lr})
        ckpts.append(path)
        with open(out / "train_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for r in rows:
                writer.writerow([r["epoch"], _fmt(r["lr"])] + [_fmt(r[c]) for c in LOG_COLUMNS[2:]])
    return FitResult(rows, ckpts, lrs)
