"""Command-line entry point: ``facediv <command> --config FILE --seed N --out DIR``.

Every command reads an optional flat ``key = value`` config file; the keys
each command understands are listed in its ``--help``.  Numeric results are
written as CSV and images as PGM/PPM under ``--out``; inputs are never
modified.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import analysis
from .geometry import OccluderSpec, default_template, save_landmarks
from .io import write_pgm
from .network import build, load_checkpoint
from .synthdata import MANIFEST_COLUMNS, gen_dataset, load_dataset
from .training import (config_from_kv, fit, make_pair_batch, read_kv,
                       write_config)

_ANALYSIS_KEYS = {
    "peaks": {"checkpoint": None, "data": None, "split": "test", "max_samples": "0"},
    "spread": {"peaks": "", "checkpoint": "", "data": "", "split": "test", "max_samples": "0"},
    "diff": {"checkpoint": None, "data": None, "split": "test", "max_samples": "0",
             "rect": "", "fill": "black", "size_mode": "static"},
    "retrieve": {"checkpoint": None, "data": None, "peak_data": "", "peak_split": "test",
                 "regions": "eyes,nose,mouth"},
    "heatmaps": {"checkpoint": None, "data": None, "split": "test", "max_samples": "4",
                 "filters": "0,1,2,3"},
    "occlude": {"data": None, "split": "", "rect": "", "fill": "black", "size_mode": "static",
                "batch_size": "64"},
    "gen-data": {"num_ids": "20", "samples_per_id": "50", "size": "32", "train_fraction": "0.8",
                 "zoom": "1.0"},
}


def _settings(command: str, path) -> dict:
    """Merge a config file over the command's defaults; unknown keys are errors."""
    defaults = _ANALYSIS_KEYS[command]
    given = read_kv(path) if path else {}
    unknown = set(given) - set(defaults)
    if unknown:
        raise SystemExit(f"{command}: unknown config keys {sorted(unknown)}")
    merged = {**defaults, **given}
    missing = [k for k, v in merged.items() if v is None]
    if missing:
        raise SystemExit(f"{command}: config must set {missing}")
    return merged


def _samples(cfg: dict, split_key: str = "split", data_key: str = "data"):
    split = cfg.get(split_key) or None
    samples = load_dataset(cfg[data_key], split)
    limit = int(cfg.get("max_samples", "0") or 0)
    return samples[:limit] if limit > 0 else samples


def _occluder(cfg: dict, seed: int) -> OccluderSpec:
    rect = tuple(float(v) for v in cfg["rect"].split(",")) if cfg.get("rect") else None
    return OccluderSpec(cfg["fill"], cfg["size_mode"], seed, rect)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    cfg = _settings("gen-data", args.config)
    gen_dataset(args.out, int(cfg["num_ids"]), int(cfg["samples_per_id"]), args.seed,
                int(cfg["size"]), float(cfg["train_fraction"]), float(cfg["zoom"]))


def cmd_train(args) -> None:
    kv = read_kv(args.config) if args.config else {}
    data = kv.pop("data", None)
    if data is None:
        raise SystemExit("train: config must set data = <dataset dir>")
    train = load_dataset(data, "train")
    num_classes = max(s.identity for s in train) + 1
    config = config_from_kv(kv, seed=args.seed)
    net = config.net_config(num_classes=config.net.get("num_classes", num_classes))
    config.net.setdefault("num_classes", net.num_classes)
    model = build(net, np.random.default_rng(config.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "train_config.txt", config)
    progress = None if args.quiet else (lambda r: print(
        f"epoch {r['epoch']:3d}  lr {r['lr']:.2e}  total {r['total']:.4f}", file=sys.stderr))
    fit(model, train, config, out, progress=progress)


def cmd_peaks(args) -> None:
    cfg = _settings("peaks", args.config)
    model = load_checkpoint(cfg["checkpoint"])
    stats = analysis.peak_stats(model, _samples(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_peak_csv(out / "peaks.csv", stats)
    _write_summary(out / "peak_summary.csv", stats)


def _write_summary(path: Path, stats) -> None:
    sp = analysis.spreadness(stats)
    std_pos, std_neg = stats.mean_std()
    _write_rows(path, ["quantity", "positive", "negative", "mean"], [
        ["spreadness", repr(sp.positive), repr(sp.negative), repr(sp.mean)],
        ["peak_std", repr(std_pos), repr(std_neg), repr(0.5 * (std_pos + std_neg))],
        ["skipped", int(stats.skipped[0].sum()), int(stats.skipped[1].sum()),
         int(stats.skipped.sum())],
    ])


def _read_peak_means(path) -> tuple:
    pos, neg = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p = (float(row["pos_x"]), float(row["pos_y"]))
            n = (float(row["neg_x"]), float(row["neg_y"]))
            if np.all(np.isfinite(p)):
                pos.append(p)
            if np.all(np.isfinite(n)):
                neg.append(n)
    return np.array(pos), np.array(neg)


def cmd_spread(args) -> None:
    cfg = _settings("spread", args.config)
    if cfg["peaks"]:
        pos, neg = _read_peak_means(cfg["peaks"])
        sp = analysis.Spread(analysis.spread_of(pos) if len(pos) else float("nan"),
                             analysis.spread_of(neg) if len(neg) else float("nan"))
    elif cfg["checkpoint"] and cfg["data"]:
        model = load_checkpoint(cfg["checkpoint"])
        sp = analysis.spreadness(analysis.peak_stats(model, _samples(cfg)))
    else:
        raise SystemExit("spread: set either peaks = <peaks.csv> or checkpoint and data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "spread.csv", ["positive", "negative", "mean"],
                [[repr(sp.positive), repr(sp.negative), repr(sp.mean)]])


def cmd_diff(args) -> None:
    cfg = _settings("diff", args.config)
    model = load_checkpoint(cfg["checkpoint"])
    occ = _occluder(cfg, args.seed)
    profile = analysis.feature_diff(model, _samples(cfg), occ, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_diff_csv(out / "diff.csv", profile)
    _write_rows(out / "diff_summary.csv", ["rect_x", "rect_y", "rect_w", "rect_h", "mean_diff"],
                [[*(repr(float(v)) for v in profile.rect), repr(float(profile.values.mean()))]])


def _pairs(samples):
    by_id: "OrderedDict[int, list]" = OrderedDict()
    for s in samples:
        by_id.setdefault(s.identity, []).append(s)
    ids = [i for i, v in by_id.items() if len(v) >= 2]
    if len(ids) < 2:
        raise SystemExit("retrieve: need at least two identities with two images each")
    return [by_id[i][0] for i in ids], [by_id[i][1] for i in ids]


def cmd_retrieve(args) -> None:
    cfg = _settings("retrieve", args.config)
    model = load_checkpoint(cfg["checkpoint"])
    peak_samples = load_dataset(cfg["peak_data"] or cfg["data"], cfg["peak_split"] or None)
    stats = analysis.peak_stats(model, peak_samples)
    first, second = _pairs(load_dataset(cfg["data"]))
    fa, fb = analysis.features(model, first), analysis.features(model, second)
    rows = []
    for region in [r.strip() for r in cfg["regions"].split(",") if r.strip()]:
        part = analysis.part_filters(stats, region)
        acc = analysis.pair_rank1(fa, fb, part) if len(part) else float("nan")
        rows.append([region, len(part), " ".join(str(int(p)) for p in part), repr(acc),
                     repr(1.0 / len(fa))])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "retrieve.csv", ["region", "num_filters", "filters", "rank1", "chance"], rows)


def cmd_heatmaps(args) -> None:
    cfg = _settings("heatmaps", args.config)
    model = load_checkpoint(cfg["checkpoint"])
    filters = [int(f) for f in cfg["filters"].split(",") if f.strip()]
    analysis.export_heatmaps(model, _samples(cfg), filters, args.out)


def cmd_occlude(args) -> None:
    cfg = _settings("occlude", args.config)
    src = Path(cfg["data"])
    samples = load_dataset(src, cfg["split"] or None)
    with open(src / "manifest.csv" if src.is_dir() else src, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if not cfg["split"] or r["split"] == cfg["split"]]
    occ = _occluder(cfg, args.seed)
    rng = np.random.default_rng(args.seed)
    template = default_template()
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    bs = int(cfg["batch_size"])
    manifest, placements = [], []
    for start in range(0, len(samples), bs):
        chunk = samples[start:start + bs]
        batch = make_pair_batch(chunk, occ, rng, template)
        for j, s in enumerate(chunk):
            row = rows[start + j]
            write_pgm(out / row["image_path"], batch.occluded[j])
            save_landmarks(out / row["landmark_path"], s.landmarks)
            manifest.append([row[c] for c in MANIFEST_COLUMNS])
            placements.append([row["image_path"], *(repr(float(v)) for v in batch.rect),
                               *(repr(float(v)) for v in batch.quads[j].ravel())])
    _write_rows(out / "manifest.csv", MANIFEST_COLUMNS, manifest)
    _write_rows(out / "occluders.csv",
                ["image_path", "rect_x", "rect_y", "rect_w", "rect_h",
                 "x0", "y0", "x1", "y1", "x2", "y2", "x3", "y3"], placements)


_COMMANDS = OrderedDict([
    ("gen-data", (cmd_gen_data, "generate a synthetic face dataset")),
    ("train", (cmd_train, "train a model (config: data = DIR plus training keys)")),
    ("peaks", (cmd_peaks, "per-filter peak locations in the canonical frame")),
    ("spread", (cmd_spread, "spreadness of average peak locations")),
    ("diff", (cmd_diff, "per-element feature change under a shared occluder")),
    ("retrieve", (cmd_retrieve, "part-based rank-1 retrieval on image pairs")),
    ("heatmaps", (cmd_heatmaps, "export response heat-map overlays (PPM)")),
    ("occlude", (cmd_occlude, "write occluded copies of a dataset")),
])


def _epilog(name: str) -> str:
    if name == "train":
        return "config keys: data, and any training key (lr, epochs, w_id, ..., net.K, ...)"
    keys = ", ".join(f"{k}={v}" if v else k for k, v in _ANALYSIS_KEYS[name].items())
    return f"config keys: {keys}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facediv", description="Train and inspect part-based face feature models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text, epilog=_epilog(name))
        p.add_argument("--config", type=Path, default=None, help="key = value settings file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "train":
            p.add_argument("--quiet", action="store_true", help="no per-epoch progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _COMMANDS[args.command][0](args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
