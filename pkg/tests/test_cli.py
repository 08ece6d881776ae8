import csv

import numpy as np
import pytest

from facediv.cli import build_parser, main
from facediv.io import read_pgm, read_ppm
from facediv.network import load_checkpoint
from facediv.synthdata import load_dataset


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.cfg").write_text("num_ids = 3\nsamples_per_id = 4\nzoom = 1.3\n")
    assert main(["gen-data", "--config", str(root / "gen.cfg"), "--seed", "0",
                 "--out", str(root / "data")]) == 0
    (root / "train.cfg").write_text(
        f"data = {root / 'data'}\nepochs = 1\nbatch_size = 4\nlr = 0.05\nsigma = 0.5\n"
        "w_sad_f = 0.01\nw_sad_r = 0.01\nw_fad = 0.01\nw_occ = 0.3\nfad_t = 20\n")
    main(["train", "--quiet", "--config", str(root / "train.cfg"), "--seed", "3",
          "--out", str(root / "run")])
    (root / "an.cfg").write_text(f"checkpoint = {root / 'run' / 'ckpt_final.bin'}\n"
                                 f"data = {root / 'data'}\n")
    return root


def test_every_command_takes_common_flags():
    parser = build_parser()
    for cmd in ("gen-data", "train", "peaks", "spread", "diff", "retrieve", "heatmaps", "occlude"):
        args = parser.parse_args([cmd, "--config", "c.txt", "--seed", "5", "--out", "o"])
        assert args.seed == 5 and str(args.out) == "o"


def test_out_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["peaks"])


def test_gen_data(trained):
    samples = load_dataset(trained / "data")
    assert len(samples) == 12
    assert samples[0].image.shape == (1, 32, 32)


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "train_log.csv").exists()
    model = load_checkpoint(run / "ckpt_final.bin")
    assert model.config.num_classes == 3
    text = (run / "train_config.txt").read_text()
    assert "seed = 3" in text and "net.num_classes = 3" in text


def test_peaks_and_spread(trained):
    cfg = trained / "an.cfg"
    main(["peaks", "--config", str(cfg), "--out", str(trained / "peaks")])
    assert len(rows(trained / "peaks" / "peaks.csv")) == 32
    summary = {r["quantity"]: r for r in rows(trained / "peaks" / "peak_summary.csv")}
    (trained / "sp.cfg").write_text(f"peaks = {trained / 'peaks' / 'peaks.csv'}\n")
    main(["spread", "--config", str(trained / "sp.cfg"), "--out", str(trained / "spread")])
    got = rows(trained / "spread" / "spread.csv")[0]
    assert float(got["mean"]) == pytest.approx(float(summary["spreadness"]["mean"]), rel=1e-12)


def test_diff(trained):
    main(["diff", "--config", str(trained / "an.cfg"), "--seed", "1", "--out", str(trained / "diff")])
    values = [float(r["mean_diff"]) for r in rows(trained / "diff" / "diff.csv")]
    assert len(values) == 32 and min(values) >= 0
    summary = rows(trained / "diff" / "diff_summary.csv")[0]
    assert float(summary["mean_diff"]) == pytest.approx(np.mean(values))
    assert (float(summary["rect_w"]), float(summary["rect_h"])) == (32.0, 12.0)


def test_retrieve(trained):
    main(["retrieve", "--config", str(trained / "an.cfg"), "--out", str(trained / "ret")])
    got = rows(trained / "ret" / "retrieve.csv")
    assert [r["region"] for r in got] == ["eyes", "nose", "mouth"]
    assert all(float(r["chance"]) == pytest.approx(1 / 3) for r in got)


def test_heatmaps(trained):
    (trained / "hm.cfg").write_text((trained / "an.cfg").read_text() + "max_samples = 2\nfilters = 1,4\n")
    main(["heatmaps", "--config", str(trained / "hm.cfg"), "--out", str(trained / "hm")])
    files = sorted(p.name for p in (trained / "hm").iterdir())
    assert files == ["s0000_f001.ppm", "s0000_f004.ppm", "s0001_f001.ppm", "s0001_f004.ppm"]
    assert read_ppm(trained / "hm" / files[0]).shape == (3, 32, 32)


def test_occlude(trained):
    (trained / "occ.cfg").write_text(f"data = {trained / 'data'}\nsplit = test\n")
    main(["occlude", "--config", str(trained / "occ.cfg"), "--seed", "2", "--out", str(trained / "occ")])
    occluded = load_dataset(trained / "occ")
    clean = load_dataset(trained / "data", "test")
    assert len(occluded) == len(clean)
    changed = [np.any(o.image != c.image) for o, c in zip(occluded, clean)]
    assert all(changed)
    placements = rows(trained / "occ" / "occluders.csv")
    assert len(placements) == len(clean)
    assert read_pgm(trained / "occ" / placements[0]["image_path"]).shape == (1, 32, 32)


def test_unknown_key_rejected(trained, tmp_path):
    (tmp_path / "bad.cfg").write_text("checkpoint = x\ndata = y\nbogus = 1\n")
    with pytest.raises(SystemExit, match="unknown config keys"):
        main(["peaks", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)])


def test_missing_key_rejected(tmp_path):
    with pytest.raises(SystemExit, match="must set"):
        main(["diff", "--out", str(tmp_path)])


def test_module_entry_point():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "facediv", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
