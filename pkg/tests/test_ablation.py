import logging

import numpy as np

from zippo.ablation import (ABLATION_COLUMNS, AblationResult, AblationRow, ordering_summary, read_ablation_csv,
                            run_ablation, write_ablation_csv)
from zippo.codec import Codec, CodecConfig
from zippo.synth import SynthConfig, generate
from zippo.trainer import TaskMode, TrainConfig
from zippo.unet import UNetConfig

TINY = UNetConfig(base_width=8, levels=2, emb_dim=16)


def _data(seed, count):
    im, m, p, _ = generate(SynthConfig(count=count, resolution=8, sigma=0.5, seed=seed))
    return im, m, p


def test_run_writes_one_row_per_mode(tmp_path, caplog):
    codec = Codec(CodecConfig.identity())
    train_data = _data(0, 8)
    test_im, test_m, _ = _data(1, 3)
    cfg = TrainConfig(steps=3, batch_size=4, log_every=0)
    with caplog.at_level(logging.INFO, logger="zippo.ablation"):
        res = run_ablation(train_data, test_im, test_m, codec, cfg, unet_config=TINY, sample_steps=2,
                           out_dir=tmp_path / "a")
    assert [r.mode for r in res.rows] == [TaskMode.SINGLE, TaskMode.DUAL, TaskMode.FULL]
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert lines[0] == ",".join(ABLATION_COLUMNS)
    assert lines[-1].startswith("# full_mode_best," + str(res.full_is_best).lower())
    table = read_ablation_csv(tmp_path / "a" / "ablation.csv")
    assert list(table) == ["single", "dual", "full"]
    for r in res.rows:
        assert table[r.mode.value]["sad"] == r.metrics["sad"]
    if not res.full_is_best:
        assert "not the best" in caplog.text

    again = run_ablation(train_data, test_im, test_m, codec, cfg, unet_config=TINY, sample_steps=2,
                         out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    assert again.full_is_best == res.full_is_best


def _row(mode, sad):
    return AblationRow(TaskMode(mode), {"sad": sad, "mse": 0.0, "mad": 0.0, "sad_fg": 0.0, "sad_bg": 0.0, "conn": 0.0},
                       0.0)


def test_ordering_summary_and_flag(tmp_path):
    good = AblationResult([_row("single", 0.3), _row("dual", 0.2), _row("full", 0.1)], True)
    assert ordering_summary(good) == "full(0.1000) < dual(0.2000) < single(0.3000)"
    bad = AblationResult([_row("single", 0.1), _row("full", 0.2)], False)
    assert ordering_summary(bad).endswith("[full mode not best at this budget]")
    write_ablation_csv(tmp_path / "x.csv", bad)
    assert (tmp_path / "x.csv").read_text().splitlines()[-1] == "# full_mode_best,false,,,,,"
    assert np.isclose(read_ablation_csv(tmp_path / "x.csv")["full"]["sad"], 0.2)
