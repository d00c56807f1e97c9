import json
from pathlib import Path

import numpy as np
import pytest

from vfxdiff.cli import main
from vfxdiff.storage import load_checkpoint, save_dataset
from vfxdiff.synthvfx import make_dataset

GOLDEN_EVAL = Path(__file__).parent / "data" / "golden_eval.csv"

TINY_CFG = """
model.frames = 2
model.height = 8
model.width = 8
model.patch = 4
model.dim = 16
model.heads = 2
model.blocks = 2
model.ffn_dim = 32
model.moe.n_experts = 2
model.moe.rank = 2
model.moe.alpha = 2.0
train.stage1_steps = 2
train.stage2_steps = 3
train.batch_size = 2
sampler.steps = 3
synth.frames = 2
synth.height = 8
synth.width = 8
synth.blob_radius = 2,2
"""


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


def test_mask_dump_prints_hand_enumerated_grid(capsys):
    assert main(["mask-dump", "--n-conditions", "1", "--text-len", "1", "--spatial-len", "1", "--latent-len", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-3:] == ["##.", "##.", "#.#"]


def test_mask_dump_unconditional(capsys):
    assert main(["mask-dump", "--n-conditions", "0", "--latent-len", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-2:] == ["##", "##"]


def test_gradcheck_exits_zero_and_reports_error(capsys):
    assert main(["--seed", "5", "gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "max relative gradient error" in out


def test_unknown_command_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_malformed_config_line_diagnostic(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.dim = 16\nmodel.dim == oops\n")
    code = main(["--config", str(cfg), "mask-dump"])
    assert code == 2
    err = capsys.readouterr().err
    assert "line 2" in err


def test_gen_data_writes_manifest_and_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert main([
            "--seed", "9", "gen-data", "--count", "4", "--kinds", "fade,blink",
            "--out", str(tmp_path / name),
        ]) == 0
    manifest_a = (tmp_path / "a" / "manifest.json").read_bytes()
    manifest_b = (tmp_path / "b" / "manifest.json").read_bytes()
    assert manifest_a == manifest_b
    data = json.loads(manifest_a)
    assert len(data["records"]) == 4
    for rec_dir in (tmp_path / "a" / "records").iterdir():
        twin = tmp_path / "b" / "records" / rec_dir.name
        for f in rec_dir.iterdir():
            assert f.read_bytes() == (twin / f.name).read_bytes()


def test_train_generate_eval_pipeline(tmp_path, tiny_cfg_file, capsys):
    data = str(tmp_path / "data")
    ckpt = str(tmp_path / "model.ckpt")
    gen = str(tmp_path / "gen")
    assert main(["--seed", "3", "--config", tiny_cfg_file, "gen-data", "--count", "4",
                 "--kinds", "fade,blink", "--out", data]) == 0
    assert main(["--seed", "3", "--config", tiny_cfg_file, "train", "--data", data, "--out", ckpt]) == 0
    snapshot, arrays = load_checkpoint(ckpt)
    assert snapshot["model"]["dim"] == 16
    assert any(name.startswith("block0.ffn1.expert0") for name in arrays)
    loss_csv = (tmp_path / "model.loss.csv").read_text().splitlines()
    assert loss_csv[0] == "step,stage,mse,aux_term"
    assert len(loss_csv) == 1 + 5

    assert main(["--seed", "3", "--config", tiny_cfg_file, "generate", "--checkpoint", ckpt,
                 "--cond", "fade:2,2,6,6", "--out", gen]) == 0
    frames = sorted(Path(gen).iterdir())
    assert [f.name for f in frames] == ["frame_000.pgm", "frame_001.pgm"]

    out_csv = str(tmp_path / "metrics.csv")
    assert main(["eval", "--data", data, "--out", out_csv]) == 0
    header = Path(out_csv).read_text().splitlines()[0]
    assert header == "id,rdd,inner_diff,outer_diff,controllable,eor,dynamic_degree"


def test_generate_same_seed_bit_identical(tmp_path, tiny_cfg_file):
    data = str(tmp_path / "data")
    ckpt = str(tmp_path / "model.ckpt")
    assert main(["--seed", "4", "--config", tiny_cfg_file, "gen-data", "--count", "4",
                 "--kinds", "fade,blink", "--out", data]) == 0
    assert main(["--seed", "4", "--config", tiny_cfg_file, "train", "--data", data, "--out", ckpt]) == 0
    for name in ("g1", "g2"):
        assert main(["--seed", "11", "--config", tiny_cfg_file, "generate", "--checkpoint", ckpt,
                     "--cond", "blink:1,1,6,6", "--out", str(tmp_path / name)]) == 0
    for f in (tmp_path / "g1").iterdir():
        assert f.read_bytes() == (tmp_path / "g2" / f.name).read_bytes()


def test_eval_golden_file_match(tmp_path):
    records = make_dataset(4, np.random.default_rng(42))
    save_dataset(tmp_path / "canned", records)
    out_csv = tmp_path / "metrics.csv"
    assert main(["eval", "--data", str(tmp_path / "canned"), "--out", str(out_csv)]) == 0
    assert out_csv.read_bytes() == GOLDEN_EVAL.read_bytes()


def test_bad_condition_spec_rejected(tmp_path, tiny_cfg_file):
    data = str(tmp_path / "data")
    ckpt = str(tmp_path / "model.ckpt")
    main(["--seed", "5", "--config", tiny_cfg_file, "gen-data", "--count", "2", "--kinds", "fade", "--out", data])
    main(["--seed", "5", "--config", tiny_cfg_file, "train", "--data", data, "--out", ckpt])
    with pytest.raises(SystemExit):
        main(["--config", tiny_cfg_file, "generate", "--checkpoint", ckpt, "--cond", "fade:9,9", "--out", str(tmp_path / "x")])
