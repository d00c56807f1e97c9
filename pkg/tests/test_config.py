import pytest

from vfxdiff.config import ConfigError, PRESET_NAMES, apply_config_text, config_snapshot, preset


def test_toy_preset_defaults():
    cfg = preset("toy")
    assert cfg.model.dim == 64
    assert cfg.model.moe.n_experts == 4 and cfg.model.moe.top_k == 1
    assert cfg.train.stage1_steps * 3 == cfg.train.stage2_steps * 2  # 2:3 stage ratio
    assert cfg.sampler.steps == 50 and cfg.sampler.cfg_scale == 6.0


def test_published_preset_values():
    cfg = preset("paper-51-2")
    assert cfg.model.moe.rank == 128
    assert cfg.model.moe.n_experts == 8 and cfg.model.moe.top_k == 2
    assert cfg.train.beta == 0.01 and cfg.train.lr == 1e-4
    assert cfg.train.stage1_steps == 2000 and cfg.train.stage2_steps == 3000
    assert cfg.sampler.steps == 50 and cfg.sampler.cfg_scale == 6.0


def test_four_expert_preset():
    cfg = preset("four-experts-top1")
    assert cfg.model.moe.n_experts == 4 and cfg.model.moe.top_k == 1 and cfg.model.moe.rank == 128


def test_stage_steps_preset():
    cfg = preset("paper-appendix-c3")
    assert (cfg.train.stage1_steps, cfg.train.stage2_steps) == (2000, 3000)


def test_unknown_preset_rejected():
    with pytest.raises(ValueError, match="unknown preset"):
        preset("nope")
    assert "toy" in PRESET_NAMES and "paper-51-2" in PRESET_NAMES


def test_config_overlay_with_comments():
    cfg = preset("toy")
    apply_config_text(
        cfg,
        """
        # comment line
        model.dim = 32   # trailing comment
        train.lr = 5e-4
        sampler.cfg_scale = 3.5
        synth.blob_radius = 2,3
        """,
    )
    assert cfg.model.dim == 32
    assert cfg.train.lr == 5e-4
    assert cfg.sampler.cfg_scale == 3.5
    assert cfg.synth.blob_radius == (2, 3)


def test_config_errors_carry_line_numbers():
    cfg = preset("toy")
    with pytest.raises(ConfigError, match="line 2"):
        apply_config_text(cfg, "model.dim = 32\nwhat is this line\n")
    with pytest.raises(ConfigError, match="line 1.*unknown config key"):
        apply_config_text(cfg, "model.banana = 1\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        apply_config_text(cfg, "model.dim = soup\n")
    with pytest.raises(ConfigError, match="names a section"):
        apply_config_text(cfg, "model.moe = 3\n")


def test_snapshot_is_plain_data():
    snap = config_snapshot(preset("toy"))
    assert snap["model"]["moe"]["n_experts"] == 4
    assert snap["train"]["beta"] == 0.01
