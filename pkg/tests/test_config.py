import dataclasses

import pytest

from dimmpim.cli import bundled_config_path
from dimmpim.config import (
    MODELS, ConfigError, DdrTiming, GiB, HwTopology, LlmModel, TiB, channel_bw, config_from_dict, config_to_dict,
    default_config, dump_config, host_channel_bw, kv_bytes_per_token, load_config, pim_aggregate_bw, with_ranksets,
)


def test_bundled_config_matches_defaults():
    cfg = load_config(bundled_config_path())
    assert cfg == default_config("GPT-175B")


def test_roundtrip(tmp_path):
    cfg = default_config("OPT-66B", topology={"gpu_tflops_fp16": 300.0})
    p = tmp_path / "c.toml"
    dump_config(cfg, p)
    assert load_config(p) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_model_presets():
    m = MODELS["GPT-175B"]
    assert (m.layers, m.heads, m.embedding, m.head_dim) == (96, 96, 12288, 128)
    assert MODELS["GPT-89B"].layers == 48
    assert MODELS["OPT-66B"].head_dim == 128
    # 175B-class parameter count from the 12 D^2 per layer estimate
    assert abs(m.params / 174e9 - 1) < 0.01


@pytest.mark.parametrize("bad", [
    {"version": 2, "model": {"preset": "GPT-175B"}},
    {"model": {"preset": "GPT-175B"}},
    {"version": 1, "model": {"preset": "nope"}},
    {"version": 1, "model": {"preset": "GPT-175B"}, "topology": {"channel": 16}},
    {"version": 1, "model": {"preset": "GPT-175B"}, "extra": {}},
    {"version": 1},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_parse_error_names_file(tmp_path):
    p = tmp_path / "broken.toml"
    p.write_text("version = \n")
    with pytest.raises(ConfigError, match="broken.toml"):
        load_config(p)


def test_invariants():
    with pytest.raises(ConfigError, match="D_h"):
        LlmModel(2, 3, 128)
    with pytest.raises(ConfigError, match="precision"):
        LlmModel(2, 2, 128, precision_bytes=3)
    with pytest.raises(ConfigError, match="bus_bits"):
        HwTopology(chips_per_rank=4)
    with pytest.raises(ConfigError, match="RC"):
        DdrTiming(RC=60)
    with pytest.raises(ConfigError):
        HwTopology(pcie_bw=0)


def test_bandwidths_from_first_principles():
    t, d = HwTopology(), DdrTiming()
    # 8 bytes per beat, two beats per 0.625 ns clock
    assert channel_bw(t, d) == pytest.approx(8 * 2 / 0.625e-9)
    assert host_channel_bw(t, d) == pytest.approx(16 * 25.6e9)
    # 16 ch x 4 ranks x 8 chips x 16 banks, 8 bytes per 5 ns
    assert pim_aggregate_bw(t, d) == pytest.approx(8192 * 8 / 5e-9)


def test_host_capacity_consistent_with_geometry():
    t = HwTopology()
    ranks = t.channels * t.ranks_per_channel
    per_rank = t.chips_per_rank * t.banks_per_chip * t.rows_per_bank * t.row_bytes
    assert ranks * per_rank == t.host_capacity == 2 * TiB


def test_kv_bytes():
    m = MODELS["GPT-175B"]
    assert kv_bytes_per_token(m) == 2 * 96 * 12288 * 2


def test_with_ranksets():
    cfg = default_config("GPT-89B")
    assert with_ranksets(cfg, 16).topology.ranksets == 16
    assert with_ranksets(cfg, 3).topology.ranksets == 3
    assert with_ranksets(cfg, 2, 64 * GiB).topology.host_capacity == 64 * GiB
    with pytest.raises(ConfigError):
        with_ranksets(cfg, 0)


def test_frozen():
    cfg = default_config()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.model.layers = 3
