import numpy as np
import pytest

from cdrmt.config import DataConfig, LossConfig, ModelConfig, RunConfig, TrainConfig
from cdrmt.errors import ConfigError, NumericError
from cdrmt.harness import train as train_mod
from cdrmt.harness.scenes import SceneConfig
from cdrmt.harness.train import LOG_COLUMNS, load_model, train_loop


def tiny(**loss):
    return RunConfig(
        seed=5,
        model=ModelConfig(d=8, text_dim=8, channels=12, grid_h=4, grid_w=4, num_queries=4,
                          decoder_layers=2, bif_layers=1, ffn_ratio=2),
        loss=LossConfig(**loss),
        train=TrainConfig(epochs=1),
        data=DataConfig(num_scenes=1, scene=SceneConfig(frames=3, max_objects=3), expressions=["cars", "people"]),
    )


def test_row_count_and_columns(tmp_path):
    log = tmp_path / "loss.csv"
    res = train_loop(tiny(), log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS)
    assert len(lines) - 1 == len(res.rows) == 1 * 2 * 3  # scenes x expressions x frames
    assert res.scc_built == 6


def test_zero_struct_weight_skips_reconstruction():
    res = train_loop(tiny(struct=0.0))
    assert res.scc_built == 0
    assert all(r["struct"] == 0.0 for r in res.rows)


def test_identical_seeds_identical_logs(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    train_loop(tiny(), log_path=a)
    train_loop(tiny(), log_path=b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_written_and_reloaded(tmp_path):
    cfg = tiny()
    res = train_loop(cfg, ckpt_path=tmp_path / "m.ckpt")
    model, loaded = load_model(tmp_path / "m.ckpt")
    assert loaded.to_dict() == cfg.to_dict()
    for (n1, p1), (n2, p2) in zip(res.model.named_parameters(), model.named_parameters()):
        assert n1 == n2
        assert np.abs(p1.data - p2.data).max() <= 1e-6 * max(1.0, np.abs(p1.data).max())


def test_non_finite_loss_names_term(monkeypatch):
    def broken(*args, **kwargs):
        raise NumericError("log of 0")

    monkeypatch.setattr(train_mod, "focal_loss", broken)
    with pytest.raises(NumericError, match="det_cls"):
        train_loop(tiny())


def test_invalid_config_rejected():
    cfg = tiny()
    cfg.model.decoder_layers = 3
    with pytest.raises(ConfigError):
        train_loop(cfg)
