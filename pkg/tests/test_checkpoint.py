import numpy as np
import pytest

from srwm.checkpoint import (
    CheckpointError,
    ConfigMismatchError,
    CorruptCheckpointError,
    checkpoint_load,
    checkpoint_save,
    config_hash,
    model_config_from_header,
)
from srwm.episodes import EpisodeSpec, SyntheticTaskConfig, gen_synthetic_classes, sample_episode
from srwm.model import BlockConfig, Model, ModelConfig
from srwm.numerics import Rng
from srwm.training import Trainer, TrainConfig


def _setup(kind="srwm", protocol="delayed", span=7, seed=0):
    cfg = ModelConfig(4, 3, (BlockConfig(kind, 8, 2, 16),) * 2)
    model = Model(cfg)
    pool = gen_synthetic_classes(SyntheticTaskConfig(10, 4, 0.1, 1.0), Rng(1))
    spec = EpisodeSpec(3, 1, protocol, 4)
    tc = TrainConfig(learning_rate=1e-3, batch_size=3, bptt_span=span, total_steps=100, seed=seed)
    return Trainer(model, model.init_params(Rng(seed, 0)), tc, lambda r, i: sample_episode(spec, pool, r))


def _save(trainer, path):
    checkpoint_save(path, trainer.model.cfg, trainer.params, trainer.opt, trainer.data_rng.get_state(),
                    trainer.step, trainer.cursors, {"note": "x"})


def _restore(path, protocol="delayed"):
    fresh = _setup(protocol=protocol)
    ck = checkpoint_load(path, expected_hash=config_hash(fresh.model.cfg))
    fresh.params, fresh.opt, fresh.step = ck.params, ck.opt, ck.step
    fresh.data_rng = Rng.from_state(ck.rng_state)
    fresh.cursors = ck.cursors
    return fresh


def test_round_trip(tmp_path):
    tr = _setup()
    for _ in range(3):
        tr.train_step()
    _save(tr, tmp_path / "a.ckpt")
    ck = checkpoint_load(tmp_path / "a.ckpt")
    assert ck.step == 3
    assert ck.header["note"] == "x"
    assert list(ck.params) == list(tr.params)
    for k in tr.params:
        np.testing.assert_array_equal(ck.params[k], tr.params[k])
        np.testing.assert_array_equal(ck.opt.m[k], tr.opt.m[k])
        np.testing.assert_array_equal(ck.opt.v[k], tr.opt.v[k])
    assert ck.opt.step == tr.opt.step
    assert model_config_from_header(ck.header) == tr.model.cfg


def test_save_without_cursors(tmp_path):
    tr = _setup()
    checkpoint_save(tmp_path / "b.ckpt", tr.model.cfg, tr.params, tr.opt, {}, 0)
    assert checkpoint_load(tmp_path / "b.ckpt").cursors is None


@pytest.mark.parametrize("protocol", ["delayed", "synchronous"])
def test_resume_is_bit_exact(tmp_path, protocol):
    ref = _setup(protocol=protocol)
    for _ in range(4):
        ref.train_step()
    _save(ref, tmp_path / "mid.ckpt")
    resumed = _restore(tmp_path / "mid.ckpt", protocol)
    for _ in range(12):
        a, b = ref.train_step(), resumed.train_step()
        assert a.loss == b.loss
    for k in ref.params:
        np.testing.assert_array_equal(ref.params[k], resumed.params[k])
    _save(ref, tmp_path / "r1.ckpt")
    _save(resumed, tmp_path / "r2.ckpt")
    assert (tmp_path / "r1.ckpt").read_bytes() == (tmp_path / "r2.ckpt").read_bytes()


def test_truncated_file_is_corrupt(tmp_path):
    tr = _setup()
    tr.train_step()
    _save(tr, tmp_path / "c.ckpt")
    data = (tmp_path / "c.ckpt").read_bytes()
    for cut in (10, len(data) // 2, len(data) - 1):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CorruptCheckpointError):
            checkpoint_load(tmp_path / "t.ckpt")


def test_trailing_bytes_are_corrupt(tmp_path):
    tr = _setup()
    _save(tr, tmp_path / "c.ckpt")
    (tmp_path / "t.ckpt").write_bytes((tmp_path / "c.ckpt").read_bytes() + b"\0")
    with pytest.raises(CorruptCheckpointError):
        checkpoint_load(tmp_path / "t.ckpt")


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 64)
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "x.ckpt")


def test_config_hash_mismatch(tmp_path):
    tr = _setup()
    _save(tr, tmp_path / "c.ckpt")
    other = ModelConfig(4, 3, (BlockConfig("delta_net", 8, 2, 16),) * 2)
    assert config_hash(other) != config_hash(tr.model.cfg)
    with pytest.raises(ConfigMismatchError):
        checkpoint_load(tmp_path / "c.ckpt", expected_hash=config_hash(other))


def test_config_hash_is_stable():
    a = ModelConfig(4, 3, (BlockConfig("srwm", 8, 2, 16),))
    b = ModelConfig(4, 3, (BlockConfig("srwm", 8, 2, 16),))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(ModelConfig(4, 3, (BlockConfig("srwm", 8, 4, 16),)))
