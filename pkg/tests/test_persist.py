import numpy as np
import pytest

from conftest import random_bank, unit_rows
from gengmm import model as mdl
from gengmm.persist import (
    load_bank,
    load_checkpoint,
    load_target_state,
    save_bank,
    save_checkpoint,
    save_target_state,
)
from gengmm.synth_bench import generate
from gengmm.target_adapt import TargetState, update_priors, update_target_bank
from gengmm.trainer import train


def _filled_bank(rng):
    bank = random_bank(rng, C=3, M=2, D=5)
    for c in range(3):
        bank.queues[c].push(unit_rows(rng, 7 + c, 5))
    bank.starved[:] = [[0, 3], [1, 0], [2, 2]]
    return bank


def _state(rng):
    s = TargetState(3, 5, capacity=16)
    f = unit_rows(rng, 30, 5)
    update_target_bank(s, f, rng.integers(0, 3, 30), 4, 0.9)
    update_priors(s, np.array([0, 1, 1]), np.array([2, 2]), 0.9)
    return s


class TestBank:
    def test_round_trip(self, tmp_path, rng):
        bank = _filled_bank(rng)
        save_bank(tmp_path / "b.ggmb", bank)
        back = load_bank(tmp_path / "b.ggmb")
        for k in ("means", "variances", "weights", "initialized", "starved"):
            assert np.array_equal(getattr(bank, k), getattr(back, k)), k
        for qa, qb in zip(bank.queues, back.queues):
            assert np.array_equal(qa.contents(), qb.contents())

    def test_wrong_magic(self, tmp_path, rng):
        save_target_state(tmp_path / "t.ggmt", _state(rng))
        with pytest.raises(ValueError):
            load_bank(tmp_path / "t.ggmt")


class TestTargetState:
    def test_round_trip(self, tmp_path, rng):
        s = _state(rng)
        save_target_state(tmp_path / "t.ggmt", s)
        back = load_target_state(tmp_path / "t.ggmt")
        for k in ("prototypes", "proto_ready", "delta_target", "delta_source"):
            assert np.array_equal(getattr(s, k), getattr(back, k)), k
        for qa, qb in zip(s.queues, back.queues):
            assert np.array_equal(qa.contents(), qb.contents())


class TestCheckpoint:
    def test_round_trip_after_training(self, tmp_path, tiny_spec, tiny_cfg):
        res = train(tiny_cfg, *generate(tiny_spec))
        path = tmp_path / "c.ggmk"
        save_checkpoint(path, res.pair, res.bank, res.state, res.rng.bit_generator.state,
                        tiny_cfg.to_dict(), tiny_cfg.iterations)
        ck = load_checkpoint(path)
        assert mdl.params_equal(ck["pair"].student, res.pair.student)
        assert mdl.params_equal(ck["pair"].teacher, res.pair.teacher)
        assert np.array_equal(ck["bank"].means, res.bank.means)
        assert np.array_equal(ck["target"].delta_target, res.state.delta_target)
        assert ck["config"] == tiny_cfg.to_dict() and ck["iteration"] == 12
        # the restored generator continues the same stream
        g = np.random.default_rng()
        g.bit_generator.state = ck["rng"]
        assert np.array_equal(g.random(4), res.rng.random(4))

    def test_truncated_file(self, tmp_path, rng):
        path = tmp_path / "b.ggmb"
        save_bank(path, _filled_bank(rng))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueError):
            load_bank(path)
