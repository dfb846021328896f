import numpy as np
import pytest

from reverbfl import attacks as A
from reverbfl import data as D
from reverbfl import defense as Df
from reverbfl import experiment as E
from reverbfl import federation as F
from reverbfl import model as M


@pytest.fixture(scope="module")
def desk_env():
    cfg = E.load_config(overrides={"attack.kind": "pgd"})
    return cfg, E.build_environment(cfg)


def reserve_loss(arch, params, reserve):
    return M.evaluate_model(arch, params, reserve.data.x, reserve.data.y)[1]


def micro_reserve(n, seed=0):
    rng = np.random.default_rng(seed)
    return D.ReserveSet(D.Dataset(rng.uniform(-1, 1, (n, 8, 8, 2)), rng.integers(0, 3, n), np.arange(n)), 0.05)


def test_config_validation_and_steps():
    assert Df.DefenseConfig(batch_size=32).steps_for(100) == 4
    assert Df.DefenseConfig(batch_size=32, steps=1).steps_for(100) == 1
    with pytest.raises(ValueError):
        Df.DefenseConfig(mode="NoPoison")
    with pytest.raises(ValueError):
        Df.DefenseConfig(batch_size=0)


def test_pretrain_zero_epochs_and_empty_reserve(micro_arch):
    params = M.init_params(micro_arch, 0)
    out = Df.pretrain(micro_arch, params, micro_reserve(10), Df.DefenseConfig("all", pretrain_epochs=0),
                      np.random.default_rng(0))
    assert all(np.array_equal(out[k], params[k]) for k in params)
    empty = micro_reserve(0)
    with pytest.raises(ValueError):
        Df.pretrain(micro_arch, params, empty, Df.DefenseConfig("all"), np.random.default_rng(0))
    with pytest.raises(ValueError):
        Df.reserve_retrain(micro_arch, params, empty, Df.DefenseConfig("clean"), np.random.default_rng(0))


def test_pretrain_lowers_reserve_loss(desk_env):
    cfg, env = desk_env
    lowered = 0
    for seed in range(5):
        params = M.init_params(env.arch, seed)
        out = Df.pretrain(env.arch, params, env.reserve, cfg.defense, np.random.default_rng(seed))
        lowered += reserve_loss(env.arch, out, env.reserve) < reserve_loss(env.arch, params, env.reserve)
    assert lowered >= 4


def test_pretrain_is_deterministic(micro_arch):
    params = M.init_params(micro_arch, 1)
    cfg = Df.DefenseConfig("clean", batch_size=4)
    a = Df.pretrain(micro_arch, params, micro_reserve(10), cfg, np.random.default_rng(3))
    b = Df.pretrain(micro_arch, params, micro_reserve(10), cfg, np.random.default_rng(3))
    assert F.params_digest(a) == F.params_digest(b) != F.params_digest(params)


@pytest.mark.parametrize("mode", ["fgsm", "pgd", "awgn", "all"])
def test_augment_batch_shapes_and_budget(micro_arch, mode):
    rng = np.random.default_rng(4)
    params = M.init_params(micro_arch, 4)
    x, y = np.clip(rng.normal(0, 2, (16, 8, 8, 2)), -3, 3), rng.integers(0, 3, 16)
    spec = A.AttackSpec("none", epsilon=0.05, iterations=3, sigma=0.03)
    xa, ya = Df.augment_batch(micro_arch, params, x, y, mode, spec, rng)
    assert xa.shape == (32, 8, 8, 2)
    assert np.array_equal(ya[:16], y) and np.array_equal(ya[16:], y)
    assert np.array_equal(xa[:16], x)
    assert np.abs(xa).max() <= 3.0
    if mode in ("fgsm", "pgd"):
        assert np.abs(xa[16:] - x).max() <= 0.05 + 1e-12


def test_augment_batch_clean_and_disabled(micro_arch):
    params = M.init_params(micro_arch, 0)
    x, y = np.zeros((4, 8, 8, 2)), np.arange(4) % 3
    xa, ya = Df.augment_batch(micro_arch, params, x, y, "clean", A.AttackSpec(), None)
    assert xa is x and ya is y
    with pytest.raises(ValueError):
        Df.augment_batch(micro_arch, params, x, y, "disabled", A.AttackSpec(), None)


def test_reserve_retrain_step_count_and_pass_through(micro_arch, monkeypatch):
    params = M.init_params(micro_arch, 0)
    out, steps = Df.reserve_retrain(micro_arch, params, micro_reserve(100), Df.DefenseConfig(),
                                    np.random.default_rng(0))
    assert out is params and steps == 0
    calls = []
    real = M.train_step
    monkeypatch.setattr(M, "train_step", lambda *a: calls.append(len(a[3])) or real(*a))
    _, steps = Df.reserve_retrain(micro_arch, params, micro_reserve(100), Df.DefenseConfig("clean"),
                                  np.random.default_rng(0))
    assert steps == 4 and calls == [32, 32, 32, 4]
    calls.clear()
    Df.reserve_retrain(micro_arch, params, micro_reserve(10), Df.DefenseConfig("fgsm", batch_size=4, steps=5),
                       np.random.default_rng(0))
    assert len(calls) == 5 and max(calls) <= 8


def test_retrain_lowers_reserve_loss_on_poisoned_aggregate(desk_env):
    cfg, env = desk_env
    defense = Df.DefenseConfig("pgd", batch_size=32, optimizer=cfg.fed.optimizer,
                               attack=cfg.attack.as_kind("none"))
    lowered = 0
    for seed in range(5):
        fed_cfg = F.FedConfig(rounds=1, attack=cfg.attack, optimizer=cfg.fed.optimizer, seed=seed)
        fed = F.Federation(env.arch, env.shards, env.test, fed_cfg)
        aggregate, _ = fed.run_round(M.init_params(env.arch, seed), 0)
        out, _ = Df.reserve_retrain(env.arch, aggregate, env.reserve, defense, np.random.default_rng(seed))
        lowered += reserve_loss(env.arch, out, env.reserve) < reserve_loss(env.arch, aggregate, env.reserve)
    assert lowered >= 4


def test_broadcast_is_post_retrain_model(micro_arch):
    shards = [D.ClientShard(c, micro_reserve(8, c).data) for c in range(4)]
    reserve = micro_reserve(12, 9)
    cfg = F.FedConfig(num_clients=4, sample_fraction=0.5, local_steps=1, batch_size=4, seed=2,
                      attack=A.AttackSpec("fgsm", 0.05))
    defense = Df.DefenseConfig("fgsm", batch_size=4, attack=A.AttackSpec("none", 0.05))
    fed = F.Federation(micro_arch, shards, reserve.data, cfg, defense, reserve)
    params = M.init_params(micro_arch, 0)
    for t in range(3):
        new, rec = fed.run_round(params, t)
        assert rec.broadcast_digest == F.params_digest(new) != rec.aggregate_digest
        assert rec.reserve_steps == 3
        params = new
