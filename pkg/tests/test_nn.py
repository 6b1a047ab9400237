import json

import numpy as np
import pytest

from riskgen.nn import (MLP, Adam, PrototypeTower, config_hash, load_params, round_to_f32, save_params,
                        sigmoid, softmax, timestep_features)


def num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


@pytest.mark.parametrize("act", ["silu", "tanh"])
def test_mlp_gradients(act):
    rng = np.random.default_rng(0)
    net = MLP([5, 7, 6, 3], act, rng)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))

    def loss():
        return float((net(x) * w).sum())

    out, cache = net.forward(x)
    grads, gx = net.backward(cache, w)
    assert rel_err(gx, num_grad(loss, x)) < 1e-5
    for k, v in net.params.items():
        assert rel_err(grads[k], num_grad(loss, v)) < 1e-5, k


def test_prototype_tower_gradients():
    rng = np.random.default_rng(1)
    tower = PrototypeTower(4, 6, 3, rng, rho=0.8)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))

    def loss():
        return float((tower(x) * w).sum())

    _, cache = tower.forward(x)
    grads, gx = tower.backward(cache, w)
    assert rel_err(gx, num_grad(loss, x)) < 1e-5
    for k, v in tower.params.items():
        assert rel_err(grads[k], num_grad(loss, v)) < 1e-5, k


def test_prototype_tower_bounded_far_away():
    tower = PrototypeTower(3, 4, 2, np.random.default_rng(0))
    out = tower(np.full((1, 3), 1e4))
    assert np.all(np.isfinite(out))
    assert np.abs(out).max() <= np.abs(tower.params["W"]).max() + 1e-12


def test_adam_minimizes_quadratic():
    p = {"W": np.array([3.0, -2.0])}
    opt = Adam(p, lr=0.1)
    for _ in range(500):
        opt.step({"W": 2 * p["W"]})
    assert np.abs(p["W"]).max() < 1e-2


def test_adam_first_step_is_lr_sized():
    p = {"b": np.array([1.0, 1.0])}
    Adam(p, lr=0.01).step({"b": np.array([5.0, -0.3])})
    np.testing.assert_allclose(p["b"], [0.99, 1.01], atol=1e-6)


def test_small_helpers():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]])
    p = softmax(x)
    np.testing.assert_allclose(p.sum(1), 1.0)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(p[0], e / e.sum())
    np.testing.assert_allclose(sigmoid(np.array([0.0, 2.0])), [0.5, 1 / (1 + np.exp(-2.0))])
    f = timestep_features(np.array([0, 3]), 8)
    assert f.shape == (2, 8)
    np.testing.assert_array_equal(f[0], [0, 0, 0, 0, 1, 1, 1, 1])


def test_config_hash_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_checkpoint_round_trip(tmp_path):
    net = MLP([3, 4, 2], "silu", np.random.default_rng(2))
    round_to_f32(net.params)
    x = np.random.default_rng(3).normal(size=(6, 3))
    save_params(tmp_path / "ck", net.params, "mlp", {"sizes": [3, 4, 2]}, 7, {"note": "x"})
    params, man = load_params(tmp_path / "ck")
    assert man["arch"] == "mlp" and man["seed"] == 7 and man["shapes"]["W0"] == [3, 4]
    assert man["config_hash"] == config_hash({"sizes": [3, 4, 2]})
    net2 = MLP([3, 4, 2], "silu", np.random.default_rng(9))
    net2.params.update(params)
    assert np.array_equal(net(x), net2(x))
    raw = (tmp_path / "ck" / "W0.bin").read_bytes()
    assert len(raw) == 12 * 4
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(3, 4), net.params["W0"])


def test_checkpoint_truncation_and_version(tmp_path):
    net = MLP([3, 4, 2], "silu", np.random.default_rng(2))
    d = save_params(tmp_path / "ck", net.params, "mlp", {}, 0)
    blk = d / "W1.bin"
    blk.write_bytes(blk.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_params(d)
    d = save_params(tmp_path / "ck2", net.params, "mlp", {}, 0)
    man = json.loads((d / "manifest.json").read_text())
    man["version"] = 99
    (d / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValueError):
        load_params(d)
