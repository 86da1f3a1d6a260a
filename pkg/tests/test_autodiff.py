import numpy as np
import pytest

from voxsynth import autodiff as ad


def _store_with(name, value, trainable=True):
    store = ad.ParamStore()
    store.add(name, np.shape(value), rng=np.random.default_rng(0), init="zeros",
              trainable=trainable)
    store.set_(name, value)
    return store


def test_xavier_init_bounds_and_zero_bias():
    rng = np.random.default_rng(42)
    store = ad.ParamStore()
    w = store.add("w", (64, 32), rng=rng)
    b = store.add("b", (32,), init="zeros")
    lim = np.sqrt(6.0 / (64 + 32))
    assert np.all(np.abs(w) <= lim)
    assert np.abs(w).max() > 0.5 * lim  # actually spread out, not degenerate
    np.testing.assert_array_equal(b, 0.0)


@pytest.mark.parametrize("op", [
    "add", "sub", "mul", "div", "matmul", "concat", "gather", "getitem",
    "reshape", "sum", "mean", "cumsum", "relu", "leaky_relu", "sigmoid",
    "softplus", "exp", "log", "square", "absolute", "clip",
])
def test_primitive_gradients_match_central_differences(op):
    rng = np.random.default_rng(hash(op) % (1 << 31))
    x0 = rng.uniform(0.3, 1.5, size=(4, 5))  # positive, away from kinks
    store = _store_with("x", x0)
    aux = rng.uniform(0.5, 1.5, size=(4, 5))
    w = rng.uniform(-1, 1, size=(5, 3))
    idx = np.array([[0, 2], [3, 3], [1, -1]])
    proj_rng = np.random.default_rng(17)
    proj_cache = {}

    def _proj(shape):
        if shape not in proj_cache:
            proj_cache[shape] = proj_rng.standard_normal(shape)
        return proj_cache[shape]

    def f(store):
        t = ad.Tape()
        x = t.param(store, "x")
        if op == "add":
            y = x + aux
        elif op == "sub":
            y = aux - x
        elif op == "mul":
            y = x * aux
        elif op == "div":
            y = aux / (x + 1.0)
        elif op == "matmul":
            y = x @ w
        elif op == "concat":
            y = ad.concat([x, x * 2.0], axis=1)
        elif op == "gather":
            y = ad.gather(x, idx)
        elif op == "getitem":
            y = x[1:3, ::2]
        elif op == "reshape":
            y = x.reshape(2, 10)
        elif op == "sum":
            y = x.sum(axis=1)
        elif op == "mean":
            y = x.mean(axis=0)
        elif op == "cumsum":
            y = x.cumsum(axis=1)
        elif op == "relu":
            y = ad.relu(x - 0.9)
        elif op == "leaky_relu":
            y = ad.leaky_relu(x - 0.9, alpha=0.2)
        elif op == "sigmoid":
            y = ad.sigmoid(x)
        elif op == "softplus":
            y = ad.softplus(x)
        elif op == "exp":
            y = ad.exp(x)
        elif op == "log":
            y = ad.log(x)
        elif op == "square":
            y = ad.square(x)
        elif op == "absolute":
            y = ad.absolute(x - 0.9)
        elif op == "clip":
            y = ad.clip(x, 0.45, 1.35)
        return (y * _proj(y.shape)).sum() if op != "clip" else y.sum()

    err = ad.grad_check(f, store, samples_per_tensor=8, rng=np.random.default_rng(1))
    assert err < 1e-4, f"{op}: {err}"


def test_two_layer_mlp_grad_check():
    rng = np.random.default_rng(7)
    store = ad.ParamStore()
    store.add("w1", (8, 16), rng=rng)
    store.add("b1", (16,), init="zeros")
    store.add("w2", (16, 1), rng=rng)
    store.add("b2", (1,), init="zeros")
    x = rng.standard_normal((12, 8))

    def f(store):
        t = ad.Tape()
        h = ad.relu(t.constant(x) @ t.param(store, "w1") + t.param(store, "b1"))
        out = h @ t.param(store, "w2") + t.param(store, "b2")
        return ad.square(out).mean()

    err = ad.grad_check(f, store, samples_per_tensor=6, rng=np.random.default_rng(2))
    assert err < 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    store = ad.ParamStore()
    store.add("w", (6, 6), rng=rng)
    x = rng.standard_normal((4, 6))

    def run():
        t = ad.Tape()
        w = t.param(store, "w")
        y = ad.sigmoid(t.constant(x) @ w) @ w
        return ad.backward(ad.square(y).sum())["w"]

    g1, g2 = run(), run()
    assert g1.tobytes() == g2.tobytes()


def test_backward_requires_scalar_root():
    store = _store_with("x", np.ones((2, 2)))
    t = ad.Tape()
    x = t.param(store, "x")
    with pytest.raises(ValueError):
        ad.backward(x + 1.0)


def test_gather_missing_rows_are_zero_and_grad_flows():
    store = _store_with("x", np.arange(6.0).reshape(3, 2))
    t = ad.Tape()
    x = t.param(store, "x")
    y = ad.gather(x, np.array([2, -1, 0]))
    np.testing.assert_array_equal(y.value, [[4.0, 5.0], [0.0, 0.0], [0.0, 1.0]])
    g = ad.backward(y.sum())["x"]
    np.testing.assert_array_equal(g, [[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])


def test_gather_plan_matches_ad_hoc_gather():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((10, 4))
    idx = rng.integers(-1, 10, size=(7, 3))
    plan = ad.GatherPlan(idx, 10)
    store = _store_with("x", x0)
    t = ad.Tape()
    x = t.param(store, "x")
    g1 = ad.backward((ad.gather(x, plan) * 2.0).sum())["x"]
    t = ad.Tape()
    x = t.param(store, "x")
    g2 = ad.backward((ad.gather(x, idx) * 2.0).sum())["x"]
    assert g1.tobytes() == g2.tobytes()


def test_adam_first_step_with_unit_gradient():
    # bias correction makes the first update exactly lr / (1 + eps)
    store = ad.ParamStore()
    store.add("p", (1,), init="zeros")
    ad.adam_step(store, {"p": np.ones(1)}, lr=1e-3)
    expect = -1e-3 / (1.0 + 1e-8)
    np.testing.assert_allclose(store.tensors["p"][0], expect, rtol=1e-12)


def test_adam_skips_non_trainable_and_rejects_nan():
    store = ad.ParamStore()
    store.add("frozen", (2,), init="zeros", trainable=False)
    store.add("live", (2,), init="zeros")
    ad.adam_step(store, {"frozen": np.ones(2), "live": np.ones(2)})
    np.testing.assert_array_equal(store.tensors["frozen"], 0.0)
    assert np.all(store.tensors["live"] != 0.0)
    with pytest.raises(FloatingPointError, match="live"):
        ad.adam_step(store, {"live": np.array([np.nan, 1.0])})


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(11)
    tensors = {
        "a/w": rng.standard_normal((3, 4, 2)),
        "b": np.array([-0.0, 1e-310, np.pi]),
        "scalar": np.float64(7.25).reshape(()),
    }
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ad.save_checkpoint(p1, tensors)
    loaded = ad.load_checkpoint(p1)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert np.asarray(tensors[k]).tobytes() == loaded[k].tobytes()
        assert loaded[k].shape == np.asarray(tensors[k]).shape
    ad.save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ad.load_checkpoint(p)


def test_param_store_state_round_trip():
    rng = np.random.default_rng(5)
    store = ad.ParamStore()
    store.add("w", (4, 4), rng=rng)
    ad.adam_step(store, {"w": np.ones((4, 4))})
    state = store.state_dict()
    clone = ad.ParamStore()
    clone.add("w", (4, 4), rng=np.random.default_rng(99))
    clone.load_state(state)
    assert clone.tensors["w"].tobytes() == store.tensors["w"].tobytes()
    # optimizer moments travel with the state
    ad.adam_step(store, {"w": np.ones((4, 4))})
    ad.adam_step(clone, {"w": np.ones((4, 4))})
    assert clone.tensors["w"].tobytes() == store.tensors["w"].tobytes()
    bad = ad.ParamStore()
    bad.add("other", (2,), init="zeros")
    with pytest.raises(ValueError, match="other"):
        bad.load_state(state)
