import numpy as np
import pytest

from gradcheck import check_network, single_layer_net
from susygan.errors import ContractError, NumericFault, SpecError
from susygan.gan import build_discriminator, build_generator
from susygan.nn import (BatchNorm, Conv2D, Dense, Dropout, Flatten, Input, LeakyReLU, NetworkSpec, ReLU,
                        Reshape, Sigmoid, Tanh, UpSample2x, backward, decayed_lr, forward, init_params,
                        load_checkpoint, param_count, rmsprop_step, rmsprop_update, save_checkpoint)
from susygan.nn.layers import layer_from_dict

GRAD_TOL = 1e-4

LAYER_CASES = [
    (Conv2D(3, 2), (5, 5, 2)),
    (Conv2D(4, 3), (4, 6, 3)),
    (Conv2D(2, 1), (3, 3, 2)),
    (Dense(4), (6,)),
    (BatchNorm(), (7,)),
    (BatchNorm(momentum=0.5), (3, 3, 4)),
    (Dropout(0.4), (4, 4, 2)),
    (LeakyReLU(0.2), (10,)),
    (ReLU(), (10,)),
    (Tanh(), (10,)),
    (Sigmoid(), (10,)),
    (UpSample2x(), (3, 3, 2)),
    (Flatten(), (2, 3, 2)),
    (Reshape((3, 4)), (12,)),
]


@pytest.mark.parametrize("layer, shape", LAYER_CASES, ids=lambda c: getattr(c, "kind", None))
def test_layer_gradients(layer, shape):
    x = np.random.default_rng(0).normal(size=(4,) + shape)
    perr, xerr = check_network(single_layer_net(layer, shape), x)
    assert perr <= GRAD_TOL and xerr <= GRAD_TOL


def test_batchnorm_infer_mode_gradients():
    net = single_layer_net(BatchNorm(), (3, 3, 2))
    x = np.random.default_rng(2).normal(size=(2, 3, 3, 2))
    perr, xerr = check_network(net, x, train=False)
    assert perr <= GRAD_TOL and xerr <= GRAD_TOL


def test_small_discriminator_and_generator_gradients():
    disc = build_discriminator(8, widths=(2, 3, 2, 2))
    gen = build_generator(8, noise_dim=3, base_channels=2, widths=(2, 2, 2))
    rng = np.random.default_rng(5)
    for net, x in ((disc, rng.normal(size=(3, 8, 8, 2))), (gen, rng.uniform(-1, 1, size=(4, 3)))):
        perr, xerr = check_network(net, x, max_entries=15, h=1e-5)
        assert perr <= GRAD_TOL and xerr <= GRAD_TOL, net.name


def test_zero_upstream_gradient_gives_zero_grads():
    net = build_discriminator(8, widths=(2, 2, 2, 2))
    store = init_params(net, 0, np.float64)
    x = np.random.default_rng(0).normal(size=(2, 8, 8, 2))
    y, caches = forward(net, store, x, train=True, rng=np.random.default_rng(1))
    grads, dx = backward(net, store, caches, np.zeros_like(y))
    assert all(np.all(g == 0) for layer in grads for g in layer.values())
    assert np.all(dx == 0)


def test_dense_gradient_linear_case():
    net = single_layer_net(Dense(3), (1,))
    store = init_params(net, 0, np.float64)
    x = np.array([[2.5]])
    y, caches = forward(net, store, x)
    up = np.array([[1.0, -2.0, 0.5]])
    grads, _ = backward(net, store, caches, up)
    np.testing.assert_allclose(grads[1]["kernel"], x.T @ up)
    np.testing.assert_allclose(grads[1]["bias"], up[0])


# --- forward semantics ------------------------------------------------------------

def _conv_store(net, kernel, bias=0.0):
    store = init_params(net, 0, np.float64)
    store.params[1]["kernel"][...] = kernel
    store.params[1]["bias"][...] = bias
    return store


def test_conv_identity_tap_shifts_input():
    net = single_layer_net(Conv2D(1, 3), (5, 5, 1))
    k = np.zeros((3, 3, 1, 1))
    k[2, 1, 0, 0] = 1.0  # picks x[i+1, j]
    store = _conv_store(net, k)
    x = np.arange(25.0).reshape(1, 5, 5, 1)
    y, _ = forward(net, store, x)
    np.testing.assert_array_equal(y[0, :4, :, 0], x[0, 1:, :, 0])
    np.testing.assert_array_equal(y[0, 4, :, 0], 0)


def test_conv_all_ones_2x2_same_padding():
    net = single_layer_net(Conv2D(1, 2), (3, 3, 1))
    store = _conv_store(net, np.ones((2, 2, 1, 1)))
    c = 1.5
    y, _ = forward(net, store, np.full((1, 3, 3, 1), c))
    # brute-force reference: zero pad one trailing row/column and sum 2x2 windows
    padded = np.zeros((4, 4))
    padded[:3, :3] = c
    ref = np.array([[padded[i:i + 2, j:j + 2].sum() for j in range(3)] for i in range(3)])
    np.testing.assert_array_equal(y[0, :, :, 0], ref)
    assert ref[0, 0] == 4 * c and ref[0, 2] == 2 * c and ref[2, 2] == c


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(4)
    for k in (1, 2, 3):
        net = single_layer_net(Conv2D(3, k), (6, 5, 2))
        store = init_params(net, k, np.float64)
        store.params[1]["bias"][...] = rng.normal(size=3)
        x = rng.normal(size=(2, 6, 5, 2))
        y, _ = forward(net, store, x)
        lead = (k - 1) // 2
        xp = np.zeros((2, 6 + k - 1, 5 + k - 1, 2))
        xp[:, lead:lead + 6, lead:lead + 5] = x
        w, b = store.params[1]["kernel"], store.params[1]["bias"]
        ref = np.zeros((2, 6, 5, 3))
        for i in range(6):
            for j in range(5):
                ref[:, i, j] = np.einsum("bpqc,pqcf->bf", xp[:, i:i + k, j:j + k], w) + b
        np.testing.assert_allclose(y, ref, atol=1e-12)


def test_sigmoid_zero_logits():
    net = single_layer_net(Sigmoid(), (4,))
    y, _ = forward(net, init_params(net, 0), np.zeros((3, 4), np.float32))
    assert np.all(y == 0.5)


def test_activation_ranges():
    x = np.linspace(-30, 30, 121).reshape(1, -1)
    for layer, lo, hi in ((Tanh(), -1, 1), (Sigmoid(), 0, 1)):
        net = single_layer_net(layer, (121,))
        y, _ = forward(net, init_params(net, 0, np.float64), x)
        assert y.min() >= lo and y.max() <= hi
    net = single_layer_net(Sigmoid(), (41,))
    y, _ = forward(net, init_params(net, 0, np.float64), np.linspace(-10, 10, 41).reshape(1, -1))
    assert y.min() > 0 and y.max() < 1


def test_leaky_relu_values():
    net = single_layer_net(LeakyReLU(0.2), (3,))
    y, _ = forward(net, init_params(net, 0, np.float64), np.array([[-2.0, 0.0, 3.0]]))
    np.testing.assert_allclose(y, [[-0.4, 0.0, 3.0]])


def test_dropout_modes():
    net = single_layer_net(Dropout(0.4), (50, 50))
    store = init_params(net, 0, np.float64)
    x = np.ones((4, 50, 50))
    y, _ = forward(net, store, x, train=False)
    np.testing.assert_array_equal(y, x)
    y, _ = forward(net, store, x, train=True, rng=np.random.default_rng(0))
    kept = y != 0
    assert abs(kept.mean() - 0.6) < 0.02
    np.testing.assert_allclose(y[kept], 1 / 0.6)
    with pytest.raises(ContractError):
        forward(net, store, x, train=True, rng=None)


def test_batchnorm_initial_infer_is_identity():
    net = single_layer_net(BatchNorm(), (3, 3, 4))
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 4))
    y, _ = forward(net, init_params(net, 0, np.float64), x, train=False)
    np.testing.assert_allclose(y, x, rtol=1e-5)


def test_batchnorm_train_statistics_and_momentum():
    net = single_layer_net(BatchNorm(momentum=0.9), (5,))
    store = init_params(net, 0, np.float64)
    x = np.random.default_rng(1).normal(loc=3.0, scale=2.0, size=(64, 5))
    y, _ = forward(net, store, x, train=True)
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), 1, rtol=1e-4)
    p = store.params[1]
    np.testing.assert_allclose(p["moving_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(p["moving_variance"], 0.9 + 0.1 * x.var(axis=0))


def test_upsample_doubles():
    net = single_layer_net(UpSample2x(), (2, 3, 1))
    x = np.arange(6.0).reshape(1, 2, 3, 1)
    y, _ = forward(net, init_params(net, 0, np.float64), x)
    assert y.shape == (1, 4, 6, 1)
    np.testing.assert_array_equal(y[0, :, :, 0], np.kron(x[0, :, :, 0], np.ones((2, 2))))


def test_non_finite_activation_names_layer():
    net = NetworkSpec("probe", (Input((2,)), Dense(2), Tanh()))
    store = init_params(net, 0, np.float64)
    store.params[1]["kernel"][0, 0] = np.inf
    with pytest.raises(NumericFault) as info:
        forward(net, store, np.ones((1, 2)))
    assert info.value.layer_index == 1


def test_cache_mismatch_is_contract_error():
    net = build_discriminator(8, widths=(2, 2, 2, 2))
    store = init_params(net, 0)
    _, caches = forward(net, store, np.zeros((1, 8, 8, 2), np.float32))
    with pytest.raises(ContractError):
        backward(net, store, caches[:-1], np.zeros((1, 1), np.float32))
    other = build_generator(8, noise_dim=2, base_channels=2, widths=(2, 2, 2))
    with pytest.raises(ContractError):
        backward(other, init_params(other, 0), caches + caches[:4], np.zeros((1, 8, 8, 2), np.float32))


# --- parameter accounting ---------------------------------------------------------

def test_single_conv_param_count():
    assert param_count(single_layer_net(Conv2D(8, 2), (64, 64, 2))) == 72


def test_param_count_matches_store_size():
    for net in (build_discriminator(), build_discriminator(16, (4, 8, 8, 16)),
                build_generator(16, 32, 32, (16, 8, 8))):
        assert init_params(net, 0).size() == param_count(net)


def test_param_formula_per_kind():
    net = NetworkSpec("probe", (Input((4, 4, 3)), Conv2D(5, 3), BatchNorm(), Flatten(), Dense(7)))
    assert net.layer_param_counts() == [0, 3 * 3 * 3 * 5 + 5, 4 * 5, 0, 80 * 7 + 7]


def test_shape_chain_errors_name_layer():
    with pytest.raises(SpecError) as info:
        NetworkSpec("bad", (Input((4, 4, 2)), Conv2D(2, 2), Dense(3)))
    assert info.value.layer_index == 2
    with pytest.raises(SpecError):
        NetworkSpec("bad", (Dense(3),))
    with pytest.raises(SpecError):
        NetworkSpec("bad", (Input((12,)), Reshape((5, 2))))
    with pytest.raises(SpecError):
        NetworkSpec("bad", (Input((4,)), Dropout(1.0)))
    with pytest.raises(SpecError):
        NetworkSpec("bad", (Input((4,)), LeakyReLU(0.0)))


def test_layer_dict_roundtrip():
    for layer in build_generator().layers + build_discriminator().layers:
        assert layer_from_dict(layer.to_dict()) == layer


# --- initialization -------------------------------------------------------------

def test_init_deterministic():
    net = build_discriminator(16, (4, 8, 8, 16))
    a, b = init_params(net, 3), init_params(net, 3)
    for pa, pb in zip(a.params, b.params):
        for k in pa:
            np.testing.assert_array_equal(pa[k], pb[k])
    c = init_params(net, 4)
    assert not np.array_equal(a.params[1]["kernel"], c.params[1]["kernel"])


def test_init_glorot_bounds():
    net = NetworkSpec("probe", (Input((4, 4, 3)), Conv2D(5, 2), Flatten(), Dense(6)))
    store = init_params(net, 0, np.float64)
    conv_limit = np.sqrt(6 / (2 * 2 * 3 + 2 * 2 * 5))
    dense_limit = np.sqrt(6 / (80 + 6))
    assert np.abs(store.params[1]["kernel"]).max() <= conv_limit
    assert np.abs(store.params[3]["kernel"]).max() <= dense_limit
    assert np.all(store.params[1]["bias"] == 0) and np.all(store.params[3]["bias"] == 0)


# --- RMSprop ----------------------------------------------------------------------

def test_rmsprop_hand_evaluated_first_step():
    theta, cache = np.array([0.0]), np.array([0.0])
    rmsprop_update(theta, np.array([2.0]), cache, 0, lr0=0.1, rho=0.9, epsilon=0.0)
    assert cache[0] == pytest.approx(0.4)
    assert theta[0] == pytest.approx(-0.1 * 2 / np.sqrt(0.4))
    assert theta[0] == pytest.approx(-0.3162, abs=1e-4)


def test_rmsprop_zero_gradient():
    theta, cache = np.array([1.5, -2.0]), np.array([0.3, 0.7])
    rmsprop_update(theta, np.zeros(2), cache, 5, lr0=0.1)
    np.testing.assert_array_equal(theta, [1.5, -2.0])
    np.testing.assert_allclose(cache, [0.27, 0.63])


def test_decayed_learning_rate():
    assert decayed_lr(2e-4, 6e-8, 10**6) == pytest.approx(2e-4 / 1.06)
    assert decayed_lr(2e-4, 6e-8, 10**6) == pytest.approx(1.8868e-4, rel=1e-4)


def test_rmsprop_step_updates_trainables_only():
    net = NetworkSpec("probe", (Input((3,)), Dense(2), BatchNorm()))
    store = init_params(net, 0, np.float64)
    before = store.copy()
    y, caches = forward(net, store, np.ones((4, 3)), train=True)
    moving = {k: store.params[2][k].copy() for k in ("moving_mean", "moving_variance")}
    grads, _ = backward(net, store, caches, np.random.default_rng(0).normal(size=y.shape))
    rmsprop_step(store, grads, lr0=0.01, decay=0.0)
    assert store.iterations == 1
    assert not np.array_equal(store.params[1]["kernel"], before.params[1]["kernel"])
    for k, v in moving.items():
        np.testing.assert_array_equal(store.params[2][k], v)


# --- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = build_generator(16, 8, 8, (4, 4, 4))
    store = init_params(net, 1)
    store.cache[1]["kernel"][...] = 0.25
    store.iterations = 17
    p = tmp_path / "g.hprm"
    save_checkpoint(net, store, p)
    net2, store2 = load_checkpoint(p, expect=net)
    assert net2 == net and store2.iterations == 17
    for a, b in zip(store.params + store.cache, store2.params + store2.cache):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
    p2 = tmp_path / "g2.hprm"
    save_checkpoint(net2, store2, p2)
    assert p.read_bytes() == p2.read_bytes()
    assert p.read_bytes()[:4] == b"HPRM"


def test_checkpoint_mismatch_and_corruption(tmp_path):
    from susygan.errors import BadMagic, TruncatedFile
    net = build_discriminator(8, (2, 2, 2, 2))
    p = tmp_path / "d.hprm"
    save_checkpoint(net, init_params(net, 0), p)
    with pytest.raises(ContractError):
        load_checkpoint(p, expect=build_discriminator(8, (2, 2, 2, 4)))
    raw = p.read_bytes()
    (tmp_path / "t").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "t")
    (tmp_path / "m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "m")
