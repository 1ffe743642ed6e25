import numpy as np
import pytest

from thoraxsearch.errors import CheckpointError
from thoraxsearch.neuralnet import (Activation, AdamState, DenseLayer, Network,
                                    adam_step, backward, bce_loss, build_network,
                                    forward, load_network, loss, mse_loss,
                                    network_from_bytes, network_to_bytes, predict,
                                    save_network, train)


def _random_net(rng, dims=None, acts=None, dropout=0.0, dtype=np.float64):
    if dims is None:
        n = rng.integers(2, 4)
        dims = [int(rng.integers(2, 7)) for _ in range(n + 1)]
    if acts is None:
        acts = [Activation(rng.choice(["relu", "sigmoid", "linear"]))
                for _ in range(len(dims) - 1)]
    return build_network(dims, acts, dropout_rate=dropout,
                         seed=int(rng.integers(0, 2**31)), dtype=dtype)


def _fd_gradients(net, x, y, loss_kind, step=1e-5):
    """Central finite differences on every parameter (64-bit nets only)."""
    out = []
    for layer in net.layers:
        grads = []
        for param in (layer.weights, layer.bias):
            g = np.zeros_like(param)
            flat = param.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = loss(loss_kind, forward(net, x).output, y)[0]
                flat[i] = orig - step
                lm = loss(loss_kind, forward(net, x).output, y)[0]
                flat[i] = orig
                gf[i] = (lp - lm) / (2 * step)
            grads.append(g)
        out.append(tuple(grads))
    return out


def _max_rel_err(analytic, numeric):
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# forward

def test_forward_identity_layer():
    net = Network(layers=[DenseLayer(np.eye(3), np.zeros(3), Activation.LINEAR)])
    x = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(forward(net, x).output, x)


def test_forward_sigmoid_zero_weights():
    net = Network(layers=[DenseLayer(np.zeros((5, 2)), np.zeros(2), Activation.SIGMOID)])
    out = forward(net, np.random.default_rng(0).normal(size=(3, 5))).output
    assert np.allclose(out, 0.5)


def test_forward_matches_triple_loop_oracle():
    rng = np.random.default_rng(1)
    net = build_network([4, 6, 3], [Activation.RELU, Activation.SIGMOID],
                        seed=2, dtype=np.float64)
    x = rng.normal(size=(5, 4))
    got = forward(net, x).output

    def dense(inp, layer):
        out = np.zeros((inp.shape[0], layer.out_dim))
        for r in range(inp.shape[0]):
            for c in range(layer.out_dim):
                acc = layer.bias[c]
                for k in range(layer.in_dim):
                    acc += inp[r, k] * layer.weights[k, c]
                out[r, c] = acc
        return out

    z1 = dense(x, net.layers[0])
    a1 = np.maximum(z1, 0)
    z2 = dense(a1, net.layers[1])
    a2 = 1.0 / (1.0 + np.exp(-z2))
    assert np.max(np.abs(got - a2)) < 1e-6


def test_forward_shape_and_finite_guards():
    net = build_network([3, 2], [Activation.LINEAR], seed=0)
    with pytest.raises(ValueError):
        forward(net, np.ones((2, 4)))
    with pytest.raises(ValueError):
        forward(net, np.array([[1.0, np.nan, 0.0]]))


# ---------------------------------------------------------------------------
# backward

def test_backward_zero_loss_grad():
    rng = np.random.default_rng(2)
    net = _random_net(rng)
    x = rng.normal(size=(4, net.in_dim))
    cache = forward(net, x)
    grads = backward(net, cache, np.zeros_like(cache.output))
    for dw, db in grads:
        assert not dw.any() and not db.any()


def test_backward_is_linear_in_loss_grad():
    rng = np.random.default_rng(3)
    net = _random_net(rng)
    x = rng.normal(size=(4, net.in_dim))
    cache = forward(net, x)
    g = rng.normal(size=cache.output.shape)
    one = backward(net, cache, g)
    two = backward(net, cache, 2.0 * g)
    for (dw1, db1), (dw2, db2) in zip(one, two):
        assert np.array_equal(dw2, 2.0 * dw1)
        assert np.array_equal(db2, 2.0 * db1)


def test_gradients_match_finite_differences():
    # 3-layer net, both losses, relative error <= 1e-4 at 64-bit.
    rng = np.random.default_rng(4)
    for loss_kind in ("mse", "bce"):
        net = build_network([3, 4, 4, 2],
                            [Activation.RELU, Activation.SIGMOID, Activation.SIGMOID],
                            seed=11, dtype=np.float64)
        x = rng.normal(size=(6, 3))
        y = rng.uniform(0.2, 0.8, size=(6, 2))
        cache = forward(net, x)
        _, g = loss(loss_kind, cache.output, y)
        analytic = backward(net, cache, g)
        numeric = _fd_gradients(net, x, y, loss_kind)
        assert _max_rel_err(analytic, numeric) <= 1e-4


def test_gradients_with_fixed_dropout_mask():
    # Same rng seed per forward call -> same mask, so FD and analytic agree.
    rng = np.random.default_rng(5)
    net = build_network([4, 5, 2], [Activation.RELU, Activation.LINEAR],
                        dropout_rate=0.4, seed=6, dtype=np.float64)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 2))

    def masked_forward():
        return forward(net, x, training=True, rng=np.random.default_rng(99))

    cache = masked_forward()
    _, g = loss("mse", cache.output, y)
    analytic = backward(net, cache, g)
    w = net.layers[0].weights
    step = 1e-5
    worst = 0.0
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            orig = w[i, j]
            w[i, j] = orig + step
            lp = loss("mse", masked_forward().output, y)[0]
            w[i, j] = orig - step
            lm = loss("mse", masked_forward().output, y)[0]
            w[i, j] = orig
            fd = (lp - lm) / (2 * step)
            denom = max(abs(fd), abs(analytic[0][0][i, j]), 1e-6)
            worst = max(worst, abs(fd - analytic[0][0][i, j]) / denom)
    assert worst <= 1e-4


# ---------------------------------------------------------------------------
# losses

def test_mse_perfect_fit():
    p = np.random.default_rng(6).normal(size=(4, 3))
    value, grad = mse_loss(p, p.copy())
    assert value == 0.0 and not grad.any()


def test_bce_half_is_ln2():
    value, _ = bce_loss(np.full((1, 1), 0.5), np.ones((1, 1)))
    assert abs(value - 0.6931471805599453) < 1e-12


def test_loss_shape_guard():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        loss("nope", np.zeros((1, 1)), np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_is_fixed_point():
    net = build_network([2, 2], [Activation.LINEAR], seed=7, dtype=np.float64)
    before = [l.weights.copy() for l in net.layers]
    state = AdamState.for_network(net)
    zero = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]
    adam_step(net, zero, state)
    assert state.t == 1
    for b, l in zip(before, net.layers):
        assert np.array_equal(b, l.weights)


def test_adam_first_step_magnitude():
    # Bias correction makes the first step ~alpha per scalar: alpha*g/(|g|+eps).
    net = Network(layers=[DenseLayer(np.zeros((1, 1)), np.zeros(1), Activation.LINEAR)])
    state = AdamState.for_network(net)
    g = 0.5
    adam_step(net, [(np.full((1, 1), g), np.zeros(1))], state)
    expected = -1e-3 * g / (g + 1e-8)
    assert abs(net.layers[0].weights[0, 0] - expected) < 1e-12
    assert abs(abs(net.layers[0].weights[0, 0]) - 1e-3) < 1e-8


def test_adam_rejects_non_finite():
    net = build_network([2, 1], [Activation.LINEAR], seed=8)
    state = AdamState.for_network(net)
    with pytest.raises(ValueError):
        adam_step(net, [(np.full((2, 1), np.nan), np.zeros(1))], state)


# ---------------------------------------------------------------------------
# training

def test_train_zero_epochs_is_noop():
    rng = np.random.default_rng(9)
    net = build_network([4, 3], [Activation.LINEAR], seed=10)
    before = network_to_bytes(net)
    x = rng.normal(size=(10, 4))
    _, history = train(net, x, x[:, :3], epochs=0, loss_kind="mse", seed=0)
    assert history == []
    assert network_to_bytes(net) == before


def test_autoencoder_progress_on_subspace_data():
    # 8-dim linear subspace embedded in 64 dims: training must beat init.
    rng = np.random.default_rng(10)
    x = rng.normal(size=(300, 8)) @ rng.normal(size=(8, 64)) / np.sqrt(8)
    net = build_network([64, 32, 8, 32, 64], [Activation.RELU] * 3 + [Activation.LINEAR],
                        seed=12)
    initial = mse_loss(predict(net, x), x.astype(np.float32))[0]
    train(net, x, x, epochs=10, batch_size=32, loss_kind="mse", seed=13)
    final = mse_loss(predict(net, x), x.astype(np.float32))[0]
    assert final < initial


def test_linear_autoencoder_converges_below_1e3_of_variance():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 16))
    net = build_network([16, 4, 16], [Activation.LINEAR, Activation.LINEAR],
                        seed=14, dtype=np.float64)
    train(net, x, x, epochs=300, batch_size=64, loss_kind="mse", seed=15,
          learning_rate=3e-3)
    final = mse_loss(predict(net, x), x)[0]
    assert final < 1e-3 * x.var()


def test_train_identical_seeds_bitwise_identical():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(50, 6))
    y = rng.normal(size=(50, 2))

    def run():
        net = build_network([6, 5, 2], [Activation.RELU, Activation.LINEAR],
                            dropout_rate=0.2, seed=20)
        train(net, x, y, epochs=3, batch_size=16, loss_kind="mse", seed=21)
        return network_to_bytes(net)

    assert run() == run()


# ---------------------------------------------------------------------------
# dropout

def test_dropout_rate_zero_is_identity():
    rng = np.random.default_rng(13)
    net = build_network([5, 4, 3], [Activation.RELU, Activation.LINEAR],
                        dropout_rate=0.0, seed=22, dtype=np.float64)
    x = rng.normal(size=(6, 5))
    a = forward(net, x, training=True, rng=np.random.default_rng(0)).output
    b = forward(net, x, training=False).output
    assert np.array_equal(a, b)


def test_dropout_inference_is_identity():
    net = build_network([5, 4, 3], [Activation.RELU, Activation.LINEAR],
                        dropout_rate=0.5, seed=23, dtype=np.float64)
    x = np.random.default_rng(14).normal(size=(6, 5))
    assert np.array_equal(forward(net, x, training=False).output,
                          forward(net, x, training=False).output)


def test_dropout_montecarlo_expectation():
    # Inverted scaling: averaging the masked-and-rescaled hidden activation
    # over 10,000 masks recovers the unmasked activation within 2%.
    rng = np.random.default_rng(15)
    net = build_network([6, 8, 4], [Activation.RELU, Activation.LINEAR],
                        dropout_rate=0.2, seed=24, dtype=np.float64)
    x = rng.normal(size=(2, 6))
    clean = forward(net, x, training=False).activations[0]
    keep = 1.0 - net.dropout_rate
    mask_rng = np.random.default_rng(16)
    total = np.zeros_like(clean)
    n = 10000
    for _ in range(n):
        cache = forward(net, x, training=True, rng=mask_rng)
        total += cache.activations[0] * cache.masks[0] / keep
    avg = total / n
    nz = clean != 0
    assert np.max(np.abs(avg[nz] - clean[nz]) / np.abs(clean[nz])) < 0.02
    assert not avg[~nz].any()  # relu zeros stay exactly zero under any mask


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    net = build_network([7, 5, 2], [Activation.RELU, Activation.SIGMOID],
                        dropout_rate=0.2, seed=25)
    path = tmp_path / "net.nn"
    save_network(net, path)
    back = load_network(path)
    assert back.dropout_rate == net.dropout_rate
    for a, b in zip(net.layers, back.layers):
        assert a.activation is b.activation
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)
    # write -> read -> write byte identity
    assert network_to_bytes(back) == path.read_bytes()


def test_checkpoint_tamper_detected(tmp_path):
    net = build_network([3, 2], [Activation.LINEAR], seed=26)
    raw = bytearray(network_to_bytes(net))
    raw[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        network_from_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        network_from_bytes(raw[:20])
