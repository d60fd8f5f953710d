import itertools

import numpy as np
import pytest

from gnnssm.graph import GeneratorSpec, from_edge_list, generate, normalized_adjacency
from gnnssm.nn import COUPLINGS, RESIDUALS, ModelConfig, SsmConfig, build_model, forward, layer_jacobian, vec
from gnnssm.tasks import make_ring_transfer
from gnnssm.train import (
    AdamState,
    GradientBundle,
    NumericError,
    TrainConfig,
    UsageError,
    accuracy,
    backward,
    batch_loss,
    cross_entropy,
    input_vjp,
    log10_mse,
    losses_and_metrics,
    make_batches,
    mse,
    node_sensitivity,
    optimizer_step,
    sensitivity_bound,
    train_loop,
)

CASES = list(itertools.product(COUPLINGS, RESIDUALS))


def make_model(coupling="gcn", residual="ssm", activation="tanh", depth=3, d_in=3, d=4, d_out=2, **kw):
    ssm = kw.pop("ssm", SsmConfig(0.9, 0.5, seed=1))
    return build_model(ModelConfig(d_in, d, d_out, depth, coupling=coupling, residual=residual,
                                   activation=activation, ssm=ssm, **kw))


def identity_model(d, depth, coupling="gcn", residual="none", activation="identity"):
    m = make_model(coupling, residual, activation, depth=depth, d_in=d, d=d, d_out=d)
    m.params["encoder.weight"] = np.eye(d)
    m.params["encoder.bias"] = np.zeros(d)
    m.params["readout.weight"] = np.eye(d)
    m.params["readout.bias"] = np.zeros(d)
    return m


def scalar_objective(m, g, x, c):
    return float(np.sum(c * forward(m, g, x).output))


@pytest.mark.parametrize("coupling,residual", CASES)
def test_backward_matches_finite_differences(coupling, residual):
    rng = np.random.default_rng(CASES.index((coupling, residual)))
    g = generate(GeneratorSpec("erdos_renyi", n=8, p=0.4, seed=3))
    ssm = SsmConfig(0.9, 0.5, seed=2, trainable=residual == "ssm")
    m = make_model(coupling, residual, "tanh", ssm=ssm, seed=4)
    x = rng.standard_normal((8, 3))
    c = rng.standard_normal((8, 2))
    grads = backward(forward(m, g, x), c)
    names = m.trainable_names()
    coords = []
    for _ in range(20):
        k = names[rng.integers(len(names))]
        coords.append((k, tuple(int(rng.integers(s)) for s in m.params[k].shape)))
    # central differences with eps=1e-5 cannot resolve gradients far below the largest one
    global_scale = max(np.abs(v).max() for v in grads.params.values())
    eps = 1e-5
    for k, idx in coords:
        w = m.params[k]
        old = w[idx]
        w[idx] = old + eps
        up = scalar_objective(m, g, x, c)
        w[idx] = old - eps
        down = scalar_objective(m, g, x, c)
        w[idx] = old
        fd = (up - down) / (2 * eps)
        an = grads.params[k][idx]
        scale = max(abs(an), abs(fd), 1e-3 * np.abs(grads.params[k]).max(), 1e-6 * global_scale)
        assert abs(fd - an) <= 1e-5 * scale, (k, idx, fd, an)


def test_backward_input_gradient_finite_differences():
    rng = np.random.default_rng(5)
    g = generate(GeneratorSpec("erdos_renyi", n=6, p=0.5, seed=1))
    for coupling in COUPLINGS:
        m = make_model(coupling, "ssm")
        x = rng.standard_normal((6, 3))
        c = rng.standard_normal((6, 2))
        dx = backward(forward(m, g, x), c).input
        for _ in range(5):
            i, j = int(rng.integers(6)), int(rng.integers(3))
            e = np.zeros_like(x)
            e[i, j] = 1e-5
            fd = (scalar_objective(m, g, x + e, c) - scalar_objective(m, g, x - e, c)) / 2e-5
            assert abs(fd - dx[i, j]) <= 1e-6 * max(abs(fd), 1e-3)


def test_single_linear_layer_closed_form():
    g = generate(GeneratorSpec("erdos_renyi", n=6, p=0.5, seed=2))
    m = identity_model(3, 1)
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    out = forward(m, g, x).output
    hat = normalized_adjacency(g, "sym_self_loops").dense()
    _, dout = mse(out, y)
    grads = backward(forward(m, g, x), dout)
    w = m.params["layer0.weight"]
    expect = 2.0 / y.size * (hat @ x).T @ (hat @ x @ w - y)
    assert np.allclose(grads.params["layer0.weight"], expect, rtol=1e-10, atol=1e-14)


def test_zero_cotangent_gives_zero_gradients():
    m = make_model("gat", "ssm")
    x = np.random.default_rng(7).standard_normal((6, 3))
    grads = backward(forward(m, generate(GeneratorSpec("ring", n=6)), x), np.zeros((6, 2)))
    assert all(not np.any(v) for v in grads.params.values())
    assert not np.any(grads.input)
    assert set(grads.params) == set(m.params)
    assert all(grads.params[k].shape == m.params[k].shape for k in m.params)


def test_fixed_state_matrices_get_no_gradient():
    m = make_model("gcn", "ssm")
    x = np.random.default_rng(8).standard_normal((6, 3))
    grads = backward(forward(m, generate(GeneratorSpec("ring", n=6)), x), np.ones((6, 2)))
    assert not np.any(grads.params["ssm0.Lambda"]) and not np.any(grads.params["ssm0.B"])
    assert "ssm0.Lambda" not in m.trainable_names()


def test_backward_requires_forward_cache():
    with pytest.raises(UsageError):
        backward(None, np.zeros((2, 2)))


def test_relu_kink_uses_zero_subgradient():
    g = from_edge_list([(0, 1)], 2)
    m = identity_model(2, 1, activation="relu")
    m.params["layer0.weight"] = np.eye(2)
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    grads = backward(forward(m, g, x), np.ones((2, 2)))
    assert np.array_equal(grads.params["layer0.weight"], np.zeros((2, 2)))


def test_input_vjp_identity_model():
    g = generate(GeneratorSpec("ring", n=5))
    m = identity_model(3, 0)
    cot = np.random.default_rng(9).standard_normal((5, 3))
    assert np.array_equal(input_vjp(m, g, np.zeros((5, 3)), cot), cot)


def test_input_vjp_one_linear_layer():
    g = generate(GeneratorSpec("erdos_renyi", n=7, p=0.4, seed=4))
    m = identity_model(3, 1)
    m.params["layer0.weight"] = np.eye(3)
    cot = np.random.default_rng(10).standard_normal((7, 3))
    hat = normalized_adjacency(g, "sym_self_loops").dense()
    assert np.allclose(input_vjp(m, g, np.zeros((7, 3)), cot), hat.T @ cot)


@pytest.mark.parametrize("coupling,residual", CASES)
def test_input_vjp_matches_jacobian_product(coupling, residual):
    rng = np.random.default_rng(11)
    for trial in range(3):
        n = int(rng.integers(4, 10))
        g = generate(GeneratorSpec("erdos_renyi", n=n, p=0.4, seed=trial))
        m = identity_model(4, 3, coupling, residual, ["relu", "tanh"][trial % 2])
        x = rng.standard_normal((n, 4))
        states = forward(m, g, x).states
        total = np.eye(n * 4)
        for i in range(3):
            total = layer_jacobian(m, i, g, states[i]) @ total
        cot = rng.standard_normal((n, 4))
        got = vec(input_vjp(m, g, x, cot))
        assert np.abs(got - total.T @ vec(cot)).max() <= 1e-8 * max(1.0, np.abs(got).max())


def test_sensitivity_examples():
    g = from_edge_list([(0, 1)], 2)
    m = identity_model(2, 1)
    m.params["layer0.weight"] = np.eye(2)
    s = node_sensitivity(m, g, np.zeros((2, 2)), 0, 1)
    assert np.allclose(s.block, 0.5 * np.eye(2)) and np.isclose(s.measured, 0.5)
    assert s.measured <= s.bound
    m0 = identity_model(2, 0)
    assert np.isclose(node_sensitivity(m0, g, np.zeros((2, 2)), 0, 0).measured, 1.0)
    assert node_sensitivity(m0, g, np.zeros((2, 2)), 0, 1).measured == 0.0
    assert np.isnan(sensitivity_bound(make_model("gcn", "ssm"), g, 0, 1))


def test_sensitivity_ring_antipodal():
    g = generate(GeneratorSpec("ring", n=10))
    x = np.random.default_rng(12).standard_normal((10, 3))
    for seed in range(20):
        m = make_model("gcn", "none", ["relu", "tanh"][seed % 2], depth=5, seed=seed)
        s = node_sensitivity(m, g, x, 0, 5)
        assert s.measured <= s.bound
        states = forward(m, g, x).states
        total = np.eye(40)
        for i in range(5):
            total = layer_jacobian(m, i, g, states[i]) @ total
        rows = [5 + 10 * j for j in range(4)]
        cols = [0 + 10 * j for j in range(4)]
        assert np.isclose(s.measured, np.linalg.norm(total[np.ix_(rows, cols)], 2), rtol=1e-10)


def test_sensitivity_bound_random_instances():
    rng = np.random.default_rng(13)
    violations = 0
    for trial in range(100):
        n = int(rng.integers(4, 12))
        g = generate(GeneratorSpec("erdos_renyi", n=n, p=float(rng.uniform(0.2, 0.6)), seed=trial))
        depth = int(rng.integers(1, 5))
        m = make_model("gcn", "none", ["relu", "tanh", "identity"][trial % 3], depth=depth, seed=trial,
                       sigma_w=float(rng.uniform(0.5, 3.0)))
        u, v = (int(a) for a in rng.integers(n, size=2))
        s = node_sensitivity(m, g, rng.standard_normal((n, 3)), u, v)
        violations += s.measured > s.bound
    assert violations == 0


def test_losses_and_metrics_examples():
    y = np.array([[1.0], [2.0]])
    assert mse(y, y)[0] == 0.0
    assert log10_mse(y, y) == -12.0
    assert np.isclose(log10_mse(y + 1, y), 0.0)
    value, grad = cross_entropy(np.array([[10.0, -10.0]]), np.array([0]))
    assert value < 1e-8 and accuracy(np.array([[10.0, -10.0]]), np.array([0])) == 1.0
    labels = np.repeat(np.arange(5), 20)
    assert accuracy(np.tile([1.0, 0, 0, 0, 0], (100, 1)), labels) == 0.2
    assert losses_and_metrics(y, y, "log10_mse") == (-12.0, None)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((3, 2)), np.zeros(2, dtype=int))


def test_loss_gradients_finite_differences():
    rng = np.random.default_rng(14)
    logits, labels = rng.standard_normal((6, 4)), rng.integers(4, size=6)
    pred, target = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    for fn, p, t in ((cross_entropy, logits, labels), (mse, pred, target)):
        _, grad = fn(p, t)
        for i, j in [(0, 0), (3, 1), (5, 1)]:
            e = np.zeros_like(p)
            e[i, j] = 1e-6
            fd = (fn(p + e, t)[0] - fn(p - e, t)[0]) / 2e-6
            assert np.isclose(fd, grad[i, j], rtol=1e-6, atol=1e-10)


class Scalar:
    def __init__(self, w):
        self.params = {"layer0.weight": np.array([w])}

    def trainable_names(self):
        return ["layer0.weight"]


def test_adam_examples():
    cfg = TrainConfig(lr=0.1)
    model = Scalar(1.0)
    optimizer_step(model, AdamState(), GradientBundle({"layer0.weight": np.array([2.0])}, None), cfg)
    w = model.params["layer0.weight"][0]
    assert 0.0 <= 1.0 - w <= 0.1 + 1e-12
    model = Scalar(1.0)
    optimizer_step(model, AdamState(), GradientBundle({"layer0.weight": np.array([0.0])}, None), cfg)
    assert model.params["layer0.weight"][0] == 1.0
    with pytest.raises(NumericError):
        optimizer_step(model, AdamState(), GradientBundle({"layer0.weight": np.array([np.nan])}, None), cfg)


def test_adam_and_adamw_agree_without_decay():
    trajectories = []
    for opt in ("adam", "adamw"):
        model, state = Scalar(1.0), AdamState()
        cfg = TrainConfig(optimizer=opt, lr=0.05)
        path = []
        for _ in range(20):
            grad = 2 * model.params["layer0.weight"]
            optimizer_step(model, state, GradientBundle({"layer0.weight": grad}, None), cfg)
            path.append(model.params["layer0.weight"][0])
        trajectories.append(path)
    assert trajectories[0] == trajectories[1]


def test_adamw_decay_skips_state_matrices():
    m = make_model("gcn", "ssm", ssm=SsmConfig(0.9, 0.5, seed=1, trainable=True))
    zero = GradientBundle({k: np.zeros_like(v) for k, v in m.params.items()}, None)
    before = {k: v.copy() for k, v in m.params.items()}
    optimizer_step(m, AdamState(), zero, TrainConfig(optimizer="adamw", lr=0.1, weight_decay=0.5))
    assert np.allclose(m.params["layer0.weight"], 0.95 * before["layer0.weight"])
    assert np.array_equal(m.params["ssm0.Lambda"], before["ssm0.Lambda"])
    assert np.array_equal(m.params["encoder.bias"], before["encoder.bias"])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def ring_task():
    return make_ring_transfer(n_nodes=6, n_classes=3, n_samples=60, seed=1)


def ring_model(seed=0):
    task = ring_task()
    return build_model(ModelConfig(task.d_in, 8, task.d_out, 2, coupling="gcn", residual="ssm",
                                   ssm=SsmConfig(1.0, 0.5, seed=seed), seed=seed)), task


def test_train_loop_is_deterministic():
    histories = []
    for _ in range(2):
        m, task = ring_model()
        histories.append(train_loop(m, task, TrainConfig(epochs=6, patience=10, batch_size=16, seed=3)))
    assert histories[0].to_csv() == histories[1].to_csv()
    assert histories[0].summary() == histories[1].summary()


def test_train_loop_zero_lr_is_flat():
    m, task = ring_model()
    before = {k: v.copy() for k, v in m.params.items()}
    h = train_loop(m, task, TrainConfig(lr=0.0, epochs=5, batch_size=16))
    assert len({r["val_metric"] for r in h.rows}) == 1
    assert len({r["test_metric"] for r in h.rows}) == 1
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_train_loop_restores_best_and_stops_early():
    m, task = ring_model()
    h = train_loop(m, task, TrainConfig(lr=0.01, epochs=40, patience=3, batch_size=16))
    assert h.stopped_early or len(h.rows) == 40
    best = h.rows[h.best_epoch - 1]
    assert best["val_metric"] == h.best_val
    from gnnssm.train import evaluate
    assert evaluate(m, make_batches(task, "val"), "accuracy") == h.best_val
    assert evaluate(m, make_batches(task, "test"), "accuracy") == h.test_at_best
    header = h.to_csv().splitlines()[0].split(",")
    assert header == ["epoch", "train_loss", "val_metric", "test_metric",
                      "grad_norm_first_layer", "grad_norm_last_layer"]


def test_batches_cover_split_once():
    task = ring_task()
    batches = make_batches(task, "train", 7)
    assert sum(len(b.target) for b in batches) == len(task.splits["train"])
    m, _ = ring_model()
    value, grads, _ = batch_loss(m, batches[0], "cross_entropy")
    assert np.isfinite(value)
    grads.check_finite()
