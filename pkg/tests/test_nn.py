import itertools

import numpy as np
import pytest

from gnnssm.graph import GeneratorSpec, from_edge_list, generate, k_hop_adjacency, normalized_adjacency
from gnnssm.nn import (
    COUPLINGS,
    RESIDUALS,
    CapabilityError,
    ConfigError,
    LayerParams,
    ModelConfig,
    SsmConfig,
    attention_weights,
    build_model,
    checkpoint_bytes,
    coupling_jacobian,
    forward,
    gat_forward,
    gcn_forward,
    khop_coupling_forward,
    layer_jacobian,
    layer_jvp,
    layer_step,
    load_checkpoint,
    model_forward,
    model_from_bytes,
    save_checkpoint,
    ssm_step,
    unvec,
    vec,
)
from gnnssm.spectral import eigenvalue_moduli, operator_norm, singular_values, spectral_radius

EDGE = from_edge_list([(0, 1)], 2)
RING6 = generate(GeneratorSpec("ring", n=6))


def small_model(coupling="gcn", residual="ssm", activation="tanh", depth=3, d=4, **kw):
    ssm = kw.pop("ssm", SsmConfig(0.9, 0.4, seed=2))
    return build_model(ModelConfig(3, d, 2, depth, coupling=coupling, residual=residual,
                                   activation=activation, ssm=ssm, **kw))


def test_gcn_forward_examples():
    hat = normalized_adjacency(EDGE, "sym_self_loops")
    w = np.random.default_rng(0).standard_normal((2, 3))
    for act in ("relu", "tanh"):
        assert np.array_equal(gcn_forward(hat, np.zeros((2, 2)), LayerParams(w, act)), np.zeros((2, 3)))
    out = gcn_forward(hat, np.eye(2), LayerParams(np.eye(2), "identity"))
    assert np.allclose(out, [[0.5, 0.5], [0.5, 0.5]])
    out = gcn_forward(hat, np.ones((2, 2)), LayerParams(-np.eye(2), "relu"))
    assert np.array_equal(out, np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        gcn_forward(hat, np.ones((2, 3)), LayerParams(np.eye(2)))


def test_gat_forward_examples():
    g = generate(GeneratorSpec("star", n=4))
    h = np.random.default_rng(1).standard_normal((4, 3))
    p = LayerParams(np.eye(3), "identity", np.zeros(3), np.zeros(3))
    a = (g.dense_adjacency() + np.eye(4))
    mean_agg = (a / a.sum(axis=1, keepdims=True)) @ h
    assert np.allclose(gat_forward(g, h, p), mean_agg)
    assert np.array_equal(gat_forward(g, np.zeros((4, 3)), LayerParams(np.eye(3), "tanh", np.ones(3), np.ones(3))),
                          np.zeros((4, 3)))
    single = from_edge_list([], 1)
    w = np.array([[2.0, -1.0]])
    assert np.allclose(gat_forward(single, np.array([[0.3]]), LayerParams(w, "tanh", np.ones(2), np.ones(2))),
                       np.tanh([[0.6, -0.3]]))
    with pytest.raises(ConfigError):
        gat_forward(g, np.ones((4, 2)), p)


def test_gat_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    for seed in range(10):
        g = generate(GeneratorSpec("erdos_renyi", n=15, p=0.3, seed=seed))
        p = LayerParams(rng.standard_normal((4, 5)), "relu", rng.standard_normal(5) * 3, rng.standard_normal(5) * 3)
        att = attention_weights(g, rng.standard_normal((15, 4)), p)
        assert np.abs(np.asarray(att.sum(axis=1)).ravel() - 1).max() <= 1e-12
        pattern = (g.dense_adjacency() + np.eye(15)) > 0
        assert np.all((att.toarray() > 0) == pattern)


def test_khop_forward_examples():
    h = np.random.default_rng(3).standard_normal((6, 2))
    p = LayerParams(np.eye(2), "identity")
    assert np.allclose(khop_coupling_forward(RING6, h, p, 1), gcn_forward(normalized_adjacency(RING6, "sym"), h, p))
    out = khop_coupling_forward(RING6, h, p, 3)
    assert np.allclose(out, h[[3, 4, 5, 0, 1, 2]])
    assert np.array_equal(khop_coupling_forward(RING6, h, p, 4), np.zeros((6, 2)))


def test_ssm_step_examples():
    h = np.random.default_rng(4).standard_normal((3, 2))
    assert np.array_equal(ssm_step(np.eye(2), np.eye(2), h, np.zeros((3, 2))), h)
    assert np.allclose(ssm_step(0.5 * np.eye(2), np.eye(2), np.array([[2.0, 0.0]]), np.zeros((1, 2))), [[1.0, 0.0]])
    f = np.random.default_rng(5).standard_normal((3, 2))
    assert np.array_equal(ssm_step(np.zeros((2, 2)), np.eye(2), h, f), f)
    lam = np.array([[0.0, 1.0], [2.0, 0.0]])
    assert np.allclose(ssm_step(lam, np.eye(2), h, np.zeros((3, 2)))[0], lam @ h[0])
    with pytest.raises(ConfigError):
        ssm_step(np.eye(3), np.eye(2), h, f)


def test_ssm_config_materialize():
    cfg = SsmConfig(0.8, 0.1, seed=3)
    (lam, b), = cfg.materialize(6)
    assert abs(spectral_radius(lam) - 0.8) <= 1e-8
    assert abs(spectral_radius(b) - 0.1) <= 1e-8
    pairs = SsmConfig(1.0, 0.1, seed=3, shared=False).materialize(6, 4)
    assert len(pairs) == 4 and not np.allclose(pairs[0][0], pairs[1][0])
    (_, b), = SsmConfig(1.0, 0.1, use_input_matrix=False).materialize(5)
    assert np.array_equal(b, np.eye(5))
    with pytest.raises(ConfigError):
        SsmConfig(-1.0)


def test_model_config_validation():
    with pytest.raises(ConfigError, match="coupling"):
        ModelConfig(3, 4, 2, 2, coupling="gin")
    with pytest.raises(ConfigError, match="residual"):
        ModelConfig(3, 4, 2, 2, residual="gated")
    with pytest.raises(ConfigError):
        ModelConfig(0, 4, 2, 2)
    m = small_model()
    with pytest.raises(ConfigError):
        forward(m, RING6, np.ones((6, 5)))
    with pytest.raises(ConfigError):
        forward(m, RING6, np.ones((5, 3)))


def test_depth_zero_is_readout_of_encoder():
    m = small_model(depth=0)
    x = np.random.default_rng(6).standard_normal((6, 3))
    out, trace = model_forward(m, RING6, x, trace=True)
    enc = x @ m.params["encoder.weight"] + m.params["encoder.bias"]
    assert np.allclose(out, enc @ m.params["readout.weight"] + m.params["readout.bias"])
    assert len(trace) == 1


def test_zero_state_radius_matches_memoryless():
    x = np.random.default_rng(7).standard_normal((6, 3))
    a = small_model(residual="ssm", ssm=SsmConfig(0.0, 1.0, use_input_matrix=False))
    b = small_model(residual="none")
    b.params.update({k: v for k, v in a.params.items() if not k.startswith("ssm")})
    assert np.allclose(model_forward(a, RING6, x)[0], model_forward(b, RING6, x)[0])


def test_trace_holds_every_state():
    m = small_model(depth=4)
    x = np.random.default_rng(8).standard_normal((6, 3))
    out, trace = model_forward(m, RING6, x, trace=True)
    assert len(trace) == 5 and all(h.shape == (6, 4) for h in trace)
    assert model_forward(m, RING6, x)[1] is None


@pytest.mark.parametrize("coupling,residual", list(itertools.product(COUPLINGS, RESIDUALS)))
def test_zero_is_fixed_point(coupling, residual):
    for act in ("relu", "tanh"):
        m = small_model(coupling, residual, act)
        for i in range(m.depth):
            out, _ = layer_step(m, RING6, i, np.zeros((6, 4)))
            assert np.array_equal(out, np.zeros((6, 4)))


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    g = generate(GeneratorSpec("erdos_renyi", n=9, p=0.4, seed=2))
    x = rng.standard_normal((9, 3))
    perm = rng.permutation(9)
    inv = np.argsort(perm)
    gp = from_edge_list(inv[g.edges], 9)
    for coupling in COUPLINGS:
        m = small_model(coupling, "ssm")
        out = model_forward(m, g, x)[0]
        out_p = model_forward(m, gp, x[perm])[0]
        assert np.allclose(out_p, out[perm], atol=1e-12)


def test_graph_readout_pools_per_graph():
    m = small_model(readout="graph")
    x = np.random.default_rng(10).standard_normal((6, 3))
    out = forward(m, RING6, x, segment=np.array([0, 0, 0, 1, 1, 1])).output
    h = forward(m, RING6, x).states[-1]
    wo, bo = m.params["readout.weight"], m.params["readout.bias"]
    assert np.allclose(out[0], h[:3].mean(axis=0) @ wo + bo)
    assert np.allclose(out[1], h[3:].mean(axis=0) @ wo + bo)


def test_layer_jacobian_linear_gcn_is_kronecker():
    g = generate(GeneratorSpec("erdos_renyi", n=5, p=0.5, seed=1))
    m = small_model("gcn", "none", "identity", d=3)
    h = np.random.default_rng(11).standard_normal((5, 3))
    jac = layer_jacobian(m, 1, g, h)
    w = m.params["layer1.weight"]
    assert np.allclose(jac, np.kron(w.T, normalized_adjacency(g, "sym_self_loops").dense()), atol=1e-15)


def test_layer_jacobian_inactive_relu_is_state_path():
    m = small_model("gcn", "ssm", "relu", d=3)
    m.params["layer0.weight"] = -np.abs(m.params["layer0.weight"])
    h = np.abs(np.random.default_rng(12).standard_normal((6, 3)))
    jac = layer_jacobian(m, 0, RING6, h)
    lam = m.params["ssm0.Lambda"]
    assert np.allclose(jac, np.kron(lam, np.eye(6)))
    expect = np.sort(np.tile(eigenvalue_moduli(lam), 6))[::-1]
    assert np.allclose(eigenvalue_moduli(jac), expect)


@pytest.mark.parametrize("coupling,residual", list(itertools.product(COUPLINGS, RESIDUALS)))
def test_layer_jacobian_finite_differences(coupling, residual):
    rng = np.random.default_rng(13)
    g = generate(GeneratorSpec("erdos_renyi", n=7, p=0.4, seed=5))
    m = small_model(coupling, residual, "tanh")
    h = rng.standard_normal((7, 4))
    jac = layer_jacobian(m, 1, g, h)
    eps = 1e-5
    for col in rng.choice(28, size=10, replace=False):
        e = np.zeros(28)
        e[col] = eps
        step = unvec(e, 7, 4)
        fd = (vec(layer_step(m, g, 1, h + step)[0]) - vec(layer_step(m, g, 1, h - step)[0])) / (2 * eps)
        assert np.linalg.norm(fd - jac[:, col]) <= 1e-5 * max(np.linalg.norm(jac[:, col]), 1e-8)


@pytest.mark.parametrize("coupling", COUPLINGS)
def test_layer_jvp_matches_jacobian(coupling):
    rng = np.random.default_rng(14)
    m = small_model(coupling, "ssm")
    h = rng.standard_normal((6, 4))
    _, cache = layer_step(m, RING6, 2, h)
    v = rng.standard_normal((6, 4))
    assert np.allclose(vec(layer_jvp(m, RING6, 2, h, cache, v)), layer_jacobian(m, 2, RING6, h) @ vec(v))


def test_layer_jacobian_guard():
    g = generate(GeneratorSpec("ring", n=600))
    m = small_model(d=4)
    with pytest.raises(CapabilityError):
        layer_jacobian(m, 0, g, np.ones((600, 4)))


def test_ssm_layer_jacobian_norm_bound():
    rng = np.random.default_rng(15)
    for trial in range(50):
        coupling = COUPLINGS[trial % 3]
        g = generate(GeneratorSpec("erdos_renyi", n=int(rng.integers(3, 9)), p=0.5, seed=trial))
        ssm = SsmConfig(float(rng.uniform(0.1, 1.2)), float(rng.uniform(0.05, 1.0)), seed=trial)
        m = small_model(coupling, "ssm", ["relu", "tanh"][trial % 2], ssm=ssm, seed=trial, sigma_w=float(rng.uniform(0.5, 2)))
        h = rng.standard_normal((g.n, 4))
        jac = layer_jacobian(m, 0, g, h)
        lam, b = m.state_matrices(0)
        gamma = coupling_jacobian(m, 0, g, h)
        norm = operator_norm(lambda v: jac @ v, jac.shape[1], adjoint=lambda w: jac.T @ w, seed=trial).value
        assert np.isclose(norm, singular_values(jac)[0], rtol=1e-6)
        bound = singular_values(lam)[0] + singular_values(b)[0] * singular_values(gamma)[0]
        assert norm <= bound * (1 + 1e-9)


def test_shared_weights_share_parameters():
    m = small_model(depth=5, share_weights=True)
    assert [k for k in m.params if k.startswith("layer")] == ["layer0.weight"]
    assert m.layer_params(4).weight is m.params["layer0.weight"]


def test_weight_radius_and_init_scale():
    m = build_model(ModelConfig(8, 16, 3, 4, residual="none", weight_radius=1.0, seed=1))
    for w in m.coupling_weights():
        assert abs(spectral_radius(w) - 1.0) <= 1e-8
    big = build_model(ModelConfig(8, 400, 3, 1, sigma_w=2.0, seed=1))
    w = big.params["layer0.weight"]
    assert abs(w.var() * 400 / 4.0 - 1) < 0.05


def test_checkpoint_round_trip(tmp_path):
    for coupling in COUPLINGS:
        m = small_model(coupling, "ssm", ssm=SsmConfig(0.7, 0.2, seed=4, shared=False))
        path = tmp_path / f"{coupling}.bin"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.cfg == m.cfg
        assert list(back.params) == list(m.params)
        for k in m.params:
            assert back.params[k].tobytes() == m.params[k].tobytes()
        assert checkpoint_bytes(back) == path.read_bytes()
    with pytest.raises(ConfigError):
        model_from_bytes(b"NOPE" + bytes(20))
