import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stflow import autodiff as ad
from stflow.autodiff import Tensor, finite_difference_check
from stflow.errors import ParameterError, ShapeError
from stflow.graph import WeightedAdjacency, normalize
from stflow.stgcn import (
    STGCN,
    STGCNConfig,
    forward,
    init_params,
    output_layer,
    param_count,
    param_shapes,
    spatial_graph_conv,
    st_conv_block,
    temporal_gated_conv,
)

FD_TOL = 1e-5


def random_operator(rng, n, density=0.6):
    w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < density), 1)
    return normalize(WeightedAdjacency(w + w.T, 1.0, 0.0)).p


def small_config(n=4, m=7, kt=2, h=1, channels=(1, 4, 3, 4), blocks=1):
    return STGCNConfig(n_nodes=n, history_steps=m, horizon_steps=h, temporal_kernel=kt,
                       channels=channels, n_blocks=blocks)


def randomize(model, rng, scale=0.5):
    """Nonzero biases so every code path carries signal."""
    for t in model.parameters():
        t.data[...] = scale * rng.standard_normal(t.shape)


# -- layers ---------------------------------------------------------------

def test_temporal_zero_gate_halves_convolution(rng):
    x = Tensor(rng.standard_normal((2, 5, 3, 2)))
    k = rng.standard_normal((3, 2, 8))
    k[:, :, 4:] = 0
    out = temporal_gated_conv(x, Tensor(k), Tensor(np.zeros(8)))
    plain = ad.conv1d_time(x, Tensor(k[:, :, :4]), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.5 * plain.data, atol=1e-15)


def test_temporal_full_span_gives_length_one(rng):
    out = temporal_gated_conv(Tensor(rng.standard_normal((1, 4, 2, 1))),
                              Tensor(rng.standard_normal((4, 1, 2))), Tensor(np.zeros(2)))
    assert out.shape == (1, 1, 2, 1)


def test_temporal_fd(rng):
    x = Tensor(rng.standard_normal((2, 5, 3, 2)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 2, 6)), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 3, 3)))
    assert finite_difference_check(lambda: ad.sum(temporal_gated_conv(x, k, b) * w), [x, k, b]) < FD_TOL


def test_spatial_identity_passthrough(rng):
    x = np.abs(rng.standard_normal((2, 3, 4, 5)))
    out = spatial_graph_conv(Tensor(x), np.eye(4), Tensor(np.eye(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, x)


def test_spatial_spreads_between_nodes():
    x = Tensor(np.array([2.0, 4.0]).reshape(1, 1, 2, 1))
    out = spatial_graph_conv(x, np.full((2, 2), 0.5), Tensor([[1.0]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data.reshape(-1), [3.0, 3.0])


def test_spatial_node_mismatch():
    with pytest.raises(ShapeError):
        spatial_graph_conv(Tensor(np.zeros((1, 1, 3, 1))), np.eye(2), Tensor([[1.0]]), Tensor([0.0]))


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_spatial_equivariance(n, rng):
    x = rng.standard_normal((2, 3, n, 2))
    p = random_operator(rng, n)
    theta, bias = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal(3))
    base = spatial_graph_conv(Tensor(x), p, theta, bias).data
    for perm in itertools.permutations(range(n)):
        idx = np.array(perm)
        out = spatial_graph_conv(Tensor(x[:, :, idx]), p[np.ix_(idx, idx)], theta, bias).data
        np.testing.assert_allclose(out, base[:, :, idx], atol=1e-12)


def test_spatial_fd(rng):
    x = Tensor(rng.standard_normal((2, 2, 3, 2)), requires_grad=True)
    theta = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    bias = Tensor(rng.standard_normal(3), requires_grad=True)
    p = random_operator(rng, 3)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    f = lambda: ad.sum(spatial_graph_conv(x, p, theta, bias) * w)  # noqa: E731
    assert finite_difference_check(f, [x, theta, bias]) < FD_TOL


def test_block_default_length(rng):
    cfg = STGCNConfig(n_nodes=3)
    params = init_params(cfg, seed=1)
    out = st_conv_block(Tensor(rng.standard_normal((1, 12, 3, 1))), random_operator(rng, 3), params)
    assert out.shape == (1, 8, 3, 32)


def test_block_minimal_length(rng):
    cfg = small_config(n=3, m=5, kt=3)
    out = st_conv_block(Tensor(rng.standard_normal((2, 5, 3, 1))), random_operator(rng, 3),
                        init_params(cfg))
    assert out.shape[1] == 1


def test_block_fd(rng):
    cfg = small_config(n=4, m=7, kt=2)
    model = STGCN(cfg)
    randomize(model, rng)
    x = Tensor(rng.standard_normal((2, 7, 4, 1)))
    p = random_operator(rng, 4)
    w = Tensor(rng.standard_normal((2, 5, 4, 4)))
    block = [v for k, v in model.params.items() if k.startswith("block0")]
    f = lambda: ad.sum(st_conv_block(x, p, model.params) * w)  # noqa: E731
    assert finite_difference_check(f, block) < FD_TOL


def test_output_layer_shape_and_mismatch(rng):
    cfg = small_config(h=1)
    params = init_params(cfg)
    out = output_layer(Tensor(rng.standard_normal((3, cfg.remaining_steps, 4, 4))), params)
    assert out.shape == (3, 1, 4)
    with pytest.raises(ShapeError):
        output_layer(Tensor(rng.standard_normal((3, cfg.remaining_steps + 1, 4, 4))), params)


def test_zero_parameters_zero_prediction(rng):
    model = STGCN(small_config(h=2))
    model.load_vector(np.zeros(param_count(model.config)))
    pred = model.predict(rng.standard_normal((3, 7, 4, 1)) * 100, random_operator(rng, 4))
    assert pred.shape == (3, 2, 4) and not pred.any()


# -- whole model ----------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_forward_equivariance(n, rng):
    cfg = small_config(n=n, m=7, kt=2, h=2)
    model = STGCN(cfg)
    randomize(model, rng)
    x = rng.standard_normal((2, 7, n, 1))
    p = random_operator(rng, n)
    base = model.predict(x, p)
    for _ in range(10):
        idx = rng.permutation(n)
        out = model.predict(x[:, :, idx], p[np.ix_(idx, idx)])
        np.testing.assert_allclose(out, base[:, :, idx], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 16), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_time_length_bookkeeping(m, kt, blocks, h):
    remaining = m - blocks * 2 * (kt - 1)
    if remaining < 1:
        with pytest.raises(ParameterError):
            small_config(n=2, m=m, kt=kt, blocks=blocks, h=h)
        return
    cfg = small_config(n=2, m=m, kt=kt, blocks=blocks, h=h, channels=(1, 2, 2, 2))
    assert cfg.remaining_steps == remaining
    params = init_params(cfg)
    x = Tensor(np.ones((1, m, 2, 1)))
    for k in range(blocks):
        x = st_conv_block(x, np.eye(2), params, k)
        assert x.shape[1] == m - (k + 1) * 2 * (kt - 1)
    assert output_layer(x, params).shape == (1, h, 2)


def test_batch_consistency(rng):
    cfg = small_config(n=5, m=9, kt=3, h=2)
    model = STGCN(cfg, seed=3)
    randomize(model, rng)
    x = rng.standard_normal((6, 9, 5, 1))
    p = random_operator(rng, 5)
    batch = model.predict(x, p)
    for i in range(6):
        np.testing.assert_allclose(batch[i:i + 1], model.predict(x[i:i + 1], p), atol=1e-12)


def test_duplicate_nodes_predict_alike(rng):
    model = STGCN(small_config(n=3))
    randomize(model, rng)
    x = rng.standard_normal((2, 7, 3, 1))
    x[:, :, 1] = x[:, :, 0]
    w = np.array([[0, 0.4, 0.6], [0.4, 0, 0.6], [0.6, 0.6, 0]])
    p = normalize(WeightedAdjacency(w, 1.0, 0.0)).p
    pred = model.predict(x, p)
    np.testing.assert_allclose(pred[:, :, 0], pred[:, :, 1], atol=1e-13)


def test_full_model_fd(rng):
    model = STGCN(small_config(n=4, m=7, kt=2))
    randomize(model, rng)
    x = Tensor(rng.standard_normal((1, 7, 4, 1)))
    y = Tensor(rng.standard_normal((1, 1, 4)))
    p = random_operator(rng, 4)
    err = finite_difference_check(lambda: ad.mse_loss(model(x, p), y), model.parameters())
    assert err < FD_TOL


def test_input_shape_error_names_layer(rng):
    model = STGCN(small_config())
    with pytest.raises(ShapeError, match="input"):
        model(rng.standard_normal((1, 6, 4, 1)), np.eye(4))
    with pytest.raises(ShapeError, match="block0"):
        model(rng.standard_normal((1, 7, 4, 1)), np.eye(3))


def test_forward_bit_identical(rng):
    model = STGCN(STGCNConfig(n_nodes=6), seed=5)
    x = rng.standard_normal((4, 12, 6, 1))
    p = random_operator(rng, 6)
    assert model.predict(x, p).tobytes() == model.predict(x, p).tobytes()


def test_float32_mode(rng):
    model = STGCN(small_config(), dtype=np.float32)
    out = model(rng.standard_normal((2, 7, 4, 1)), random_operator(rng, 4))
    assert out.dtype == np.float32


# -- parameters -----------------------------------------------------------

def test_default_parameter_count():
    cfg = STGCNConfig(n_nodes=1475)
    # 3*1*64+64, 32*16+16, 3*16*64+64, 8*32*64+64, 32*1+1
    assert param_count(cfg) == 256 + 528 + 3136 + 16448 + 33 == 20401
    assert param_count(STGCNConfig(n_nodes=10)) == 20401


def test_param_shapes_order():
    names = list(param_shapes(STGCNConfig(n_nodes=2, n_blocks=2)))
    assert names[0] == "block0.temporal1.kernel" and names[6] == "block1.temporal1.kernel"
    assert names[-1] == "output.fc.bias"
    shapes = param_shapes(STGCNConfig(n_nodes=2, n_blocks=2))
    assert shapes["block1.temporal1.kernel"] == (3, 32, 64)
    assert shapes["output.temporal.kernel"] == (4, 32, 64)


def test_init_deterministic():
    a = STGCN(STGCNConfig(n_nodes=3), seed=11).to_vector()
    b = STGCN(STGCNConfig(n_nodes=3), seed=11).to_vector()
    c = STGCN(STGCNConfig(n_nodes=3), seed=12).to_vector()
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_init_distribution():
    cfg = STGCNConfig(n_nodes=3, channels=(1, 64, 64, 64))
    params = init_params(cfg, seed=0)
    for name, t in params.items():
        assert t.requires_grad
        if name.endswith("bias"):
            assert not t.data.any()
            continue
        shape = t.shape
        fan_in, fan_out = (shape[0] * shape[1], shape[0] * shape[2]) if len(shape) == 3 else shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(t.data).max() <= bound
        sigma = bound / np.sqrt(3.0) / np.sqrt(t.data.size)
        assert abs(t.data.mean()) < 3 * sigma


def test_vector_round_trip(rng):
    model = STGCN(small_config())
    vec = rng.standard_normal(param_count(model.config))
    model.load_vector(vec)
    np.testing.assert_array_equal(model.to_vector(), vec)
    with pytest.raises(ShapeError):
        model.load_vector(vec[:-1])


def test_snapshot_restore(rng):
    model = STGCN(small_config())
    snap = model.snapshot()
    before = model.to_vector()
    randomize(model, rng)
    model.restore(snap)
    np.testing.assert_array_equal(model.to_vector(), before)


@pytest.mark.parametrize("kwargs", [
    dict(channels=(1, 0, 2, 2)), dict(horizon_steps=0), dict(n_nodes=0),
    dict(history_steps=4, temporal_kernel=3), dict(channels=(1, 2, 3)),
])
def test_bad_config(kwargs):
    base = dict(n_nodes=2)
    base.update(kwargs)
    with pytest.raises(ParameterError):
        STGCNConfig(**base)


# -- higher spatial order -------------------------------------------------

def test_chebyshev_terms_hand_example():
    # K = 3 with scalar weights: out = relu(a*x + b*p x + c*(2 p p x - x))
    p = np.full((2, 2), 0.5)
    x = Tensor(np.array([2.0, 4.0]).reshape(1, 1, 2, 1))
    theta = [Tensor([[1.0]]), Tensor([[10.0]]), Tensor([[100.0]])]
    out = spatial_graph_conv(x, p, theta, Tensor([0.0])).data.reshape(-1)
    px = np.array([3.0, 3.0])
    expected = np.array([2.0, 4.0]) + 10 * px + 100 * (2 * px - np.array([2.0, 4.0]))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_order_one_list_matches_plain(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 2)))
    p = random_operator(rng, 4)
    theta, bias = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal(3))
    # a two-term list with a zero self term reduces to the single-operator layer
    two = spatial_graph_conv(x, p, [Tensor(np.zeros((2, 3))), theta], bias).data
    np.testing.assert_allclose(two, spatial_graph_conv(x, p, theta, bias).data, atol=1e-14)


def test_higher_order_parameters():
    cfg = STGCNConfig(n_nodes=3, spatial_order=3)
    shapes = param_shapes(cfg)
    assert [k for k in shapes if ".spatial." in k] == [
        "block0.spatial.theta0", "block0.spatial.theta1", "block0.spatial.theta2", "block0.spatial.bias"]
    assert param_count(cfg) == 20401 + 2 * 32 * 16
    with pytest.raises(ParameterError):
        STGCNConfig(n_nodes=3, spatial_order=0)


def test_higher_order_full_model_fd_and_equivariance(rng):
    cfg = small_config(n=4, m=7, kt=2)
    cfg = STGCNConfig(**{**cfg.as_dict(), "spatial_order": 3})
    model = STGCN(cfg)
    randomize(model, rng)
    x = rng.standard_normal((1, 7, 4, 1))
    y = Tensor(rng.standard_normal((1, 1, 4)))
    p = random_operator(rng, 4)
    assert finite_difference_check(lambda: ad.mse_loss(model(x, p), y), model.parameters()) < FD_TOL
    base = model.predict(x, p)
    idx = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(model.predict(x[:, :, idx], p[np.ix_(idx, idx)]), base[:, :, idx], atol=1e-9)
