import numpy as np
import pytest

from gcnnseg import layers as L
from gcnnseg.equivcheck import gradient_check, network_equivariance
from gcnnseg.groups import P1, P4, P4M
from gcnnseg.model import (
    ArchitectureConfig,
    ConfigurationError,
    build,
    count_parameters,
    is_valid_size,
    load_model,
    matched_width,
    nearest_valid_size,
    save_model,
    size_chain,
    softmax,
)


@pytest.mark.parametrize("base, group, expected", [(16, P1, 16), (16, P4, 8), (64, P4M, 23), (1, P4M, 1)])
def test_matched_width(base, group, expected):
    assert matched_width(base, group) == expected


def test_matched_width_rejects_zero():
    with pytest.raises(ValueError):
        matched_width(0, P4)


def test_single_lifting_conv_parameter_count():
    layer = L.LiftConv(3, 4, P4M)
    assert sum(v.size for v in layer.params.values()) == 3 * 4 * 9 + 4 == 112


@pytest.mark.parametrize("base", [16, 32])
@pytest.mark.parametrize("group", ["p4", "p4m"])
def test_parameter_budget_matched(base, group):
    ref = count_parameters(build(ArchitectureConfig(group="p1", base_width=base)))
    other = count_parameters(build(ArchitectureConfig(group=group, base_width=base)))
    assert abs(other - ref) / ref <= 0.10


def test_doubling_width_roughly_quadruples():
    small = count_parameters(build(ArchitectureConfig(group="p1", base_width=8, depth=2)))
    large = count_parameters(build(ArchitectureConfig(group="p1", base_width=16, depth=2)))
    assert 3.5 < large / small < 4.1


def test_size_chain_and_validity():
    assert size_chain(97, 4) == [97, 49, 25, 13, 7]
    assert is_valid_size(97, 4) and is_valid_size(33, 2)
    assert not is_valid_size(96, 4) and not is_valid_size(99, 4)
    assert nearest_valid_size(100, 4) == 97
    assert nearest_valid_size(105, 4) == 113
    for n in range(2, 200):
        m = nearest_valid_size(n, 3)
        assert is_valid_size(m, 3) and all(s % 2 for s in size_chain(m, 3)[:-1])


def test_depth4_output_size_and_bottleneck():
    model = build(ArchitectureConfig(group="p4", depth=4, base_width=2), dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 3, 97, 97))
    assert model.forward(x).shape == (1, 2, 97, 97)
    assert model.layers["bottleneck.conv1"]._cache is not None


def test_depth1_p1_is_plain_unet():
    model = build(ArchitectureConfig(group="p1", depth=1, base_width=4))
    names = list(model.layers)
    assert sum(n.endswith("pool") for n in names) == 1
    assert sum(n.endswith(".up") for n in names) == 1
    assert model.forward(np.zeros((2, 3, 5, 5), np.float32)).shape == (2, 2, 5, 5)


def test_invalid_input_size_names_nearest():
    model = build(ArchitectureConfig(group="p1", depth=2, base_width=2))
    with pytest.raises(ConfigurationError, match="nearest valid size is 13"):
        model.forward(np.zeros((1, 3, 12, 12), np.float32))
    with pytest.raises(ConfigurationError):
        model.forward(np.zeros((1, 1, 13, 13), np.float32))


def test_invalid_config():
    with pytest.raises(ConfigurationError):
        ArchitectureConfig(depth=0)
    with pytest.raises(ValueError):
        ArchitectureConfig(group="p6")


def test_build_is_deterministic():
    a = build(ArchitectureConfig(group="p4m", depth=2, base_width=4), seed=3)
    b = build(ArchitectureConfig(group="p4m", depth=2, base_width=4), seed=3)
    c = build(ArchitectureConfig(group="p4m", depth=2, base_width=4), seed=4)
    for k, v in a.parameters().items():
        np.testing.assert_array_equal(v, b.parameters()[k])
    assert any(not np.array_equal(v, c.parameters()[k]) for k, v in a.parameters().items())


def test_zero_weights_give_uniform_softmax():
    model = build(ArchitectureConfig(group="p4", depth=2, base_width=4), dtype=np.float64)
    for k, v in model.parameters().items():
        model.set_parameter(k, np.zeros_like(v))
    x = np.random.default_rng(1).standard_normal((2, 3, 13, 13))
    logits = model.forward(x)
    np.testing.assert_array_equal(logits, 0)
    np.testing.assert_allclose(softmax(logits), 0.5)


@pytest.mark.parametrize("group", ["p1", "p4m"])
@pytest.mark.parametrize("skips", [True, False])
def test_end_to_end_gradient(group, skips):
    cfg = ArchitectureConfig(group=group, depth=2, base_width=2, skip_connections=skips)
    model = build(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 13, 13))
    params = model.parameters()
    arrays = {**params, "__input__": x}

    def forward():
        return model.forward(x, train=True)

    def backward(d):
        grads = dict(model.backward(d))
        grads["__input__"] = model.input_grad
        return grads

    assert gradient_check(forward, backward, arrays, rng, probes=3) < 1e-4


def test_end_to_end_gradient_eval_mode():
    # with frozen statistics the biases in front of batch norm get nonzero gradients
    model = build(ArchitectureConfig(group="p4", depth=2, base_width=2), seed=1, dtype=np.float64)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 13, 13))
    for layer in model.layers.values():
        if hasattr(layer, "state"):
            layer.state.running_mean[:] = rng.standard_normal(layer.state.running_mean.shape)
            layer.state.running_var[:] = rng.uniform(0.5, 2, layer.state.running_var.shape)
    biases = {k: v for k, v in model.parameters().items() if k.endswith("bias")}
    grads = {}

    def backward(d):
        grads.update(model.backward(d))
        return grads

    err = gradient_check(lambda: model.forward(x, train=False), backward, biases, rng, probes=4)
    assert err < 1e-4
    assert all(np.abs(grads[k]).max() > 1e-6 for k in biases)


@pytest.mark.parametrize("group", ["p4", "p4m"])
def test_network_equivariance_f64(group):
    model = build(ArchitectureConfig(group=group, depth=2, base_width=4), seed=1, dtype=np.float64)
    res = network_equivariance(model, size=13)
    assert res.passed and res.max_error < 1e-10


def test_network_equivariance_f32_depth4():
    model = build(ArchitectureConfig(group="p4m", depth=4, base_width=4), seed=2, dtype=np.float32)
    res = network_equivariance(model, size=33)
    assert res.max_error < 1e-4


def test_p1_network_is_not_equivariant():
    model = build(ArchitectureConfig(group="p1", depth=2, base_width=4), seed=1, dtype=np.float64)
    x = np.random.default_rng(3).standard_normal((1, 3, 13, 13))
    base = model.forward(x)
    errs = [np.abs(model.forward(L.apply_input_transform(g, x)) - L.apply_input_transform(g, base)).max()
            for g in P4M.elements[1:]]
    assert min(errs) > 1e-3


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    model = build(ArchitectureConfig(group="p4m", depth=2, base_width=4), seed=7, dtype=dtype)
    x = np.random.default_rng(2).standard_normal((2, 3, 13, 13)).astype(dtype)
    model.forward(x, train=True)  # move running statistics away from their initial values
    path = tmp_path / "m.gunt"
    save_model(path, model)
    back = load_model(path)
    assert back.config == model.config and back.dtype == model.dtype
    np.testing.assert_array_equal(back.forward(x), model.forward(x))
    for k, v in model.buffers().items():
        np.testing.assert_array_equal(back.buffers()[k], v)
