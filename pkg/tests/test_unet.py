import numpy as np
import pytest

from gradmask import tensor as T
from gradmask.unet import ConfigError, UNet, UNetConfig, build


def conv_params(cin, cout):
    return cout * cin * 9 + cout


def architecture_count(cin=3, base=8, depth=2, cout=3):
    total, c = 0, cin
    for level in range(depth):
        total += conv_params(c, base * 2 ** level) + conv_params(base * 2 ** level, base * 2 ** level)
        c = base * 2 ** level
    total += conv_params(c, base * 2 ** depth) + conv_params(base * 2 ** depth, base * 2 ** depth)
    c = base * 2 ** depth
    for level in reversed(range(depth)):
        out = base * 2 ** level
        total += conv_params(c + out, out) + conv_params(out, out)
        c = out
    return total + conv_params(base, cout)


def test_default_parameter_count_pinned():
    _, reg = build()
    assert architecture_count() == 29971
    assert reg.total_len == 29971


@pytest.mark.parametrize("depth,base", [(1, 1), (1, 4), (3, 2)])
def test_parameter_count_formula(depth, base):
    _, reg = build(UNetConfig(depth=depth, base_channels=base))
    assert reg.total_len == architecture_count(base=base, depth=depth)


def test_registry_contiguous():
    _, reg = build()
    offset = 0
    for e in reg:
        assert e.offset == offset and e.length == int(np.prod(e.shape))
        offset += e.length
    assert offset == reg.total_len


def test_registry_order_is_stable():
    a = [(e.name, e.shape, e.offset) for e in build()[1]]
    b = [(e.name, e.shape, e.offset) for e in build()[1]]
    assert a == b
    assert a[0][0] == "enc0.conv1.weight" and a[-1][0] == "final.bias"


def test_minimal_network_shape():
    net, _ = build(UNetConfig(depth=1, base_channels=1))
    x = np.random.default_rng(0).random((1, 3, 2, 2))
    assert net.predict(x, net.init_params()).shape == (1, 3, 2, 2)


def test_same_seed_same_params():
    a = UNet(UNetConfig(seed=5)).init_params()
    b = UNet(UNetConfig(seed=5)).init_params()
    c = UNet(UNetConfig(seed=6)).init_params()
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_he_uniform_bounds():
    net = UNet(UNetConfig())
    p = net.init_params()
    for e in net.registry:
        vals = p[e.offset:e.offset + e.length]
        if e.name.endswith("bias"):
            assert np.all(vals == 0)
        else:
            assert np.abs(vals).max() <= np.sqrt(6 / (e.shape[1] * 9))


@pytest.mark.parametrize("kw", [dict(depth=0), dict(base_channels=0), dict(in_channels=0),
                                dict(out_channels=1, residual=True)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        UNet(UNetConfig(**kw))


def test_zero_params_output_is_zero_bias(rng):
    net = UNet(UNetConfig())
    out = net.predict(rng.random((1, 3, 16, 16)), np.zeros(net.num_params))
    np.testing.assert_array_equal(out, 0.0)


def test_default_output_shape(rng):
    net = UNet(UNetConfig())
    assert net.predict(rng.random((2, 3, 32, 32)), net.init_params()).shape == (2, 3, 32, 32)


def test_forward_bit_identical(rng):
    net = UNet(UNetConfig())
    x, p = rng.random((2, 3, 16, 16)), net.init_params()
    assert net.predict(x, p).tobytes() == net.predict(x, p).tobytes()


def test_wrong_param_length_and_indivisible_input(rng):
    net = UNet(UNetConfig())
    with pytest.raises(T.ShapeError):
        net.predict(rng.random((1, 3, 16, 16)), np.zeros(10))
    with pytest.raises(T.ShapeError):
        net.predict(rng.random((1, 3, 18, 16)), net.init_params())
    with pytest.raises(T.ShapeError):
        net.predict(rng.random((1, 1, 16, 16)), net.init_params())


def test_registry_roundtrip(rng):
    _, reg = build()
    v = rng.normal(size=reg.total_len)
    again = reg.pack(reg.unpack(v))
    assert again.tobytes() == v.tobytes()


def test_locate():
    _, reg = build()
    e = reg["final.bias"]
    assert reg.locate(e.offset + 1) == (e, 1)
    with pytest.raises(IndexError):
        reg.locate(reg.total_len)


def test_every_sampled_parameter_is_live(rng):
    """Perturbing any single scalar changes the output for a random input."""
    net = UNet(UNetConfig())
    # non-negative weights and biases with a positive input keep every relu active
    p = np.abs(net.init_params()) + 0.01
    x = rng.random((1, 3, 16, 16))
    ref = net.predict(x, p)
    for i in rng.choice(net.num_params, 100, replace=False):
        q = p.copy()
        q[i] += 0.5
        assert not np.array_equal(net.predict(x, q), ref), net.registry.locate(int(i))[0].name


def test_residual_mode_adds_input(rng):
    net = UNet(UNetConfig(residual=True))
    x = rng.random((1, 3, 8, 8))
    np.testing.assert_array_equal(net.predict(x, np.zeros(net.num_params)), x)


def test_trace_records_patterns(rng):
    net = UNet(UNetConfig(depth=1, base_channels=2))
    trace = []
    with T.no_grad():
        net.forward(rng.random((1, 3, 4, 4)), net.init_params(), trace=trace)
    # 3 blocks * 2 relus + 1 pooling argmax
    assert len(trace) == 7
