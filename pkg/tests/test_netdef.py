import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcp import tensor as T
from dmcp.netdef import (
    REFERENCE_NETS,
    NetworkSpec,
    NetworkSpecError,
    SubStructure,
    build_network,
    check_sub,
    copy_spec,
    forward_full,
    forward_fused,
    forward_sliced,
    init_gates,
    init_params,
    max_sub,
    min_sub,
)
from dmcp.tensor import ShapeError, Tape

NETS = sorted(REFERENCE_NETS)


def _setup(name, seed=0, n=6):
    net = build_network(name)
    rng = np.random.default_rng(seed)
    params, buffers = init_params(net, rng)
    # non-trivial running stats so eval-mode BN is not an identity
    for k in buffers:
        buffers[k] = rng.uniform(0.5, 1.5, buffers[k].shape) if k.endswith("var") else rng.normal(0, 0.1, buffers[k].shape)
    for k, p in params.items():
        if k.endswith("beta"):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(n, net.in_channels, net.input_size, net.input_size))
    return net, params, buffers, x


def _copy(buffers):
    return {k: v.copy() for k, v in buffers.items()}


def _saturated_gates(net, sub, mode="markov"):
    gates = init_gates(net, np.random.default_rng(0), mode=mode)
    for g, k in sub.retained_groups.items():
        a = np.full(gates[g].num_groups - 1, 800.0)
        a[k - 1 :] = -800.0
        gates[g].set_alpha(a)
    return gates


# -- reference nets and validation ----------------------------------------


@pytest.mark.parametrize("name", NETS)
def test_reference_nets_validate(name):
    net = build_network(name)
    assert net.gate_info
    for g, (c, G, gs) in net.gate_info.items():
        assert G * gs == c and (G >= 10 or c < 10)


def test_residual_group_shares_gate():
    net = build_network("residual3")
    assert net.residual_groups["res"] == ["stem", "b1.conv2", "b2.conv2", "b3.conv2"]


def _doc(layers, **kw):
    return {"in_channels": 3, "input_size": 8, "num_classes": 4, **kw, "layers": layers}


def test_mismatched_residual_group_names_both_layers():
    doc = _doc([
        {"type": "conv", "name": "a", "out_channels": 10, "gate": "r"},
        {"type": "conv", "name": "b", "out_channels": 20, "gate": "r"},
        {"type": "pool"}, {"type": "linear"},
    ])
    with pytest.raises(NetworkSpecError) as err:
        NetworkSpec.from_dict(doc).compiled
    msg = str(err.value)
    assert "layer 0 (a)" in msg and "layer 1 (b)" in msg


def test_add_across_different_gates_rejected():
    doc = _doc([
        {"type": "conv", "name": "a", "out_channels": 10, "gate": "g1"},
        {"type": "conv", "name": "b", "out_channels": 10, "gate": "g2"},
        {"type": "add", "name": "s", "inputs": ["a", "b"]},
        {"type": "pool"}, {"type": "linear"},
    ])
    with pytest.raises(NetworkSpecError, match="layer 2 .*shared gate"):
        NetworkSpec.from_dict(doc).compiled


@pytest.mark.parametrize("layers,match", [
    ([{"type": "conv", "out_channels": 10, "gate": "g"}, {"type": "linear"}], "pooled"),
    ([{"type": "conv", "out_channels": 10, "gate": "g"}, {"type": "pool"}], "no linear head"),
    ([{"type": "conv", "out_channels": 10, "input": "nowhere", "gate": "g"}, {"type": "pool"}, {"type": "linear"}],
     "no producer"),
    ([{"type": "conv", "out_channels": 10}, {"type": "pool"}, {"type": "linear"}], "needs a gate"),
    ([{"type": "conv", "out_channels": 10, "gate": "g", "kernel": 11, "padding": 0}, {"type": "pool"},
      {"type": "linear"}], "exceeds"),
    ([{"type": "conv", "depthwise": True}, {"type": "pool"}, {"type": "linear"}], "image"),
    ([{"type": "conv", "out_channels": 10, "gate": "g"}, {"type": "bogus"}, {"type": "pool"}, {"type": "linear"}],
     "unknown layer type"),
])
def test_validation_errors(layers, match):
    with pytest.raises(NetworkSpecError, match=match):
        NetworkSpec.from_dict(_doc(layers)).compiled


def test_few_groups_warns():
    doc = _doc([{"type": "conv", "out_channels": 12, "gate": "g"}, {"type": "pool"}, {"type": "linear"}],
               gate_groups={"g": 4})
    with pytest.warns(UserWarning, match="fewer than 10"):
        NetworkSpec.from_dict(doc).compiled


def test_small_layer_does_not_warn():
    doc = _doc([{"type": "conv", "out_channels": 6, "gate": "g"}, {"type": "pool"}, {"type": "linear"}])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        net = NetworkSpec.from_dict(doc)
        assert net.gate_info["g"] == (6, 6, 1)


@pytest.mark.parametrize("name", NETS)
def test_dict_round_trip(name, tmp_path):
    net = build_network(name)
    net.dump(tmp_path / "net.yaml")
    again = NetworkSpec.load(tmp_path / "net.yaml")
    assert again.to_dict() == net.to_dict()
    assert copy_spec(net).gate_info == net.gate_info


def test_check_sub_errors():
    net = build_network("plain6")
    with pytest.raises(NetworkSpecError, match="missing"):
        check_sub(net, SubStructure({"g1": 1}))
    bad = max_sub(net)
    bad.retained_groups["g1"] = 11
    with pytest.raises(NetworkSpecError, match="outside"):
        check_sub(net, bad)


# -- forward passes -------------------------------------------------------


@pytest.mark.parametrize("name", NETS)
def test_full_equals_max_sliced_bitwise(name):
    net, params, buffers, x = _setup(name)
    a = forward_full(net, params, _copy(buffers), x).data
    b = forward_sliced(net, params, _copy(buffers), max_sub(net), x).data
    assert a.shape == (len(x), net.num_classes)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, forward_full(net, params, _copy(buffers), x).data)


@pytest.mark.parametrize("name", NETS)
def test_min_sub_finite(name):
    net, params, buffers, x = _setup(name)
    out = forward_sliced(net, params, buffers, min_sub(net), x)
    assert np.isfinite(out.data).all()


def test_input_shape_rejected():
    net, params, buffers, x = _setup("plain6")
    with pytest.raises(ShapeError):
        forward_full(net, params, buffers, x[:, :2])


@pytest.mark.parametrize("name", NETS)
def test_fused_with_unit_marginals_equals_full(name):
    net, params, buffers, x = _setup(name)
    gates = _saturated_gates(net, max_sub(net))
    a = forward_full(net, params, _copy(buffers), x).data
    b = forward_fused(net, params, _copy(buffers), gates, x).data
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(NETS), st.integers(0, 2**31 - 1))
def test_saturated_fused_equals_sliced_eval_bn(name, seed):
    net, params, buffers, x = _setup(name, seed=seed % 1000, n=3)
    rng = np.random.default_rng(seed)
    sub = SubStructure({g: int(rng.integers(1, G + 1)) for g, (_, G, _) in net.gate_info.items()})
    gates = _saturated_gates(net, sub)
    a = forward_fused(net, params, buffers, gates, x, training=False).data
    b = forward_sliced(net, params, buffers, sub, x, training=False).data
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


def test_bernoulli_masked_slice_matches_fused():
    net, params, buffers, x = _setup("plain6", n=3)
    masks = {g: (0, 2, 5) for g in net.gate_info}
    sub = SubStructure({g: 3 for g in net.gate_info}, masks)
    gates = init_gates(net, np.random.default_rng(0), mode="bernoulli")
    for g in gates.values():
        a = np.full(g.num_groups - 1, -800.0)
        a[[1, 4]] = 800.0
        g.set_alpha(a)
    a = forward_fused(net, params, buffers, gates, x, training=False).data
    b = forward_sliced(net, params, buffers, sub, x, training=False).data
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)
    assert not sub.is_prefix()


@pytest.mark.parametrize("name", NETS)
def test_fused_alpha_gradients_nonzero(name):
    net, params, buffers, x = _setup(name)
    gates = init_gates(net, np.random.default_rng(1), init_prob=0.7, noise=1.0)
    y = np.arange(len(x)) % net.num_classes
    with Tape() as tape:
        loss = T.cross_entropy(forward_fused(net, params, buffers, gates, x), y)
    tape.backward(loss)
    for g in gates.values():
        assert g.alpha.grad is not None and np.abs(g.alpha.grad).max() > 0


def test_fused_requires_all_gates():
    net, params, buffers, x = _setup("plain6")
    gates = init_gates(net, np.random.default_rng(0))
    del gates["g3"]
    with pytest.raises(NetworkSpecError, match="g3"):
        forward_fused(net, params, buffers, gates, x)


@pytest.mark.parametrize("name", NETS)
def test_sliced_gradient_stays_in_prefix(name):
    net, params, buffers, x = _setup(name)
    sub = SubStructure({g: 2 for g in net.gate_info})
    y = np.arange(len(x)) % net.num_classes
    with Tape() as tape:
        loss = T.cross_entropy(forward_sliced(net, params, buffers, sub, x), y)
    tape.backward(loss)
    chans = sub.channels(net)
    for node in net.nodes:
        if node.kind == "conv" and not node.depthwise:
            g = params[f"{node.name}.weight"].grad
            k = chans[node.gate]
            assert np.all(g[k:] == 0) and np.abs(g[:k]).max() > 0
            assert np.all(params[f"{node.name}.bn.gamma"].grad[k:] == 0)


def test_parameter_aliasing_accumulates():
    net, params, buffers, x = _setup("residual3")
    y = np.arange(len(x)) % net.num_classes
    subs = [SubStructure({g: 3 for g in net.gate_info}), SubStructure({g: 7 for g in net.gate_info})]

    def grads(which):
        for p in params.values():
            p.zero_grad()
        for s in which:
            with Tape() as tape:
                loss = T.cross_entropy(forward_sliced(net, params, _copy(buffers), s, x), y)
            tape.backward(loss)
        return {k: p.grad.copy() for k, p in params.items()}

    g0, g1, both = grads(subs[:1]), grads(subs[1:]), grads(subs)
    for k in params:
        np.testing.assert_allclose(both[k], g0[k] + g1[k], atol=1e-10, rtol=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_shared_gate_sums_never_shape_error(seed):
    net, params, buffers, x = _setup("residual3", n=1)
    rng = np.random.default_rng(seed)
    sub = SubStructure({g: int(rng.integers(1, G + 1)) for g, (_, G, _) in net.gate_info.items()})
    chans = sub.channels(net)
    widths = {nm: chans["res"] for nm in net.residual_groups["res"]}
    assert len(set(widths.values())) == 1
    forward_sliced(net, params, buffers, sub, x, training=False)


def test_train_mode_updates_running_stats_only_for_prefix():
    net, params, buffers, x = _setup("plain6")
    before = _copy(buffers)
    forward_sliced(net, params, buffers, SubStructure({g: 4 for g in net.gate_info}), x)
    rm = buffers["conv1.bn.running_mean"]
    assert not np.array_equal(rm[:4], before["conv1.bn.running_mean"][:4])
    np.testing.assert_array_equal(rm[4:], before["conv1.bn.running_mean"][4:])
    frozen = _copy(buffers)
    forward_full(net, params, buffers, x, update_stats=False)
    for k in buffers:
        np.testing.assert_array_equal(buffers[k], frozen[k])
