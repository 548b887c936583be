import copy

import numpy as np
import pytest

from hybridnet.graph import (ModelSpecError, GraphShapeError, backward_seq, build_model_from_spec,
                             evaluate, forward_layers, forward_seq, predict, sgd_apply)
from hybridnet.zoo import BUNDLED, bundled_spec, load_config, random_model_spec

SKIP = {
    "version": 1, "name": "skip", "seed": 3,
    "layers": [
        {"name": "x", "kind": "Input", "shape": [3]},
        {"name": "a", "kind": "Dense", "units": 4},
        {"name": "r", "kind": "ReLU"},
        {"name": "b", "kind": "Dense", "units": 4},
        {"name": "s", "kind": "Add", "inputs": ["b", "a"]},
        {"name": "out", "kind": "Dense", "units": 2},
        {"name": "loss", "kind": "SoftmaxXent"},
    ],
}


def _spec(**changes):
    s = copy.deepcopy(SKIP)
    s.update(changes)
    return s


def test_bundled_configs_build():
    for name in BUNDLED:
        m = load_config(name)
        m.validate()
        assert m[m.output_id].kind == "SoftmaxXent"
    toy = load_config("resnet_toy")
    assert sum(n.kind == "Dense" for n in toy.layers) == 8
    assert sum(n.kind == "Add" for n in toy.layers) == 2
    assert load_config("mlp_mnist").input_shape == (28, 28)


def test_declaration_order_does_not_matter():
    shuffled = _spec(layers=[SKIP["layers"][i] for i in (0, 1, 2, 3, 4, 5, 6)])
    shuffled["layers"][3]["inputs"] = ["r"]
    shuffled["layers"] = shuffled["layers"][::-1]
    for layer in shuffled["layers"]:
        layer.setdefault("inputs", {"x": [], "a": ["x"], "r": ["a"], "b": ["r"], "out": ["s"],
                                    "loss": ["out"]}.get(layer["name"]))
    m = build_model_from_spec(shuffled)
    assert [n.kind for n in m.layers][0] == "Input"
    assert all(i < n.id for n in m.layers for i in n.inputs)


@pytest.mark.parametrize("mutate,match", [
    (lambda s: s["layers"].append({"name": "loss2", "kind": "SoftmaxXent", "inputs": ["out"]}),
     "exactly one SoftmaxXent"),
    (lambda s: s["layers"][4].update(inputs=["b", "b"]), "repeated input"),
    (lambda s: s["layers"][4].update(inputs=["b", "nope"]), "unknown layer"),
    (lambda s: s["layers"][1].update(units=0), "layers/1/units"),
    (lambda s: s["layers"][1].update(kind="Conv"), "layers/1/kind"),
    (lambda s: s["layers"][1].pop("units"), "units"),
    (lambda s: s.update(version=2), "version"),
    (lambda s: s["layers"][1].update(inputs=["s"]), "cycle"),
    (lambda s: s["layers"].insert(3, {"name": "dead", "kind": "ReLU", "inputs": ["a"]}),
     "does not reach"),
    (lambda s: s["layers"][5].update(inputs=["loss"]), "cycle|sink"),
    (lambda s: s["layers"].__setitem__(1, {"name": "a", "kind": "Dense", "units": 5}),
     "Add operands differ"),
])
def test_invalid_specs_are_rejected(mutate, match):
    s = copy.deepcopy(SKIP)
    mutate(s)
    with pytest.raises(ModelSpecError, match=match):
        build_model_from_spec(s)


def test_weights_are_seeded():
    a, b = build_model_from_spec(SKIP), build_model_from_spec(SKIP)
    assert a.checksum() == b.checksum()
    assert build_model_from_spec(SKIP, seed=4).checksum() != a.checksum()
    assert all(np.all(n.b == 0) for n in a.layers if n.has_params)


def test_backward_matches_finite_differences_through_skip():
    m = build_model_from_spec(SKIP)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    y = np.eye(2)[rng.integers(0, 2, size=5)]
    _, acts = forward_seq(m, x, y)
    grads = backward_seq(m, acts)
    h = 1e-6
    for i, (dW, db) in grads.items():
        for p, g in ((m[i].W, dW), (m[i].b, db)):
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                lp = forward_seq(m, x, y)[0]
                p[idx] = orig - h
                lm = forward_seq(m, x, y)[0]
                p[idx] = orig
                assert g[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)


def test_act_grads_and_flatten():
    m = load_config("mlp_mnist")
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 28, 28))
    y = np.eye(10)[[1, 2, 3]]
    _, acts = forward_seq(m, x, y)
    dv = {}
    backward_seq(m, acts, act_grads=dv)
    flat = m.layers[m.input_id + 1]
    assert flat.kind == "Flatten"
    assert dv[flat.id].shape == (3, 784)
    assert dv[m.input_id].shape == (3, 28, 28)
    assert np.array_equal(dv[m.input_id].reshape(3, 784), dv[flat.id])
    assert set(dv) == set(range(len(m)))


def test_forward_layers_errors():
    m = build_model_from_spec(SKIP)
    with pytest.raises(GraphShapeError, match="no batch"):
        forward_layers(m, range(len(m)), {})
    with pytest.raises(GraphShapeError, match="does not match"):
        forward_layers(m, range(len(m)), {0: np.zeros((2, 4))})
    with pytest.raises(GraphShapeError, match="missing activation"):
        forward_layers(m, [3], {})
    with pytest.raises(GraphShapeError, match="labels"):
        forward_seq(m, np.zeros((2, 3)), np.zeros((2, 3)))


def test_sgd_apply_and_shape_check():
    m = build_model_from_spec(SKIP)
    before = m[1].W.copy()
    g = {1: (np.ones_like(m[1].W), np.ones_like(m[1].b))}
    sgd_apply(m, g, 0.5)
    assert np.array_equal(m[1].W, before - 0.5)
    with pytest.raises(ValueError, match="gradient shapes"):
        sgd_apply(m, {1: (np.ones((1, 1)), np.ones(4))}, 0.1)


def test_predict_and_evaluate():
    m = build_model_from_spec(SKIP)
    x = np.random.default_rng(2).normal(size=(7, 3))
    p = predict(m, x)
    assert p.shape == (7,) and set(p) <= {0, 1}
    y = np.eye(2)[p]
    assert evaluate(m, x, y, batch_size=3) == 1.0


def test_random_specs_are_valid_and_bounded():
    rng = np.random.default_rng(9)
    for _ in range(100):
        spec = random_model_spec(rng, max_layers=12, max_skips=2)
        m = build_model_from_spec(spec)
        assert len(m) <= 12
        assert sum(n.kind == "Add" for n in m.layers) <= 2


def test_bundled_spec_unknown():
    with pytest.raises(KeyError):
        bundled_spec("nope")


def _mlp(sizes, kinds=None, seed=0):
    layers = [{"name": "x", "kind": "Input", "shape": [sizes[0]]}]
    for j, u in enumerate(sizes[1:]):
        layers.append({"name": f"d{j}", "kind": "Dense", "units": u})
        if kinds and j < len(sizes) - 2:
            layers.append({"name": f"a{j}", "kind": kinds})
    layers.append({"name": "loss", "kind": "SoftmaxXent"})
    return build_model_from_spec({"version": 1, "seed": seed, "layers": layers})


def test_identity_weights_pass_input_through():
    m = _mlp([3, 3, 3])
    for i in m.param_ids():
        m[i].W = np.eye(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    _, acts = forward_seq(m, x, np.eye(3)[[0, 1, 2, 0]])
    assert np.array_equal(acts[m.output_id - 1], x)


def test_zero_weights_give_uniform_softmax():
    m = _mlp([4, 5, 3])
    for i in m.param_ids():
        m[i].W[:] = 0.0
    loss, acts = forward_seq(m, np.ones((2, 4)), np.eye(3)[[0, 2]])
    assert loss == pytest.approx(np.log(3), rel=1e-15)
    assert np.allclose(acts[m.output_id], 1 / 3)


def test_forward_matches_straight_line_oracle():
    m = _mlp([5, 7, 6, 3], kinds="ReLU", seed=4)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 5))
    y = np.eye(3)[[0, 1, 2, 1]]
    W = [m[i].W for i in m.param_ids()]
    b = [m[i].b for i in m.param_ids()]
    h = np.maximum(x @ W[0] + b[0], 0)
    h = np.maximum(h @ W[1] + b[1], 0)
    z = h @ W[2] + b[2]
    z = z - z.max(axis=1, keepdims=True)
    want = -np.mean(np.sum(y * (z - np.log(np.exp(z).sum(axis=1, keepdims=True))), axis=1))
    assert forward_seq(m, x, y)[0] == pytest.approx(want, rel=1e-12)


def test_gradient_check_on_small_random_models():
    rng = np.random.default_rng(11)
    for _ in range(10):
        depth = int(rng.integers(0, 2))
        sizes = [int(s) for s in rng.integers(2, 33, size=depth + 2)]
        m = _mlp(sizes, kinds="ReLU", seed=int(rng.integers(100)))
        assert len(m) <= 6
        x = rng.normal(size=(3, sizes[0]))
        y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], size=3)]
        _, acts = forward_seq(m, x, y)
        grads = backward_seq(m, acts)
        h = 1e-6
        for i, (dW, _) in grads.items():
            W = m[i].W
            for idx in [tuple(rng.integers(0, s) for s in W.shape) for _ in range(6)]:
                orig = W[idx]
                W[idx] = orig + h
                lp = forward_seq(m, x, y)[0]
                W[idx] = orig - h
                lm = forward_seq(m, x, y)[0]
                W[idx] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(dW[idx] - fd) <= 1e-5 * max(abs(fd), 1e-4)


def test_sgd_mostly_decreases_loss_on_separable_data():
    m = _mlp([2, 8, 2], kinds="ReLU", seed=1)
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-2, 0.3, size=(20, 2)), rng.normal(2, 0.3, size=(20, 2))])
    y = np.eye(2)[[0] * 20 + [1] * 20]
    losses = []
    for _ in range(51):
        loss, acts = forward_seq(m, x, y)
        sgd_apply(m, backward_seq(m, acts), 0.1)
        losses.append(loss)
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 45


def test_skip_with_zero_main_path_equals_plain_model():
    skip = build_model_from_spec({"version": 1, "seed": 2, "layers": [
        {"name": "x", "kind": "Input", "shape": [3]},
        {"name": "h", "kind": "Dense", "units": 4},
        {"name": "main", "kind": "Dense", "units": 4},
        {"name": "sum", "kind": "Add", "inputs": ["main", "h"]},
        {"name": "out", "kind": "Dense", "units": 2},
        {"name": "loss", "kind": "SoftmaxXent"}]})
    plain = build_model_from_spec({"version": 1, "seed": 2, "layers": [
        {"name": "x", "kind": "Input", "shape": [3]},
        {"name": "h", "kind": "Dense", "units": 4},
        {"name": "out", "kind": "Dense", "units": 2},
        {"name": "loss", "kind": "SoftmaxXent"}]})
    skip[2].W[:] = 0.0
    plain[1].W = skip[1].W.copy()
    plain[2].W = skip[4].W.copy()
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(5, 3)), np.eye(2)[rng.integers(0, 2, size=5)]
    gs = backward_seq(skip, forward_seq(skip, x, y)[1])
    gp = backward_seq(plain, forward_seq(plain, x, y)[1])
    assert np.array_equal(gs[1][0], gp[1][0]) and np.array_equal(gs[4][0], gp[2][0])


def test_sgd_examples():
    m = _mlp([1, 1, 2])
    before = m.checksum()
    zero = {i: (np.zeros_like(m[i].W), np.zeros_like(m[i].b)) for i in m.param_ids()}
    sgd_apply(m, zero, 0.7)
    assert m.checksum() == before
    sgd_apply(m, {i: (np.ones_like(m[i].W), np.ones_like(m[i].b)) for i in m.param_ids()}, 0.0)
    assert m.checksum() == before
    m[1].W = np.array([[1.0]])
    sgd_apply(m, {1: (np.array([[2.0]]), np.zeros(1))}, 0.5)
    assert m[1].W.tolist() == [[0.0]]


def test_fig4_mlp_is_a_four_node_chain():
    m = load_config("fig4_mlp")
    assert [n.kind for n in m.layers] == ["Input", "Dense", "Dense", "SoftmaxXent"]
    assert [n.inputs for n in m.layers] == [(), (0,), (1,), (2,)]
