import numpy as np
import pytest

from jem_lab import diffcore as dc
from jem_lab.diffcore import LayerSpec, Network, Tensor
from jem_lab.errors import DimensionError, UnsupportedOpError
from jem_lab.rng import Rng


@pytest.fixture
def net():
    """Small tanh network with random weights."""
    return Network.mlp(3, (5, 4), 3, activation="tanh", rng=Rng(7))


def _cross_entropy(labels):
    def loss(f):
        return dc.mean(dc.sub(dc.logsumexp(f), dc.index_select(f, labels)))
    return loss


def test_mlp_layout(net):
    kinds = [layer.kind for layer in net.layers]
    assert kinds == ["affine", "tanh", "affine", "tanh", "affine"]
    assert [p.shape for p in net.parameters] == [[5, 3], [5], [4, 5], [4], [3, 4], [3]]
    assert net.num_parameters == 15 + 5 + 20 + 4 + 12 + 3


def test_forward_shapes(net):
    assert dc.forward(net, np.zeros(3)).shape == [3]
    assert dc.forward(net, np.zeros((6, 3))).shape == [6, 3]


def test_forward_rejects_wrong_width(net):
    with pytest.raises(DimensionError):
        dc.forward(net, np.zeros(4))


def test_forward_rejects_non_finite_input(net):
    with pytest.raises(ValueError):
        dc.forward(net, np.array([0.0, np.nan, 1.0]))


def test_network_validates_parameter_shapes():
    with pytest.raises(DimensionError):
        Network([LayerSpec("affine", 2, 3)], [Tensor(np.zeros((3, 2)))], 2, 3)
    with pytest.raises(DimensionError):
        Network([LayerSpec("affine", 2, 3)], [Tensor(np.zeros((3, 2))), Tensor(np.zeros(3))], 2, 4)


def test_unknown_activation_is_rejected():
    with pytest.raises(UnsupportedOpError):
        Network.mlp(2, (4,), 2, activation="gelu")


def _points_off_the_kinks(net, rng, n, margin=0.01):
    """Inputs whose first-layer pre-activations all sit at least `margin` from zero."""
    weight, bias = net.parameters[0].data, net.parameters[1].data
    for attempt in range(100):
        x = rng.substream("x", attempt).normal((n, net.input_dim))
        if np.min(np.abs(x @ weight.T + bias)) > margin:
            return x
    raise AssertionError("no kink-free inputs found")


@pytest.mark.parametrize("activation", ["tanh", "relu", "softplus"])
def test_parameter_gradients_match_finite_differences(activation):
    rng = Rng(3)
    net = Network.mlp(2, (6,), 3, activation=activation, rng=rng)
    x = _points_off_the_kinks(net, rng, 5)
    labels = np.array([0, 1, 2, 1, 0])
    loss = _cross_entropy(labels)
    analytic = dc.grad_params(net, x, loss)

    for param, grad in zip(net.parameters, analytic):
        def value(at, param=param):
            saved = param.data
            param.data = at
            try:
                return loss(dc.forward(net, x)).item()
            finally:
                param.data = saved
        numeric = dc.numerical_gradient(value, param.data)
        assert dc.relative_error(grad.data, numeric) < 1e-6


def test_input_gradient_matches_finite_differences(net):
    x = np.array([0.2, -0.4, 0.7])

    def log_p(f):
        return dc.sum(dc.logsumexp(f))

    analytic = dc.grad_input(net, x, log_p).data
    numeric = dc.numerical_gradient(lambda at: log_p(dc.forward(net, at)).item(), x)
    assert dc.relative_error(analytic, numeric) < 1e-5


def test_backprop_leaves_parameters_untouched(net):
    before = [p.data.copy() for p in net.parameters]
    dc.backprop(net, [np.ones((2, 3))], _cross_entropy(np.array([0, 2])))
    for p, original in zip(net.parameters, before):
        np.testing.assert_array_equal(p.data, original)


def test_backprop_with_two_inputs_sums_contributions(net):
    x = np.ones((2, 3))
    single = dc.backprop(net, [x], lambda f: dc.sum(f)).params
    double = dc.backprop(net, [x, x], lambda a, b: dc.add(dc.sum(a), dc.sum(b))).params
    for one, two in zip(single, double):
        np.testing.assert_allclose(two.data, 2.0 * one.data)


def test_logsumexp_is_stable_for_large_logits():
    v = Tensor(np.array([1000.0, 1000.0]))
    assert dc.logsumexp(v).item() == pytest.approx(1000.0 + np.log(2.0))


def test_log_softmax_rows_normalise():
    v = Tensor(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, -5.0]]))
    np.testing.assert_allclose(np.exp(dc.log_softmax(v).data).sum(axis=-1), 1.0)


def test_index_select_checks_range():
    with pytest.raises(IndexError):
        dc.index_select(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(DimensionError):
        dc.index_select(Tensor(np.zeros((2, 3))), np.array([0]))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with dc.Tape() as tape:
        out = dc.sum(dc.relu(x))
        (grad,) = tape.gradient(out, [x])
    np.testing.assert_array_equal(grad, [0.0, 1.0])


def test_reverse_pass_needs_scalar_output():
    x = Tensor(np.ones(2), requires_grad=True)
    with dc.Tape() as tape:
        out = dc.tanh(x)
        with pytest.raises(DimensionError):
            tape.gradient(out, [x])


def test_numpy_ufuncs_outside_primitive_set_are_rejected():
    with pytest.raises(UnsupportedOpError):
        np.sin(Tensor(np.ones(2)))
    with pytest.raises(UnsupportedOpError):
        Tensor(np.ones(2)) / Tensor(np.ones(2))


def test_operators_dispatch_to_primitives():
    a = Tensor(np.array([1.0, 2.0]))
    np.testing.assert_array_equal((a + 1.0).data, [2.0, 3.0])
    np.testing.assert_array_equal((2.0 * a - a).data, [1.0, 2.0])
    np.testing.assert_array_equal((a / 2).data, [0.5, 1.0])
    np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


def test_copy_is_independent(net):
    clone = net.copy()
    clone.parameters[0].data[0, 0] += 1.0
    assert clone.parameters[0].data[0, 0] != net.parameters[0].data[0, 0]


def test_relative_error_floors_scale_at_one():
    assert dc.relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-9)
    assert dc.relative_error(np.array([200.0]), np.array([202.0])) == pytest.approx(2.0 / 202.0)


def test_gradients_of_random_small_networks():
    for case in range(50):
        rng = Rng(100).substream("case", case)
        dims = rng.integers(4, 3) + 1
        activation = ("tanh", "softplus")[case % 2]
        net = Network.mlp(int(dims[0]), (int(dims[1]) + 1,), int(dims[2]) + 1, activation=activation, rng=rng,
                          init_scale=1.0 + rng.random())
        x = rng.substream("x").normal((3, net.input_dim))
        labels = rng.substream("y").integers(net.num_classes, 3)
        loss = _cross_entropy(labels)

        for i, grad in enumerate(dc.grad_params(net, x, loss)):
            def value(at, i=i):
                params = [Tensor(at) if j == i else p for j, p in enumerate(net.parameters)]
                return loss(net.apply(Tensor(x), params)).item()
            assert dc.relative_error(grad.data, dc.numerical_gradient(value, net.parameters[i].data)) < 1e-6

        analytic = dc.grad_input(net, x, loss).data
        numeric = dc.numerical_gradient(lambda at: loss(dc.forward(net, at)).item(), x)
        assert dc.relative_error(analytic, numeric) < 1e-6
