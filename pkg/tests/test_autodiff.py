import numpy as np
import pytest

from gisplab import autodiff as ad


def scalar_probe(g, node, shape, rng):
    """Contract a tensor node to a scalar with a fixed random weighting."""
    w = g.constant(rng.normal(size=shape))
    n = int(np.prod(shape))
    flat = g.reshape(g.multiply(node, w), (1, n))
    return g.reshape(g.matmul(flat, g.constant(np.ones((n, 1)))), ())


def test_matmul_identity():
    g = ad.Graph()
    a = g.parameter("a", np.array([[1.0, 2.0], [3.0, 4.0]]))
    g.matmul(a, g.constant(np.eye(2)))
    assert np.array_equal(ad.evaluate(g), [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_symmetry():
    g = ad.Graph()
    g.softmax(g.constant(np.array([[0.0, 0.0]])))
    assert np.allclose(ad.evaluate(g), [[0.5, 0.5]])


def test_cross_entropy_uniform_logits():
    g = ad.Graph()
    g.cross_entropy(g.constant(np.zeros((1, 4))), np.array([2]))
    assert ad.evaluate(g) == pytest.approx(np.log(4), abs=1e-12)


def test_linear_gradient():
    g = ad.Graph()
    w = g.parameter("w", np.array([[3.0]]))
    g.reshape(g.matmul(w, g.constant(np.array([[2.0]]))), ())
    ad.evaluate(g)
    assert np.allclose(ad.backward(g)["w"], [[2.0]])


def test_quadratic_gradient():
    g = ad.Graph()
    w = g.parameter("w", np.array([[1.0, -2.0]]))
    sq = g.multiply(w, w)
    g.reshape(g.matmul(sq, g.constant(np.ones((2, 1)))), ())
    ad.evaluate(g)
    assert np.allclose(ad.backward(g)["w"], [[2.0, -4.0]])


def _kernel_cases():
    rng = np.random.default_rng(11)

    def matmul_2d(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 4)))
        return scalar_probe(g, g.matmul(p, g.constant(rng.uniform(-1, 1, (4, 5)))),
                            (3, 5), rng)

    def matmul_batched(g):
        p = g.parameter("p", rng.uniform(-1, 1, (2, 3, 4)))
        return scalar_probe(g, g.matmul(p, g.constant(rng.uniform(-1, 1, (2, 4, 3)))),
                            (2, 3, 3), rng)

    def add_broadcast(g):
        p = g.parameter("p", rng.uniform(-1, 1, (4,)))
        return scalar_probe(g, g.add(g.constant(rng.uniform(-1, 1, (3, 4))), p),
                            (3, 4), rng)

    def multiply(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 4)))
        return scalar_probe(g, g.multiply(p, g.constant(rng.uniform(-1, 1, (3, 4)))),
                            (3, 4), rng)

    def scale(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 4)))
        return scalar_probe(g, g.scale(p, -1.7), (3, 4), rng)

    def embedding(g):
        p = g.parameter("p", rng.uniform(-1, 1, (6, 3)))
        return scalar_probe(g, g.embedding(p, np.array([0, 5, 5, 2])), (4, 3), rng)

    def rmsnorm(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 5)))
        gain = g.parameter("gain", rng.uniform(0.5, 1.5, (5,)))
        return scalar_probe(g, g.rmsnorm(p, gain), (3, 5), rng)

    def softmax(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 5)))
        return scalar_probe(g, g.softmax(p), (3, 5), rng)

    def silu(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 5)))
        return scalar_probe(g, g.silu(p), (3, 5), rng)

    def gate(g):
        a = g.parameter("p", rng.uniform(-1, 1, (3, 5)))
        b = g.parameter("b", rng.uniform(-1, 1, (3, 5)))
        return scalar_probe(g, g.gate(a, b), (3, 5), rng)

    def cross_entropy(g):
        p = g.parameter("p", rng.uniform(-1, 1, (3, 5)))
        return g.cross_entropy(p, np.array([1, 0, 3]))

    def cross_entropy_weighted(g):
        p = g.parameter("p", rng.uniform(-1, 1, (2, 3, 5)))
        return g.cross_entropy(p, np.array([[1, 0, 3], [2, 2, 4]]),
                               rng.uniform(0, 1, (2, 3)))

    def attention_stack(g):
        # composed path: softmax(scaled scores) @ values through a gate
        p = g.parameter("p", rng.uniform(-1, 1, (2, 4, 3)))
        k = g.constant(rng.uniform(-1, 1, (2, 4, 3)))
        scores = g.scale(g.matmul(p, g.permute(k, (0, 2, 1))), 1 / np.sqrt(3))
        probs = g.softmax(g.add(scores, g.constant(np.zeros((4, 4)))))
        ctx = g.matmul(probs, k)
        return scalar_probe(g, g.gate(ctx, ctx), (2, 4, 3), rng)

    return [matmul_2d, matmul_batched, add_broadcast, multiply, scale,
            embedding, rmsnorm, softmax, silu, gate, cross_entropy,
            cross_entropy_weighted, attention_stack]


@pytest.mark.parametrize("build", _kernel_cases(), ids=lambda f: f.__name__)
def test_kernel_gradients_match_finite_differences(build):
    g = ad.Graph()
    loss = build(g)
    err = ad.finite_difference_check(g, {}, loss, "p", 1e-4)
    assert err < 1e-5


def test_finite_difference_exact_for_quadratic():
    g = ad.Graph()
    w = g.parameter("p", np.array([[1.0, -2.0, 0.5]]))
    sq = g.multiply(w, w)
    g.reshape(g.matmul(sq, g.constant(np.ones((3, 1)))), ())
    err = ad.finite_difference_check(g, {}, None, "p", 1e-3)
    assert err < 1e-9


def test_finite_difference_rejects_zero_epsilon():
    g = ad.Graph()
    g.parameter("p", np.ones(2).reshape(1, 2))
    with pytest.raises(ad.GraphError):
        ad.finite_difference_check(g, {}, None, "p", 0.0)


def test_evaluate_is_pure():
    rng = np.random.default_rng(3)
    g = ad.Graph()
    p = g.parameter("p", rng.normal(size=(4, 4)))
    x = g.input("x")
    g.softmax(g.matmul(x, p))
    bindings = {"x": rng.normal(size=(2, 4))}
    first = ad.evaluate(g, bindings).copy()
    second = ad.evaluate(g, bindings)
    assert np.array_equal(first, second)


def test_unbound_input_rejected():
    g = ad.Graph()
    x = g.input("x")
    g.scale(x, 2.0)
    with pytest.raises(ad.GraphError, match="not bound"):
        ad.evaluate(g, {})


def test_unreachable_parameter_gets_exact_zero_gradient():
    g = ad.Graph()
    used = g.parameter("used", np.array([[2.0]]))
    g.parameter("unused", np.ones((3, 3)))
    g.reshape(g.matmul(used, g.constant(np.array([[1.0]]))), ())
    ad.evaluate(g)
    grads = ad.backward(g)
    assert np.array_equal(grads["unused"], np.zeros((3, 3)))
    assert grads["used"][0, 0] == 1.0


def test_backward_requires_forward():
    g = ad.Graph()
    g.parameter("p", np.ones((1, 1)))
    with pytest.raises(ad.GraphError, match="before evaluate"):
        ad.backward(g)


def test_backward_requires_scalar_loss():
    g = ad.Graph()
    p = g.parameter("p", np.ones((2, 2)))
    g.scale(p, 1.0)
    ad.evaluate(g)
    with pytest.raises(ad.GraphError, match="scalar"):
        ad.backward(g)


def test_matmul_shape_mismatch_reports():
    g = ad.Graph()
    a = g.constant(np.ones((2, 3)))
    b = g.constant(np.ones((4, 2)))
    g.matmul(a, b)
    with pytest.raises(ad.GraphError, match="matmul shape mismatch"):
        ad.evaluate(g)


def test_nonfinite_intermediate_reports_offending_node():
    g = ad.Graph()
    big = g.constant(np.array([[1e308]]))
    node = g.multiply(big, big)  # overflows to inf
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError) as exc:
        ad.evaluate(g)
    assert exc.value.node_id == node
    assert exc.value.op == "multiply"


def test_gradient_accumulates_across_consumers():
    g = ad.Graph()
    p = g.parameter("p", np.array([[1.5]]))
    doubled = g.add(p, p)
    g.reshape(g.matmul(doubled, g.constant(np.array([[1.0]]))), ())
    ad.evaluate(g)
    assert ad.backward(g)["p"][0, 0] == 2.0
