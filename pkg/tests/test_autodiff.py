import numpy as np
import pytest

from advtex import autodiff as ad
from advtex.autodiff import Tensor


def test_elementwise_forward():
    assert np.array_equal(ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.tsum(ad.mul(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_linear_form():
    w = Tensor([0.5, -1.0], requires_grad=True)
    x = Tensor([3.0, 7.0])
    ad.dot(w, x).backward()
    assert np.array_equal(w.grad, x.data)


def test_backward_l2norm():
    x = Tensor([3.0, 4.0], requires_grad=True)
    ad.l2norm(x).backward()
    np.testing.assert_allclose(x.grad, [0.6, 0.8], rtol=1e-15)


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.mul(x, x).backward()


def test_unused_leaf_keeps_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    ad.tsum(ad.mul(y, y)).backward()
    assert x.grad is None
    assert np.array_equal(y.grad, [6.0, 8.0])


def test_grad_accumulates_until_zeroed():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(3):
        ad.tsum(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [12.0])
    x.zero_grad()
    ad.tsum(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_determinism_bit_identical():
    rng = np.random.default_rng(7)
    data = rng.standard_normal((4, 4))

    def run():
        x = Tensor(data.copy(), requires_grad=True)
        y = ad.relu(ad.matmul(x, Tensor(rng2.standard_normal((4, 4)))))
        ad.tmean(ad.mul(y, y)).backward()
        return x.grad.copy()

    rng2 = np.random.default_rng(11)
    g1 = run()
    rng2 = np.random.default_rng(11)
    g2 = run()
    assert np.array_equal(g1, g2)


def test_shape_mismatch_rejected_with_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_nonfinite_input_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        Tensor([1.0, np.inf])
    with pytest.raises(ValueError, match="non-finite"):
        Tensor([np.nan])


def test_grad_check_basic_cases():
    assert ad.grad_check(lambda x: ad.tsum(ad.mul(x, x)), Tensor([1.0, 2.0])) < 1e-6
    assert ad.grad_check(lambda x: ad.tsum(ad.relu(x)), Tensor([1.0])) < 1e-6
    assert ad.grad_check(lambda x: Tensor(3.5) * Tensor(1.0), Tensor([1.0, 2.0])) == 0.0
    with pytest.raises(ValueError, match="eps"):
        ad.grad_check(lambda x: ad.tsum(x), Tensor([1.0]), eps=0.0)


def _op_cases():
    rng = np.random.default_rng(123)
    v = rng.uniform(0.5, 1.5, 6)  # away from relu/clip/sqrt kinks
    m = rng.uniform(0.5, 1.5, (3, 4))
    img = rng.uniform(0.5, 1.5, (1, 2, 6, 6))
    kern = rng.uniform(-0.6, 0.6, (3, 2, 3, 3))
    bias = rng.uniform(-0.3, 0.3, 3)
    other = rng.uniform(0.5, 1.5, 6)
    m42 = rng.uniform(0.5, 1.5, (4, 2))
    m23 = rng.uniform(0.5, 1.5, (2, 3))
    m43 = rng.uniform(0.5, 1.5, (4, 3))
    rows = rng.uniform(0.5, 1.5, (3, 4))
    return [
        ("add", lambda x: ad.tsum(ad.add(x, Tensor(other))), v),
        ("sub", lambda x: ad.tsum(ad.sub(Tensor(other), x)), v),
        ("mul", lambda x: ad.tsum(ad.mul(x, Tensor(other))), v),
        ("div", lambda x: ad.tsum(ad.div(Tensor(other), x)), v),
        ("matmul", lambda x: ad.tsum(ad.matmul(x, Tensor(m42))), m),
        ("matvec", lambda x: ad.tsum(ad.matmul(Tensor(m23), x)), m[:, 0].copy()),
        ("dot", lambda x: ad.dot(x, Tensor(other)), v),
        ("relu", lambda x: ad.tsum(ad.relu(x)), v),
        ("sum", lambda x: ad.tsum(x), v),
        ("mean", lambda x: ad.tmean(x), m),
        ("l2norm", lambda x: ad.l2norm(x), v),
        ("sqrt", lambda x: ad.tsum(ad.sqrt(x)), v),
        ("sin", lambda x: ad.tsum(ad.sin(x)), v),
        ("cos", lambda x: ad.tsum(ad.cos(x)), v),
        ("clip", lambda x: ad.tsum(ad.clip(x, 0.0, 10.0)), v),
        ("maximum", lambda x: ad.tsum(ad.maximum(x, 0.1)), v),
        ("reshape", lambda x: ad.tsum(ad.mul(ad.reshape(x, (2, 3)), ad.reshape(x, (2, 3)))), v),
        ("permute", lambda x: ad.tsum(ad.mul(ad.permute(x, (1, 0)), Tensor(m43))), m),
        ("getitem", lambda x: ad.tsum(ad.mul(x[1:4], x[1:4])), v),
        ("conv2d", lambda x: ad.tmean(ad.mul(ad.conv2d(x, Tensor(kern), Tensor(bias), 2), ad.conv2d(x, Tensor(kern), Tensor(bias), 2))), img),
        ("conv2d_w", lambda x: ad.tmean(ad.conv2d(Tensor(img), x, Tensor(bias), 1)), kern),
        ("conv2d_b", lambda x: ad.tmean(ad.mul(y := ad.conv2d(Tensor(img), Tensor(kern), x, 1), y)), bias),
        ("maxpool", lambda x: ad.tmean(ad.mul(ad.maxpool2d(x, 2, 2), ad.maxpool2d(x, 2, 2))), img),
        ("bias_nchw", lambda x: ad.tmean(ad.mul(y := ad.bias_add_nchw(Tensor(img * 0.3), x), y)), rng.uniform(0.5, 1.5, 2)),
        ("bias_rows", lambda x: ad.tmean(ad.mul(y := ad.bias_add_rows(Tensor(rows), x), y)), rng.uniform(0.5, 1.5, 4)),
        ("channel_mix", lambda x: ad.tmean(ad.mul(y := ad.channel_mix(x, np.array([0.7, -0.4])), y)), rng.uniform(0.5, 1.5, (2, 5, 5))),
        ("upsample", lambda x: ad.tmean(ad.mul(y := ad.bilinear_upsample2d(x, 9, 11), y)), rng.uniform(0.5, 1.5, (4, 5))),
    ]


@pytest.mark.parametrize("name,f,x", _op_cases(), ids=[c[0] for c in _op_cases()])
def test_grad_check_every_op(name, f, x):
    assert ad.grad_check(f, Tensor(x), eps=1e-4) < 1e-4


def test_two_stage_backward_with_intermediate_grad():
    # Pattern used by the saliency path: read an intermediate gradient,
    # zero the subgraph, extend the graph, backprop again.
    x = Tensor([0.5, 1.5], requires_grad=True)
    h = ad.mul(x, x)
    n = ad.l2norm(h)
    n.backward()
    w = h.grad.copy()
    np.testing.assert_allclose(w, h.data / np.linalg.norm(h.data), rtol=1e-14)
    n.zero_subgraph()
    assert x.grad is None and h.grad is None

    loss = ad.tsum(ad.mul(h, Tensor(w)))
    loss.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data * w, rtol=1e-14)


def test_maxpool_forward_and_tie_break():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 3.0]]]]), requires_grad=True)
    out = ad.maxpool2d(x, 2, 2)
    assert out.data.reshape(()) == 3.0
    out.reshape(()).backward()
    # first max in row-major window order wins the tie
    assert np.array_equal(x.grad[0, 0], [[0.0, 0.0], [1.0, 0.0]])


def test_clip_gradient_zero_outside_range():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    ad.tsum(ad.clip(x, 0.0, 1.0)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])
