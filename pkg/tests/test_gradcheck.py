import time

import numpy as np
import pytest

from vadlab import autodiff as ad
from vadlab import netbuilder as nb
from vadlab.autodiff import Tensor

STEP, RTOL, ATOL = 1e-3, 1e-4, 1e-6


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def weighted(out: Tensor, seed: int = 99) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.tensor_sum(ad.mul(out, Tensor(w, dtype=np.float64)))


def check(fn, inputs, **kw):
    report = ad.gradcheck(fn, inputs, step=STEP, rtol=RTOL, atol=ATOL, **kw)
    assert report.passed, report.summary() + f" {report.failures[:3]}"
    return report


def _cases():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    row = leaf(rng, 1, 4)
    x_mm, w_mm = leaf(rng, 3, 5), leaf(rng, 5, 2)
    xd, wd, bd = leaf(rng, 4, 6), leaf(rng, 6, 3), leaf(rng, 3)
    xr = leaf(rng, 5, 7)
    xc, wc = leaf(rng, 2, 3, 6, 5), leaf(rng, 4, 3, 3, 3, scale=0.5)
    xh = leaf(rng, 2, 6, 5, 3)
    xb, gb, bb = leaf(rng, 4, 3, 3, 3), leaf(rng, 3), leaf(rng, 3)
    xp = leaf(rng, 2, 2, 5, 4)
    xg = leaf(rng, 2, 3, 4, 4)
    xs = leaf(rng, 3, 5)
    xe = leaf(rng, 6, 4, scale=2.0)
    labels = np.array([0, 3, 1, 2, 3, 0])
    p, q = leaf(rng, 2, 3), leaf(rng, 1, 3)
    running = (np.zeros(3), np.ones(3))
    return {
        "add": (lambda: weighted(ad.add(a, row)), {"a": a, "row": row}),
        "sub": (lambda: weighted(ad.sub(a, b)), {"a": a, "b": b}),
        "mul": (lambda: weighted(ad.mul(a, row)), {"a": a, "row": row}),
        "mean": (lambda: ad.mean(ad.mul(a, a)), {"a": a}),
        "reshape_transpose": (lambda: weighted(ad.transpose(ad.reshape(a, (2, 6)), (1, 0))), {"a": a}),
        "matmul": (lambda: weighted(ad.matmul(x_mm, w_mm)), {"x": x_mm, "w": w_mm}),
        "dense": (lambda: weighted(ad.dense(xd, wd, bd)), {"x": xd, "w": wd, "b": bd}),
        "relu": (lambda: weighted(ad.relu(xr)), {"x": xr}),
        "conv_nchw_s1_p1": (lambda: weighted(ad.conv2d(xc, wc, 1, 1)), {"x": xc, "w": wc}),
        "conv_nchw_s2_p0": (lambda: weighted(ad.conv2d(xc, wc, 2, 0)), {"x": xc, "w": wc}),
        "conv_nhwc_s2_p1": (lambda: weighted(ad.conv2d(xh, wc, 2, 1, layout="NHWC")), {"x": xh, "w": wc}),
        "batch_norm_train": (lambda: weighted(ad.batch_norm2d(xb, gb, bb, *map(np.copy, running), True)),
                             {"x": xb, "gamma": gb, "beta": bb}),
        "batch_norm_eval": (lambda: weighted(ad.batch_norm2d(xb, gb, bb, np.full(3, 0.2), np.full(3, 1.5),
                                                             False)), {"x": xb, "gamma": gb, "beta": bb}),
        "max_pool2": (lambda: weighted(ad.max_pool2(xp)), {"x": xp}),
        "global_avg_pool": (lambda: weighted(ad.global_avg_pool(xg)), {"x": xg}),
        "softmax": (lambda: weighted(ad.softmax(xs)), {"x": xs}),
        "cross_entropy": (lambda: ad.softmax_cross_entropy(xe, labels), {"logits": xe}),
        "concat": (lambda: weighted(ad.concat([p, q], axis=0)), {"p": p, "q": q}),
    }


CASES = _cases()


@pytest.mark.parametrize("name", list(CASES))
def test_op_gradient(name):
    fn, inputs = CASES[name]
    check(fn, inputs)


TINY = nb.ArchSpec((nb.BlockSpec((3,), True), nb.BlockSpec((4,), True), nb.BlockSpec((5,))), num_classes=3)


def composite_case(k=1, seed=0):
    with ad.precision(np.float64):
        net = nb.build(TINY.with_shared_blocks(k), "ssl_mv", num_views=2, seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if ".bn." in name:  # move gamma/beta off their init so their grads are generic
            p.data += rng.standard_normal(p.shape) * 0.1
    x = rng.random((4, 3, 8, 8))
    y = np.array([0, 1, 2, 1])

    def loss():
        h = net.trunk_forward(x, training=True)
        total = ad.softmax_cross_entropy(net.branch_forward("view_0", h, True), y)
        return ad.add(total, ad.softmax_cross_entropy(net.branch_forward("view_1", h, True), y))
    loss.x, loss.y = x, y
    return net, loss


def test_three_block_composite_net():
    start = time.perf_counter()
    net, loss = composite_case()
    report = check(loss, net.params)
    assert report.checked > 0.95 * sum(p.size for p in net.params.values())
    assert time.perf_counter() - start < 120


def test_composite_float32_matches_float64():
    net64, loss64 = composite_case(k=2)
    ad.zero_grad(net64.params.values())
    ad.backward(loss64())
    net32 = nb.build(TINY.with_shared_blocks(2), "ssl_mv", num_views=2, seed=0)
    for n, p in net32.params.items():
        p.data = net64.params[n].data.astype(np.float32)
    x, y = loss64.x.astype(np.float32), loss64.y
    h = net32.trunk_forward(x, True)
    l32 = ad.add(ad.softmax_cross_entropy(net32.branch_forward("view_0", h, True), y),
                 ad.softmax_cross_entropy(net32.branch_forward("view_1", h, True), y))
    ad.backward(l32)
    for n in net64.params:
        np.testing.assert_allclose(net32.params[n].grad, net64.params[n].grad, rtol=1e-3, atol=1e-4)


def test_gradients_bit_deterministic():
    grads = []
    for _ in range(2):
        net, loss = composite_case(seed=3)
        ad.zero_grad(net.params.values())
        ad.backward(loss())
        grads.append(b"".join(net.params[n].grad.tobytes() for n in sorted(net.params)))
    assert grads[0] == grads[1]


def test_injected_fault_is_detected(monkeypatch):
    from vadlab.autodiff import ops
    monkeypatch.setattr(ops, "FAULTS", {"dense"})
    fn, inputs = CASES["dense"]
    report = ad.gradcheck(fn, inputs, step=STEP, rtol=RTOL, atol=ATOL)
    assert not report.passed


def test_gradcheck_requires_float64():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        ad.gradcheck(lambda: ad.tensor_sum(x), {"x": x})


def test_kink_crossing_is_refined_not_failed():
    x = Tensor(np.array([0.0004, -0.3, 1.0]), requires_grad=True, dtype=np.float64)
    report = ad.gradcheck(lambda: weighted(ad.relu(x)), {"x": x}, step=STEP)
    assert report.passed and report.refined >= 1
