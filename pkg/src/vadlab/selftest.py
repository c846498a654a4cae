"""End-to-end self checks: gradients, transform group laws, pipeline
reductions and binary-format fixtures."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from . import data as D
from . import netbuilder as nb
from . import transforms as T
from . import trainer as tr
from .autodiff import Tensor, ops
from .errors import DataError


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    total: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.total and self.total > 0

    def record(self, label: str, ok: bool) -> None:
        self.total += 1
        if ok:
            self.passed += 1
        else:
            self.failures.append(label)


# ---------------------------------------------------------------- gradient checks

def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor) -> Tensor:
    w = np.random.default_rng(1).standard_normal(out.shape)
    return ad.tensor_sum(ad.mul(out, Tensor(w, dtype=np.float64)))


def gradient_cases() -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    rng = np.random.default_rng(2024)
    a, b, row = _leaf(rng, 2, 3), _leaf(rng, 2, 3), _leaf(rng, 1, 3)
    xm, wm, bm = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    xc, wc = _leaf(rng, 2, 2, 5, 5), _leaf(rng, 3, 2, 3, 3)
    xn, gn, bn = _leaf(rng, 3, 2, 2, 2), _leaf(rng, 2), _leaf(rng, 2)
    xp, xe = _leaf(rng, 1, 2, 4, 4), _leaf(rng, 4, 3)
    xh = _leaf(rng, 2, 5, 4, 2)
    y = np.array([0, 2, 1, 2])
    return {
        "add": (lambda: _weighted(ad.add(a, row)), {"a": a, "row": row}),
        "sub": (lambda: _weighted(ad.sub(a, b)), {"a": a, "b": b}),
        "mul": (lambda: _weighted(ad.mul(a, b)), {"a": a, "b": b}),
        "sum": (lambda: ad.tensor_sum(ad.mul(a, a)), {"a": a}),
        "mean": (lambda: ad.mean(ad.mul(a, a)), {"a": a}),
        "reshape": (lambda: _weighted(ad.transpose(ad.reshape(a, (3, 2)), (1, 0))), {"a": a}),
        "concat": (lambda: _weighted(ad.concat([a, row], axis=0)), {"a": a, "row": row}),
        "matmul": (lambda: _weighted(ad.matmul(xm, wm)), {"x": xm, "w": wm}),
        "dense": (lambda: _weighted(ad.dense(xm, wm, bm)), {"x": xm, "w": wm, "b": bm}),
        "relu": (lambda: _weighted(ad.relu(a)), {"a": a}),
        "conv2d": (lambda: _weighted(ad.conv2d(xc, wc, 2, 1)), {"x": xc, "w": wc}),
        "conv2d-same": (lambda: _weighted(ad.conv2d(xc, wc, 1, 1)), {"x": xc, "w": wc}),
        "conv2d-nhwc": (lambda: _weighted(ad.conv2d(xh, wc, 1, 0, layout="NHWC")), {"x": xh, "w": wc}),
        "batch_norm2d": (lambda: _weighted(ad.batch_norm2d(xn, gn, bn, np.zeros(2), np.ones(2), True)),
                         {"x": xn, "gamma": gn, "beta": bn}),
        "batch_norm2d-eval": (lambda: _weighted(ad.batch_norm2d(xn, gn, bn, np.full(2, 0.3), np.full(2, 2.0),
                                                                False)), {"x": xn, "gamma": gn, "beta": bn}),
        "max_pool2": (lambda: _weighted(ad.max_pool2(xp)), {"x": xp}),
        "max_pool2-nhwc": (lambda: _weighted(ad.max_pool2(xh, layout="NHWC")), {"x": xh}),
        "global_avg_pool": (lambda: _weighted(ad.global_avg_pool(xp)), {"x": xp}),
        "global_avg_pool-nhwc": (lambda: _weighted(ad.global_avg_pool(xh, layout="NHWC")), {"x": xh}),
        "softmax": (lambda: _weighted(ad.softmax(xe)), {"x": xe}),
        "cross_entropy": (lambda: ad.softmax_cross_entropy(xe, y), {"logits": xe}),
    }


def composite_case(seed: int = 0):
    arch = nb.ArchSpec((nb.BlockSpec((3,), True), nb.BlockSpec((4,), True), nb.BlockSpec((5,))), 3)
    with ad.precision(np.float64):
        net = nb.build(arch, "supervised", seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.random((4, 3, 8, 8)), np.array([0, 1, 2, 1])
    return (lambda: ad.softmax_cross_entropy(net.forward("downstream", x, "train"), y)), net.params


def run_gradient_suite() -> SuiteResult:
    res = SuiteResult("gradient-check")
    cases = dict(gradient_cases())
    cases["composite-3-block"] = composite_case()
    for name, (fn, inputs) in cases.items():
        report = ad.gradcheck(fn, inputs, step=1e-3, rtol=1e-4, atol=1e-6)
        res.record(f"{name}: {report.summary()}", report.passed)
    return res


# ---------------------------------------------------------------- transform laws

def run_group_law_suite(num_images: int = 25, seed: int = 0) -> SuiteResult:
    res = SuiteResult("group-law")
    rng = np.random.default_rng(seed)
    perms = list(T.PERMUTATIONS.values())
    for i in range(num_images):
        n = int(rng.integers(1, 9))
        img = rng.random((3, n, n)).astype(np.float32)
        rot_ok = all(T.rotate(T.rotate(img, p), q).tobytes() == T.rotate(img, (p + q) % 4).tobytes()
                     for p, q in itertools.product(range(4), repeat=2))
        res.record(f"rotation law, image {i}", rot_ok)
        perm_ok = all(np.array_equal(T.permute_channels(T.permute_channels(img, p), q),
                                     T.permute_channels(img, T.compose_perms(p, q)))
                      for p, q in itertools.product(perms, repeat=2))
        res.record(f"permutation law, image {i}", perm_ok)
        res.record(f"sharpness identity, image {i}", T.Sharpness(1.0)(img).tobytes() == img.tobytes())
        const = np.full((3, n, n + 1), rng.random())
        gamma = float(rng.uniform(0, 3))
        res.record(f"sharpness fixpoint, image {i}", np.allclose(T.sharpness(const, gamma), const, atol=1e-12))
        out = T.sharpness(img, gamma)
        res.record(f"sharpness range, image {i}", bool(out.min() >= 0 and out.max() <= 1))
    return res


# ---------------------------------------------------------------- reduction laws

def run_reduction_suite(steps: int = 6) -> SuiteResult:
    res = SuiteResult("reduction-law")
    blocks = [{"widths": [4], "pool": True}, {"widths": [6], "pool": True}, {"widths": [8]}]
    dataset = {"name": "synthetic", "num_classes": 3, "train_size": 4 * steps, "test_size": 6,
               "image_size": 8}
    runs = {}
    for pipeline, views in (("supervised", None), ("ssl_mv", "id")):
        losses: list[float] = []
        cfg = tr.RunConfig(pipeline=pipeline, views=views, arch={"blocks": blocks}, epochs=1, batch_size=4,
                           dataset=dataset)
        net, _ = tr.train(cfg, on_step=lambda e, s, v: losses.append(v))
        runs[pipeline] = (net, losses)
    sup, mv = runs["supervised"], runs["ssl_mv"]
    res.record("single-view multi-view per-step losses equal supervised", sup[1] == mv[1] and len(sup[1]) >= 5)
    same = all(p.data.tobytes() == mv[0].params[n.replace("downstream.", "view_0.")].data.tobytes()
               for n, p in sup[0].params.items())
    res.record("single-view multi-view final parameters equal supervised", same)

    arch = nb.ArchSpec.from_dict({"blocks": blocks, "num_classes": 3})
    x = D.generate_synthetic(1, 6, 3, 8, 8)
    rot = T.build_view_set([{"kind": "rotation", "values": [0, 90, 180, 270]}])
    base = tr.loss_supervised(nb.build(arch, "supervised", seed=3), x.images, x.labels).item()
    zero = tr.loss_mt(nb.build(arch, "ssl_mt", 4, seed=3), x.images, x.labels, rot, 0.0).item()
    res.record("multi-task loss with zero pretext weight equals supervised", zero == base)
    one = tr.loss_mt(nb.build(arch, "ssl_mt", 1, seed=3), x.images, x.labels, T.IDENTITY_VIEWS, 1.0).item()
    res.record("multi-task loss with identity-only views equals supervised", one == base)
    return res


# ---------------------------------------------------------------- parser fixtures

def _rejects(blob: bytes, parser) -> bool:
    try:
        parser(blob)
    except DataError as exc:
        return exc.exit_code == 2
    return False


def run_parser_suite(seed: int = 0) -> SuiteResult:
    res = SuiteResult("parser-fixture")
    rng = np.random.default_rng(seed)
    labels10 = rng.integers(0, 10, 5)
    labels100 = rng.integers(0, 100, 5)
    pixels = rng.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8)
    blob10 = D.serialize_cifar10(labels10, pixels)
    got_labels, got_pixels = D.read_cifar10_records(blob10)
    res.record("cifar10 round trip", D.serialize_cifar10(got_labels, got_pixels) == blob10)
    blob100 = D.serialize_cifar100(labels100, pixels, coarse=labels100 // 5)
    got_labels, got_pixels = D.read_cifar100_records(blob100)
    res.record("cifar100 round trip", D.serialize_cifar100(got_labels, got_pixels, labels100 // 5) == blob100)
    res.record("cifar10 truncated rejected", _rejects(blob10[:-1], D.read_cifar10_records))
    res.record("cifar100 truncated rejected", _rejects(blob100[:3073], D.read_cifar100_records))
    res.record("cifar10 label 10 rejected", _rejects(bytes([10]) + bytes(3072), D.read_cifar10_records))
    res.record("cifar100 label 100 rejected", _rejects(bytes([0, 100]) + bytes(3072), D.read_cifar100_records))
    return res


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradient-check": run_gradient_suite,
    "group-law": run_group_law_suite,
    "reduction-law": run_reduction_suite,
    "parser-fixture": run_parser_suite,
}


def run_selftest(inject_faults: Iterable[str] = ()) -> list[SuiteResult]:
    """Run every suite; ``inject_faults`` names ops whose gradients get corrupted."""
    saved = set(ops.FAULTS)
    ops.FAULTS.update(inject_faults)
    try:
        return [fn() for fn in SUITES.values()]
    finally:
        ops.FAULTS.clear()
        ops.FAULTS.update(saved)


def render(results: list[SuiteResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<15} {r.passed}/{r.total}")
        lines += [f"      failed: {f}" for f in r.failures]
    return "\n".join(lines) + "\n"
