import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vadlab import autodiff as ad
from vadlab import data as D
from vadlab import netbuilder as nb
from vadlab import trainer as tr
from vadlab.errors import ConfigError, NumericalError
from vadlab.transforms import IDENTITY, ViewSet, build_view_set

SMALL = {"blocks": [{"widths": [4], "pool": True}, {"widths": [6], "pool": True}, {"widths": [8]}],
         "shared_blocks": 1}
ROT = build_view_set([{"kind": "rotation", "values": [0, 90, 180, 270]}])


def small_arch(k=3, **kw):
    return nb.ArchSpec.from_dict({**SMALL, "num_classes": k, **kw})


def batch(n=6, k=3, hw=8, seed=0):
    ds = D.generate_synthetic(seed, n, k, hw, hw)
    return ds.images, ds.labels


def small_cfg(**kw):
    base = dict(arch=SMALL, epochs=2, batch_size=8,
                dataset={"name": "synthetic", "num_classes": 3, "train_size": 24, "test_size": 12,
                         "image_size": 8})
    base.update(kw)
    return tr.RunConfig(**base)


# ---------------------------------------------------------------- schedule

def test_lr_schedule_long_run():
    assert tr.lr_at(0, 200, 0.1) == 0.1
    assert tr.lr_at(100, 200, 0.1) == 0.01
    assert tr.lr_at(150, 200, 0.1) == 0.001


def test_lr_single_epoch():
    assert tr.lr_at(0, 1, 0.1) == 0.1


def test_lr_four_epochs_boundary_oracle():
    assert [tr.lr_at(e, 4, 0.1) for e in range(4)] == [0.1, 0.1, 0.01, 0.001]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.floats(1e-4, 10))
def test_schedule_law(total, base):
    values = [tr.lr_at(e, total, base) for e in range(total)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert set(values) <= {base, base / 10, base / 100}
    assert values[0] == base


# ---------------------------------------------------------------- multi-task loss

def test_mt_identity_only_equals_supervised():
    x, y = batch()
    mt = nb.build(small_arch(), "ssl_mt", 1, seed=4)
    sup = nb.build(small_arch(), "supervised", seed=4)
    got = tr.loss_mt(mt, x, y, ViewSet(((0, IDENTITY),)), 1.0).item()
    assert got == tr.loss_supervised(sup, x, y).item()


def test_mt_uniform_pretext_head_oracle():
    x, y = batch()
    net = nb.build(small_arch(), "ssl_mt", 4, seed=1)
    net.params["pretext.head.weight"].data[:] = 0
    net.params["pretext.head.bias"].data[:] = 0
    total = tr.loss_mt(net, x, y, ROT, 1.0).item()
    downstream = ad.softmax_cross_entropy(net.forward("downstream", x, "train"), y).item()
    assert total - downstream == pytest.approx(4 * math.log(4), rel=1e-5)


def test_mt_zero_weight_is_bitwise_supervised():
    x, y = batch()
    mt = nb.build(small_arch(), "ssl_mt", 4, seed=2)
    sup = nb.build(small_arch(), "supervised", seed=2)
    assert tr.loss_mt(mt, x, y, ROT, 0.0).item() == tr.loss_supervised(sup, x, y).item()


def test_mt_arity_mismatch_rejected():
    x, y = batch()
    net = nb.build(small_arch(), "ssl_mt", 3)
    with pytest.raises(ValueError, match="views"):
        tr.loss_mt(net, x, y, ROT)


# ---------------------------------------------------------------- multi-view loss

def test_mv_single_view_is_bitwise_supervised():
    x, y = batch()
    mv = nb.build(small_arch(), "ssl_mv", 1, seed=7)
    sup = nb.build(small_arch(), "supervised", seed=7)
    assert tr.loss_mv(mv, x, y, ViewSet(((0, IDENTITY),))).item() == tr.loss_supervised(sup, x, y).item()


def test_mv_duplicated_identity_view_doubles_loss():
    x, y = batch()
    net = nb.build(small_arch(), "ssl_mv", 2, seed=3)
    for name in net.branch_names("view_0"):
        net.params[name.replace("view_0", "view_1", 1)].data = net.params[name].data.copy()
    sup = nb.build(small_arch(), "supervised", seed=3)
    twin = ViewSet(((0, IDENTITY), (1, IDENTITY)))
    assert tr.loss_mv(net, x, y, twin).item() == pytest.approx(2 * tr.loss_supervised(sup, x, y).item(),
                                                               rel=1e-6)


def test_mv_mean_over_views_scales_by_view_count():
    x, y = batch()
    net = nb.build(small_arch(), "ssl_mv", 4, seed=5)
    written = tr.loss_mv(net, x, y, ROT, "as_written").item()
    averaged = tr.loss_mv(net, x, y, ROT, "mean_over_views").item()
    assert averaged == pytest.approx(written / 4, rel=1e-6)


def test_mv_arity_mismatch_rejected():
    x, y = batch()
    with pytest.raises(ValueError):
        tr.loss_mv(nb.build(small_arch(), "ssl_mv", 2), x, y, ROT)


# ---------------------------------------------------------------- inference

def test_predict_single_probabilities_sum_to_one():
    net = nb.build(small_arch(), "supervised", seed=0)
    cls, p = tr.predict_single(net, batch(1)[0][0])
    assert 0 <= cls < 3 and abs(p.sum() - 1) < 1e-6


def test_predict_single_mv_matches_supervised_path():
    x, _ = batch(4)
    mv = nb.build(small_arch(), "ssl_mv", 1, seed=8)
    sup = nb.build(small_arch(), "supervised", seed=8)
    assert tr.predict_single(mv, x)[1].tobytes() == tr.predict_single(sup, x)[1].tobytes()


def test_predict_single_softmax_oracle():
    net = nb.build(small_arch(), "supervised")
    net.params["downstream.head.weight"].data[:] = 0
    net.params["downstream.head.bias"].data[:] = [1, 2, 3]
    cls, p = tr.predict_single(net, batch(1)[0][0])
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(p, e / e.sum(), atol=1e-7)
    assert cls == 2


def test_aggregated_single_view_equals_single():
    x, _ = batch(3)
    net = nb.build(small_arch(), "ssl_mv", 1, seed=2)
    one = ViewSet(((0, IDENTITY),))
    np.testing.assert_array_equal(tr.predict_aggregated(net, x, one)[1], tr.predict_single(net, x)[1])


def test_aggregation_mean_oracle():
    logits = [np.log([[0.8, 0.2]]), np.log([[0.4, 0.6]])]
    p = tr.aggregate_probabilities(logits)
    np.testing.assert_allclose(p, [[0.6, 0.4]], atol=1e-12)
    assert p.argmax() == 0


def test_aggregation_symmetric_heads_match_single():
    x, _ = batch(3)
    net = nb.build(small_arch(), "ssl_mv", 3, seed=6)
    for j in (1, 2):
        for name in net.branch_names("view_0"):
            net.params[name.replace("view_0", f"view_{j}", 1)].data = net.params[name].data.copy()
    same = ViewSet(((0, IDENTITY), (1, IDENTITY), (2, IDENTITY)))
    np.testing.assert_allclose(tr.predict_aggregated(net, x, same)[1], tr.predict_single(net, x)[1], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**32 - 1), st.data())
def test_aggregation_law(views, k, seed, data):
    rng = np.random.default_rng(seed)
    logits = [rng.normal(0, 3, (4, k)) for _ in range(views)]
    p = tr.aggregate_probabilities(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    order = data.draw(st.permutations(range(views)))
    np.testing.assert_allclose(tr.aggregate_probabilities([logits[i] for i in order]), p, atol=1e-6)


def test_alternative_aggregations():
    logits = [np.array([[2.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[3.0, 0.0]])]
    np.testing.assert_allclose(tr.aggregate_probabilities(logits, "majority_vote"), [[2 / 3, 1 / 3]])
    np.testing.assert_allclose(tr.aggregate_probabilities(logits, "logit_sum"),
                               ad.softmax_np(np.array([[5.0, 1.0]])))


def test_aggregated_rejected_without_view_heads():
    x, _ = batch(2)
    for net in (nb.build(small_arch(), "supervised"), nb.build(small_arch(), "ssl_mt", 4)):
        with pytest.raises(ValueError, match="per-view heads"):
            tr.predict_aggregated(net, x, ROT)


# ---------------------------------------------------------------- evaluation

def test_counting_oracle_with_ties():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 0.0, 0.0]])
    preds = ad.softmax_np(logits).argmax(axis=1)
    assert preds.tolist() == [0, 1, 0]
    assert tr.accuracy(preds, np.array([0, 2, 0])) == pytest.approx(2 / 3)


def test_evaluate_bias_only_head_tie_goes_to_lowest_class():
    ds = D.generate_synthetic(0, 9, 3, 8, 8)
    net = nb.build(small_arch(), "supervised")
    net.params["downstream.head.weight"].data[:] = 0
    net.params["downstream.head.bias"].data[:] = [0, 5, 5]
    acc, agg = tr.evaluate(net, ds)
    assert acc == pytest.approx(np.mean(ds.labels == 1)) and agg is None


def test_evaluate_empty_rejected():
    empty = D.Dataset(np.zeros((0, 3, 8, 8), np.float32), np.zeros(0), 3)
    with pytest.raises(ValueError, match="empty"):
        tr.evaluate(nb.build(small_arch(), "supervised"), empty)


def test_memorised_set_scores_perfectly():
    cfg = small_cfg(pipeline="ssl_mv", views="rot:0|1", epochs=30, batch_size=12,
                    dataset={"name": "synthetic", "num_classes": 3, "train_size": 12, "image_size": 8,
                             "augment": False})
    train, _ = tr.load_datasets(cfg.dataset)
    net, _ = tr.train(cfg, data=(train, train))
    assert tr.evaluate(net, train, cfg.view_set()) == (1.0, 1.0)


# ---------------------------------------------------------------- training loop

def test_single_view_mv_reduces_to_supervised_per_step():
    losses = {}
    nets = {}
    for pipeline, views in (("supervised", None), ("ssl_mv", "id")):
        seen = []
        nets[pipeline], _ = tr.train(small_cfg(pipeline=pipeline, views=views, epochs=3),
                                     on_step=lambda e, s, v: seen.append(v))
        losses[pipeline] = seen
    assert len(losses["supervised"]) >= 5
    assert losses["supervised"] == losses["ssl_mv"]
    for name, p in nets["supervised"].params.items():
        assert p.data.tobytes() == nets["ssl_mv"].params[name.replace("downstream.", "view_0.")].data.tobytes()


def test_training_is_deterministic(tmp_path):
    rows = []
    for i in range(2):
        cfg = small_cfg(pipeline="ssl_mt", views="rot:*", output_dir=str(tmp_path / f"r{i}"))
        rows.append(tr.train(cfg)[1])
    assert rows[0] == rows[1]
    assert (tmp_path / "r0/metrics.csv").read_bytes() == (tmp_path / "r1/metrics.csv").read_bytes()
    assert (tmp_path / "r0/model.vadl").read_bytes() == (tmp_path / "r1/model.vadl").read_bytes()


def test_outputs_written(tmp_path):
    cfg = small_cfg(pipeline="ssl_mv", views="rot:*", output_dir=str(tmp_path))
    net, rows = tr.train(cfg)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(tr.METRICS_HEADER)
    assert len(lines) == 1 + len(rows) == 1 + 2 * cfg.epochs
    test_rows = [r for r in rows if r.split == "test"]
    assert all(r.acc_agg is not None and 0 <= r.acc_agg <= 1 for r in test_rows)
    assert all(math.isfinite(r.loss) and r.loss > 0 for r in rows)
    loaded, meta = nb.load_network(tmp_path / "model.vadl")
    assert meta["views"] == "rot:*" and meta["seed"] == 0
    x = D.generate_synthetic(1, 3, 3, 8, 8).images
    assert loaded.forward("view_2", x).data.tobytes() == net.forward("view_2", x).data.tobytes()
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["config"]["pipeline"] == "ssl_mv" and run["dataset"]["train_size"] == 24
    assert run["version"].startswith("vadlab ")


def test_nan_loss_aborts_with_position():
    train, test = tr.load_datasets(small_cfg().dataset)
    train.images[:, 0, 2, 2] = np.nan
    with pytest.raises(NumericalError, match="epoch 0 step 0") as info:
        tr.train(small_cfg(dataset={**vars(small_cfg().dataset), "normalize": False}), data=(train, test))
    assert info.value.exit_code == 3 and info.value.step == 0


def test_wall_time_only_when_requested():
    _, rows = tr.train(small_cfg(epochs=1))
    assert all(r.wall_ms == 0 for r in rows)


# ---------------------------------------------------------------- configuration

def test_config_round_trip():
    cfg = small_cfg(pipeline="ssl_mt", views={"families": [{"kind": "permutation", "values": ["RGB", "GBR"]}]},
                    pretext_weight=0.5, seed=2**63)
    again = tr.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [{"epochs": 0}, {"batch_size": 0}, {"pretext_weight": -1},
                                 {"pipeline": "jigsaw"}, {"view_loss_normalization": "sum"},
                                 {"aggregation": "max"}, {"arch": {"scale": "full"}},
                                 {"arch": {"scale": "desk", "shared_blocks": 4}}, {"momentum": 1.0},
                                 {"views": "blur:1"}, {"unknown": 1}])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        tr.RunConfig.from_dict({**small_cfg().to_dict(), **bad})


def test_supervised_with_views_rejected():
    with pytest.raises(ConfigError, match="supervised"):
        small_cfg(views="rot:*")
