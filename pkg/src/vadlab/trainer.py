"""Training pipelines (supervised, multi-task, multi-view) and inference.

Every view of a sample is produced from the same base-augmented image, and
all views of a batch are consumed in one optimisation step.  The trunk is run
once per view so batch-norm statistics are computed per view batch.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as D
from . import netbuilder as nb
from .autodiff import Tensor
from .errors import ConfigError, NumericalError
from .transforms import IDENTITY_VIEWS, ViewSet, apply_view, build_view_set, parse_view_expression

AGGREGATIONS = ("mean_softmax", "logit_sum", "majority_vote")
NORMALIZATIONS = ("as_written", "mean_over_views")
METRICS_HEADER = ["run_id", "epoch", "split", "pipeline", "loss", "acc_single", "acc_agg", "lr", "wall_ms"]
EVAL_BATCH = 500


# ---------------------------------------------------------------- configuration

def config_from_mapping(cls, d: Mapping[str, Any], what: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{what}: unknown keys {unknown}")
    return cls(**d)


@dataclass
class DataConfig:
    name: str = "synthetic"
    data_dir: str | None = None
    train_per_class: int | None = None
    test_per_class: int | None = None
    # fixed independently of the run seed so all seeds see the same subset
    subset_seed: int = 0
    augment: bool = True
    normalize: bool = True
    # synthetic-only
    num_classes: int = 10
    train_size: int = 64
    test_size: int = 64
    image_size: int = 32
    separability: float = 1.0
    data_seed: int = 0

    def __post_init__(self):
        if self.name not in ("synthetic", *D.KNOWN_DATASETS):
            raise ConfigError(f"unknown dataset {self.name!r}")
        for key in ("train_per_class", "test_per_class"):
            v = getattr(self, key)
            if v is not None and v < 0:
                raise ConfigError(f"{key} must be >= 0")
        if self.name == "synthetic" and (self.num_classes < 1 or self.train_size < 0 or self.test_size < 0):
            raise ConfigError("synthetic dataset needs num_classes >= 1 and non-negative sizes")

    @property
    def num_classes_resolved(self) -> int:
        return self.num_classes if self.name == "synthetic" else D.KNOWN_DATASETS[self.name].num_classes


@dataclass
class RunConfig:
    pipeline: str = "supervised"
    # view-set spec dict, list of families, or a view expression string
    views: Any = None
    # {"scale": "desk", "shared_blocks": k} or an explicit block list
    arch: dict = field(default_factory=lambda: {"scale": "desk", "shared_blocks": 1})
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pretext_weight: float = 1.0
    view_loss_normalization: str = "as_written"
    aggregation: str = "mean_softmax"
    seed: int = 0
    dataset: DataConfig = field(default_factory=DataConfig)
    output_dir: str | None = None
    run_id: str | None = None
    record_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.dataset, Mapping):
            self.dataset = config_from_mapping(DataConfig, self.dataset, "dataset")
        if self.pipeline not in nb.PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; expected one of {nb.PIPELINES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pretext_weight < 0:
            raise ConfigError(f"pretext_weight must be >= 0, got {self.pretext_weight}")
        if not (self.lr > 0 and 0 <= self.momentum < 1 and self.weight_decay >= 0):
            raise ConfigError("need lr > 0, 0 <= momentum < 1 and weight_decay >= 0")
        if self.view_loss_normalization not in NORMALIZATIONS:
            raise ConfigError(f"view_loss_normalization must be one of {NORMALIZATIONS}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.pipeline == "supervised" and self.views not in (None, "id"):
            if len(self.view_set()) != 1:
                raise ConfigError("the supervised pipeline takes no extra views")
        self.view_set()
        self.arch_spec()

    def view_set(self) -> ViewSet:
        try:
            return resolve_view_set(self.views)
        except ValueError as exc:
            raise ConfigError(f"views: {exc}") from None

    def arch_spec(self) -> nb.ArchSpec:
        a = dict(self.arch)
        k = a.pop("shared_blocks", 1)
        if "blocks" in a:
            a.setdefault("num_classes", self.dataset.num_classes_resolved)
            return nb.ArchSpec.from_dict({**a, "shared_blocks": k})
        scale = a.pop("scale", "desk")
        if a:
            raise ConfigError(f"arch: unknown keys {sorted(a)}")
        try:
            return nb.default_arch(self.dataset.num_classes_resolved, scale, int(k))
        except NotImplementedError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.pipeline}-s{self.seed}"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        try:
            return config_from_mapping(cls, d, "run config")
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)


def resolve_view_set(spec: Any) -> ViewSet:
    if spec is None:
        return IDENTITY_VIEWS
    if isinstance(spec, ViewSet):
        return spec
    if isinstance(spec, str):
        transforms = parse_view_expression(spec)
        return ViewSet(tuple(enumerate(transforms)), name=spec)
    return build_view_set(spec)


@dataclass
class MetricsRow:
    run_id: str
    epoch: int
    split: str
    pipeline: str
    loss: float
    acc_single: float
    acc_agg: float | None
    lr: float
    wall_ms: int = 0

    def as_csv(self) -> list[str]:
        agg = "" if self.acc_agg is None else repr(float(self.acc_agg))
        return [self.run_id, str(self.epoch), self.split, self.pipeline, repr(float(self.loss)),
                repr(float(self.acc_single)), agg, repr(float(self.lr)), str(self.wall_ms)]


# ---------------------------------------------------------------- schedule

def lr_at(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Step decay by 10x at ceil(E/2) and again at ceil(3E/4)."""
    if total_epochs < 1 or epoch < 0:
        raise ValueError("need total_epochs >= 1 and epoch >= 0")
    if epoch < math.ceil(0.5 * total_epochs):
        return base_lr
    if epoch < math.ceil(0.75 * total_epochs):
        return base_lr / 10
    return base_lr / 100


# ---------------------------------------------------------------- losses

def make_views(images: np.ndarray, view_set: ViewSet) -> list[np.ndarray]:
    return [apply_view(t, images) for t in view_set.transforms]


def _check_arity(net: nb.SplitNetwork, view_set: ViewSet, pipeline: str) -> None:
    if net.pipeline != pipeline:
        raise ValueError(f"network was built for {net.pipeline}, not {pipeline}")
    if len(view_set) != net.num_views:
        raise ValueError(f"view set has {len(view_set)} views but the network expects {net.num_views}")


def _mt_loss(net, views, labels, weight, training):
    y = np.asarray(labels)
    h0 = net.trunk_forward(views[0], training)
    logits = net.branch_forward("downstream", h0, training)
    pretext = None
    for j, v in enumerate(views):
        h = h0 if j == 0 else net.trunk_forward(v, training)
        ce = ad.softmax_cross_entropy(net.branch_forward("pretext", h, training), np.full(len(y), j))
        pretext = ce if pretext is None else ad.add(pretext, ce)
    total = ad.add(ad.softmax_cross_entropy(logits, y), ad.mul(pretext, Tensor(weight, dtype=pretext.dtype)))
    return total, logits.data


def _mv_loss(net, views, labels, normalization, training):
    y = np.asarray(labels)
    total, first = None, None
    for j, v in enumerate(views):
        logits = net.forward(f"view_{j}", v, "train" if training else "eval")
        ce = ad.softmax_cross_entropy(logits, y)
        total = ce if total is None else ad.add(total, ce)
        if j == 0:
            first = logits.data
    if normalization == "mean_over_views":
        total = ad.mul(total, Tensor(1.0 / len(views), dtype=total.dtype))
    return total, first


def _supervised_loss(net, views, labels, training):
    logits = net.forward("downstream", views[0], "train" if training else "eval")
    return ad.softmax_cross_entropy(logits, np.asarray(labels)), logits.data


def loss_mt(net: nb.SplitNetwork, images: np.ndarray, labels, view_set: ViewSet,
            pretext_weight: float = 1.0, training: bool = True) -> Tensor:
    """Downstream CE on the identity view plus weighted view-label CE summed over views."""
    _check_arity(net, view_set, "ssl_mt")
    return _mt_loss(net, make_views(images, view_set), labels, pretext_weight, training)[0]


def loss_mv(net: nb.SplitNetwork, images: np.ndarray, labels, view_set: ViewSet,
            normalization: str = "as_written", training: bool = True) -> Tensor:
    """Sum over views of the per-view head's batch-mean CE (optionally divided by M+1)."""
    _check_arity(net, view_set, "ssl_mv")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    return _mv_loss(net, make_views(images, view_set), labels, normalization, training)[0]


def loss_supervised(net: nb.SplitNetwork, images: np.ndarray, labels, training: bool = True) -> Tensor:
    return _supervised_loss(net, [images], labels, training)[0]


# ---------------------------------------------------------------- inference

def single_branch(net: nb.SplitNetwork) -> str:
    return "view_0" if net.pipeline == "ssl_mv" else "downstream"


def _batched_logits(net: nb.SplitNetwork, branch: str, images: np.ndarray) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(images), EVAL_BATCH):
            out.append(net.forward(branch, images[s:s + EVAL_BATCH], "eval").data.astype(np.float64))
    return np.concatenate(out)


def _single_or_batch(fn):
    def wrapper(net, image, *args, **kwargs):
        batched = image.ndim == 4
        classes, probs = fn(net, image if batched else image[None], *args, **kwargs)
        return (classes, probs) if batched else (int(classes[0]), probs[0])
    wrapper.__doc__ = fn.__doc__
    wrapper.__name__ = fn.__name__
    return wrapper


@_single_or_batch
def predict_single(net: nb.SplitNetwork, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax of the identity-view head (``view_0``) or of the downstream head."""
    probs = ad.softmax_np(_batched_logits(net, single_branch(net), images))
    return probs.argmax(axis=1), probs


def aggregate_probabilities(per_view_logits: Sequence[np.ndarray], method: str = "mean_softmax") -> np.ndarray:
    """Combine per-view logits in the given (fixed) view order."""
    if not per_view_logits:
        raise ValueError("need at least one view")
    if method == "mean_softmax":
        acc = np.zeros_like(per_view_logits[0], dtype=np.float64)
        for z in per_view_logits:
            acc += ad.softmax_np(np.asarray(z, dtype=np.float64))
        return acc / len(per_view_logits)
    if method == "logit_sum":
        acc = np.zeros_like(per_view_logits[0], dtype=np.float64)
        for z in per_view_logits:
            acc += z
        return ad.softmax_np(acc)
    if method == "majority_vote":
        k = per_view_logits[0].shape[1]
        votes = np.zeros_like(per_view_logits[0], dtype=np.float64)
        for z in per_view_logits:
            votes += np.eye(k)[np.asarray(z).argmax(axis=1)]
        return votes / len(per_view_logits)
    raise ValueError(f"unknown aggregation {method!r}")


@_single_or_batch
def predict_aggregated(net: nb.SplitNetwork, images: np.ndarray, view_set: ViewSet,
                       method: str = "mean_softmax") -> tuple[np.ndarray, np.ndarray]:
    """Combine every view head applied to its own view of the input."""
    if net.pipeline != "ssl_mv":
        raise ValueError(f"aggregated inference needs per-view heads; this is a {net.pipeline} network")
    _check_arity(net, view_set, "ssl_mv")
    logits = [_batched_logits(net, f"view_{j}", apply_view(t, images)) for j, t in view_set]
    probs = aggregate_probabilities(logits, method)
    return probs.argmax(axis=1), probs


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


@dataclass
class EvalResult:
    acc_single: float
    acc_agg: float | None
    loss: float


def evaluate_full(net: nb.SplitNetwork, dataset: D.Dataset, view_set: ViewSet | None = None,
                  method: str = "mean_softmax") -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    branch = single_branch(net)
    logits0 = _batched_logits(net, branch, dataset.images)
    probs = ad.softmax_np(logits0)
    # argmax picks the lowest index on ties
    acc_single = accuracy(probs.argmax(axis=1), dataset.labels)
    picked = probs[np.arange(len(dataset)), dataset.labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    acc_agg = None
    if net.pipeline == "ssl_mv" and view_set is not None:
        _check_arity(net, view_set, "ssl_mv")
        logits = [logits0] + [_batched_logits(net, f"view_{j}", apply_view(t, dataset.images))
                              for j, t in list(view_set)[1:]]
        acc_agg = accuracy(aggregate_probabilities(logits, method).argmax(axis=1), dataset.labels)
    return EvalResult(acc_single, acc_agg, loss)


def evaluate(net: nb.SplitNetwork, dataset: D.Dataset, view_set: ViewSet | None = None,
             method: str = "mean_softmax") -> tuple[float, float | None]:
    """``(acc_single, acc_agg)``; ``acc_agg`` is ``None`` for networks without view heads."""
    r = evaluate_full(net, dataset, view_set, method)
    return r.acc_single, r.acc_agg


# ---------------------------------------------------------------- data

def load_datasets(cfg: DataConfig) -> tuple[D.Dataset, D.Dataset]:
    if cfg.name == "synthetic":
        s = cfg.image_size
        train = D.generate_synthetic(cfg.data_seed, cfg.train_size, cfg.num_classes, s, s, cfg.separability, 0)
        test = D.generate_synthetic(cfg.data_seed, cfg.test_size, cfg.num_classes, s, s, cfg.separability, 1)
        return train, test
    meta = D.KNOWN_DATASETS[cfg.name]
    out = []
    for (labels, pixels), per_class in zip(D.load_cifar(cfg.name, cfg.data_dir),
                                           (cfg.train_per_class, cfg.test_per_class)):
        idx = np.arange(len(labels)) if per_class is None else \
            D.subset_indices(labels, meta.num_classes, per_class, cfg.subset_seed)
        out.append(D.Dataset(pixels[idx].astype(np.float32) / np.float32(255.0), labels[idx],
                             meta.num_classes, cfg.name))
    return out[0], out[1]


def dataset_stats(train: D.Dataset, test: D.Dataset) -> dict[str, Any]:
    mean, std = D.channel_stats(train.images) if len(train) else (np.zeros(3), np.ones(3))
    return {"train_size": len(train), "test_size": len(test), "num_classes": train.num_classes,
            "train_class_counts": np.bincount(train.labels, minlength=train.num_classes).tolist(),
            "channel_mean": [float(v) for v in mean], "channel_std": [float(v) for v in std]}


# ---------------------------------------------------------------- training loop

StepCallback = Callable[[int, int, float], None]


def _write_csv_rows(path: Path, rows: Sequence[MetricsRow], header: bool) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    with open(path, "a" if not header else "w", newline="") as fh:
        fh.write(buf.getvalue())


def train(cfg: RunConfig, data: tuple[D.Dataset, D.Dataset] | None = None,
          on_step: StepCallback | None = None) -> tuple[nb.SplitNetwork, list[MetricsRow]]:
    """Train one configuration; deterministic for a given config and data.

    Writes ``metrics.csv``, ``model.vadl`` (+ sidecar) and ``run.json`` under
    ``cfg.output_dir`` when it is set.
    """
    view_set = cfg.view_set() if cfg.pipeline != "supervised" else IDENTITY_VIEWS
    arch = cfg.arch_spec()
    train_ds, test_ds = data if data is not None else load_datasets(cfg.dataset)
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    if train_ds.num_classes != arch.num_classes:
        raise ConfigError(f"dataset has {train_ds.num_classes} classes but the head has {arch.num_classes}")

    net = nb.build(arch, cfg.pipeline, len(view_set), cfg.seed)
    stats = dataset_stats(train_ds, test_ds)
    if cfg.dataset.normalize:
        net.input_mean = np.asarray(stats["channel_mean"], dtype=np.float32)
        std = np.asarray(stats["channel_std"], dtype=np.float32)
        net.input_std = np.where(std > 0, std, np.float32(1.0)).astype(np.float32)

    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv_rows(out_dir / "metrics.csv", [], header=True)

    state = ad.SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    params = net.params
    rows: list[MetricsRow] = []
    run_id = cfg.resolved_run_id
    step = 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        state.learning_rate = lr_at(epoch, cfg.epochs, cfg.lr)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        loss_sum, correct, seen = 0.0, 0, 0
        t0 = time.perf_counter()
        for batch in D.make_batches(train_ds, cfg.batch_size, cfg.seed, epoch):
            base = D.augment_batch(batch.images, aug_rng, cfg.dataset.augment)
            views = make_views(base, view_set)
            # overflow surfaces as a non-finite loss below, so numpy's warnings are redundant
            with np.errstate(over="ignore", invalid="ignore"):
                if cfg.pipeline == "ssl_mt":
                    loss, logits = _mt_loss(net, views, batch.labels, cfg.pretext_weight, True)
                elif cfg.pipeline == "ssl_mv":
                    loss, logits = _mv_loss(net, views, batch.labels, cfg.view_loss_normalization, True)
                else:
                    loss, logits = _supervised_loss(net, views, batch.labels, True)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch} step {step} ({run_id})",
                                         epoch=epoch, step=step)
                ad.zero_grad(params.values())
                ad.backward(loss)
                ad.sgd_step(params, state)
            if on_step is not None:
                on_step(epoch, step, value)
            n = len(batch.labels)
            loss_sum += value * n
            correct += int(np.sum(logits.argmax(axis=1) == batch.labels))
            seen += n
            step += 1
        train_ms = int((time.perf_counter() - t0) * 1000) if cfg.record_wall_time else 0
        epoch_rows = [MetricsRow(run_id, epoch, "train", cfg.pipeline, loss_sum / seen, correct / seen,
                                 None, state.learning_rate, train_ms)]
        if len(test_ds):
            t1 = time.perf_counter()
            r = evaluate_full(net, test_ds, view_set if cfg.pipeline == "ssl_mv" else None, cfg.aggregation)
            test_ms = int((time.perf_counter() - t1) * 1000) if cfg.record_wall_time else 0
            epoch_rows.append(MetricsRow(run_id, epoch, "test", cfg.pipeline, r.loss, r.acc_single,
                                         r.acc_agg, state.learning_rate, test_ms))
        rows.extend(epoch_rows)
        if out_dir is not None:
            _write_csv_rows(out_dir / "metrics.csv", epoch_rows, header=False)

    if out_dir is not None:
        meta = {"seed": cfg.seed, "views": cfg.views, "view_labels": view_set.describe(), "run_id": run_id}
        nb.save_network(net, out_dir / "model.vadl", meta)
        run_meta = {"config": cfg.to_dict(), "dataset": stats, "version": f"vadlab {__version__}",
                    "steps": step}
        if cfg.record_wall_time:
            run_meta["wall_seconds"] = round(time.perf_counter() - started, 3)
        (out_dir / "run.json").write_text(json.dumps(run_meta, indent=2, sort_keys=True) + "\n")
    return net, rows


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
