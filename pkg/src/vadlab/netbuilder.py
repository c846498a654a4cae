"""Shared-trunk, multi-head networks with a configurable split point.

The first ``shared_blocks`` blocks form the trunk ``f``; every branch owns
private copies of the remaining blocks followed by a dense head on a
globally average-pooled embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .data import DatasetMeta
from .errors import ConfigError

PIPELINES = ("supervised", "ssl_mt", "ssl_mv")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BlockSpec:
    widths: tuple[int, ...]
    pool: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"widths": list(self.widths), "pool": self.pool}


@dataclass(frozen=True)
class ArchSpec:
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    shared_blocks: int = 1
    embed_dim: int | None = None
    in_channels: int = 3

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("architecture needs at least one block")
        if any(not b.widths for b in self.blocks):
            raise ConfigError("every block needs at least one conv width")
        if not 1 <= self.shared_blocks <= len(self.blocks):
            raise ConfigError(f"shared_blocks must be in [1, {len(self.blocks)}], got {self.shared_blocks}")
        last = self.blocks[-1].widths[-1]
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", last)
        elif self.embed_dim != last:
            raise ConfigError(f"embed_dim {self.embed_dim} must equal the last conv width {last}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    def with_shared_blocks(self, k: int) -> "ArchSpec":
        return ArchSpec(self.blocks, self.num_classes, k, self.embed_dim, self.in_channels)

    def to_dict(self) -> dict[str, Any]:
        return {"blocks": [b.to_dict() for b in self.blocks], "num_classes": self.num_classes,
                "shared_blocks": self.shared_blocks, "embed_dim": self.embed_dim,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ArchSpec":
        try:
            blocks = tuple(BlockSpec(tuple(int(w) for w in b["widths"]), bool(b.get("pool", False)))
                           for b in d["blocks"])
            return cls(blocks, int(d["num_classes"]), int(d.get("shared_blocks", 1)),
                       d.get("embed_dim"), int(d.get("in_channels", 3)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed architecture: {exc}") from None


def default_arch(dataset: DatasetMeta | int, scale: str = "desk", shared_blocks: int = 1) -> ArchSpec:
    """Three blocks of two 3x3 convs (32/64/128 wide), pooling after the first two."""
    if scale == "full":
        raise NotImplementedError("full-scale ResNet-32/18 is not implemented; use scale='desk'")
    if scale != "desk":
        raise ConfigError(f"unknown architecture scale {scale!r}")
    k = dataset if isinstance(dataset, int) else dataset.num_classes
    blocks = (BlockSpec((32, 32), True), BlockSpec((64, 64), True), BlockSpec((128, 128), False))
    return ArchSpec(blocks, k, shared_blocks)


def branch_layout(pipeline: str, num_classes: int, num_views: int = 1) -> list[tuple[str, int]]:
    """Branch ids in initialisation order with their head widths."""
    if pipeline == "supervised":
        return [("downstream", num_classes)]
    if num_views < 1:
        raise ConfigError(f"{pipeline} needs at least one view, got {num_views}")
    if pipeline == "ssl_mt":
        return [("downstream", num_classes), ("pretext", num_views)]
    if pipeline == "ssl_mv":
        return [(f"view_{j}", num_classes) for j in range(num_views)]
    raise ConfigError(f"unknown pipeline {pipeline!r}; expected one of {PIPELINES}")


def _conv_param_count(cin: int, cout: int) -> int:
    return cin * cout * 9 + 2 * cout


def _blocks_param_count(arch: ArchSpec, blocks: Iterable[int]) -> int:
    total = 0
    for b in blocks:
        cin = arch.in_channels if b == 0 else arch.blocks[b - 1].widths[-1]
        for w in arch.blocks[b].widths:
            total += _conv_param_count(cin, w)
            cin = w
    return total


def count_parameters(arch: ArchSpec, pipeline: str, num_views: int = 1) -> int:
    """Closed-form trainable parameter count (running statistics excluded)."""
    n_blocks = len(arch.blocks)
    total = _blocks_param_count(arch, range(arch.shared_blocks))
    tail = _blocks_param_count(arch, range(arch.shared_blocks, n_blocks))
    for _, width in branch_layout(pipeline, arch.num_classes, num_views):
        total += tail + arch.embed_dim * width + width
    return total


@dataclass
class SplitNetwork:
    arch: ArchSpec
    pipeline: str
    num_views: int
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    branches: dict[str, int]
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))
    # last trunk activation computed (NHWC); read by tests probing sharing
    last_trunk_output: np.ndarray | None = field(default=None, repr=False)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    # ------------------------------------------------------------ parameter views
    def trunk_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("trunk.")]

    def branch_names(self, branch_id: str) -> list[str]:
        self._check_branch(branch_id)
        return [n for n in self.params if n.startswith(branch_id + ".")]

    def parameters(self, branch_id: str | None = None) -> dict[str, Tensor]:
        if branch_id is None:
            return dict(self.params)
        names = self.trunk_names() + self.branch_names(branch_id)
        return {n: self.params[n] for n in names}

    def _check_branch(self, branch_id: str) -> None:
        if branch_id not in self.branches:
            raise KeyError(f"unknown branch {branch_id!r}; this {self.pipeline} net has {list(self.branches)}")

    # ------------------------------------------------------------ forward
    def _block(self, prefix: str, b: int, h: Tensor, training: bool) -> Tensor:
        for c in range(len(self.arch.blocks[b].widths)):
            base = f"{prefix}.block{b}.conv{c}"
            h = ad.conv2d(h, self.params[base + ".weight"], stride=1, padding=1, layout="NHWC")
            h = ad.batch_norm2d(h, self.params[base + ".bn.gamma"], self.params[base + ".bn.beta"],
                                self.buffers[base + ".bn.running_mean"],
                                self.buffers[base + ".bn.running_var"],
                                training, BN_EPS, BN_MOMENTUM, layout="NHWC")
            h = ad.relu(h)
        if self.arch.blocks[b].pool:
            h = ad.max_pool2(h, layout="NHWC")
        return h

    def prepare(self, images: np.ndarray) -> np.ndarray:
        """Normalise raw ``N x 3 x H x W`` pixels and move channels last."""
        dt = self.dtype
        x = (images.astype(dt, copy=False) - self.input_mean.astype(dt)[:, None, None]) \
            / self.input_std.astype(dt)[:, None, None]
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))

    def trunk_forward(self, images: np.ndarray | Tensor, training: bool) -> Tensor:
        h = images if isinstance(images, Tensor) else Tensor(self.prepare(images))
        for b in range(self.arch.shared_blocks):
            h = self._block("trunk", b, h, training)
        self.last_trunk_output = h.data
        return h

    def branch_forward(self, branch_id: str, h: Tensor, training: bool) -> Tensor:
        self._check_branch(branch_id)
        for b in range(self.arch.shared_blocks, len(self.arch.blocks)):
            h = self._block(branch_id, b, h, training)
        emb = ad.global_avg_pool(h, layout="NHWC")
        return ad.dense(emb, self.params[branch_id + ".head.weight"], self.params[branch_id + ".head.bias"])

    def forward(self, branch_id: str, images: np.ndarray | Tensor, mode: str = "eval") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self._check_branch(branch_id)
        training = mode == "train"
        return self.branch_forward(branch_id, self.trunk_forward(images, training), training)

    # ------------------------------------------------------------ state
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.params.items()}
        state.update(self.buffers)
        state["input.mean"] = self.input_mean
        state["input.std"] = self.input_std
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers) | {"input.mean", "input.std"}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)
        for n, buf in self.buffers.items():
            self.buffers[n] = np.array(state[n], dtype=buf.dtype)
        self.input_mean = np.array(state["input.mean"], dtype=np.float32)
        self.input_std = np.array(state["input.std"], dtype=np.float32)


def forward(net: SplitNetwork, branch_id: str, images, mode: str = "eval") -> Tensor:
    return net.forward(branch_id, images, mode)


def _add_block(params, buffers, rng, prefix: str, arch: ArchSpec, b: int) -> None:
    cin = arch.in_channels if b == 0 else arch.blocks[b - 1].widths[-1]
    dt = ad.default_dtype()
    for c, cout in enumerate(arch.blocks[b].widths):
        base = f"{prefix}.block{b}.conv{c}"
        params[base + ".weight"] = ad.he_normal(rng, (cout, cin, 3, 3), fan_in=cin * 9, name=base + ".weight")
        params[base + ".bn.gamma"] = ad.constant((cout,), 1.0, name=base + ".bn.gamma")
        params[base + ".bn.beta"] = ad.constant((cout,), 0.0, name=base + ".bn.beta")
        buffers[base + ".bn.running_mean"] = np.zeros(cout, dtype=dt)
        buffers[base + ".bn.running_var"] = np.ones(cout, dtype=dt)
        cin = cout


def build(arch: ArchSpec, pipeline: str, num_views: int = 1, seed: int = 0) -> SplitNetwork:
    """Build a network for ``pipeline``; ``num_views`` is M+1 for the SSL pipelines.

    Parameters are drawn from a single seeded stream: trunk first, then each
    branch's private blocks and head in branch order.
    """
    layout = branch_layout(pipeline, arch.num_classes, num_views)
    rng = ad.make_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for b in range(arch.shared_blocks):
        _add_block(params, buffers, rng, "trunk", arch, b)
    for bid, width in layout:
        for b in range(arch.shared_blocks, len(arch.blocks)):
            _add_block(params, buffers, rng, bid, arch, b)
        params[bid + ".head.weight"] = ad.he_normal(rng, (arch.embed_dim, width), fan_in=arch.embed_dim,
                                                    name=bid + ".head.weight")
        params[bid + ".head.bias"] = ad.constant((width,), 0.0, name=bid + ".head.bias")
    return SplitNetwork(arch, pipeline, 1 if pipeline == "supervised" else num_views,
                        params, buffers, dict(layout))


def save_network(net: SplitNetwork, path, extra_meta: Mapping[str, Any] | None = None) -> None:
    meta = {"format": "VADL", "version": checkpoint.VERSION, "arch": net.arch.to_dict(),
            "pipeline": net.pipeline, "num_views": net.num_views}
    meta.update(extra_meta or {})
    checkpoint.save(path, net.state_dict(), meta)


def load_network(path) -> tuple[SplitNetwork, dict[str, Any]]:
    tensors, meta = checkpoint.load(path)
    net = build(ArchSpec.from_dict(meta["arch"]), meta["pipeline"], meta["num_views"])
    net.load_state_dict(tensors)
    return net, meta
