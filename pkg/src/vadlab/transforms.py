"""View transforms: rotation, channel permutation, sharpness and composition.

Transforms act on the trailing ``(C, H, W)`` axes, so a single image and a
batch ``(N, C, H, W)`` are handled alike.  Pixel values are assumed to lie
in ``[0, 1]``.

Permutation composition convention, used everywhere: ``compose_perms(p, q)``
is the permutation equal to applying ``p`` and then ``q``, i.e.
``z[k] = x[p[q[k]]]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Sequence, Union

import numpy as np

PERMUTATIONS: dict[str, tuple[int, int, int]] = {
    "RGB": (0, 1, 2),
    "RBG": (0, 2, 1),
    "GRB": (1, 0, 2),
    "GBR": (1, 2, 0),
    "BRG": (2, 0, 1),
    "BGR": (2, 1, 0),
}
_PERM_NAMES = {v: k for k, v in PERMUTATIONS.items()}

# 3x3 smoothing kernel: centre 5, neighbours 1, normalised by 13.
BLUR_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def rotate(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate counterclockwise by ``90 * quarter_turns`` degrees.

    For one turn ``out[c][r][k] = in[c][k][W-1-r]``.
    """
    return np.ascontiguousarray(np.rot90(img, int(quarter_turns) % 4, axes=(-2, -1)))


def permute_channels(img: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Output channel slot ``k`` holds input channel ``perm[k]``."""
    return np.ascontiguousarray(img[..., list(perm), :, :])


def compose_perms(p: Sequence[int], q: Sequence[int]) -> tuple[int, ...]:
    return tuple(p[q[k]] for k in range(len(q)))


def invert_perm(p: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(p)
    for k, v in enumerate(p):
        inv[v] = k
    return tuple(inv)


def blur(img: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(img, pad, mode="reflect")
    h, w = img.shape[-2:]
    out = np.zeros(img.shape, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out += BLUR_KERNEL[i, j] * xp[..., i:i + h, j:j + w]
    return out.astype(img.dtype, copy=False)


def sharpness(img: np.ndarray, gamma: float) -> np.ndarray:
    """Blend between the blurred image (gamma=0) and the original (gamma=1).

    gamma > 1 extrapolates away from the blur; results are clamped to [0, 1].
    """
    soft = blur(img)
    out = img * gamma + soft * (1.0 - gamma)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


@dataclass(frozen=True)
class Rotation:
    quarter_turns: int

    def __post_init__(self):
        if self.quarter_turns not in (0, 1, 2, 3):
            raise ValueError(f"quarter_turns must be 0..3, got {self.quarter_turns}")

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return rotate(img, self.quarter_turns)

    @property
    def is_identity(self) -> bool:
        return self.quarter_turns == 0

    def describe(self) -> str:
        return f"rot{90 * self.quarter_turns}"


@dataclass(frozen=True)
class ChannelPermutation:
    perm: tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(v) for v in self.perm)
        if sorted(perm) != [0, 1, 2]:
            raise ValueError(f"channel permutation must be a bijection on {{0,1,2}}, got {self.perm}")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def named(cls, name: str) -> "ChannelPermutation":
        try:
            return cls(PERMUTATIONS[name.upper()])
        except KeyError:
            raise ValueError(f"unknown channel order {name!r}; expected one of {sorted(PERMUTATIONS)}") from None

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return permute_channels(img, self.perm)

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2)

    def describe(self) -> str:
        return _PERM_NAMES[self.perm]


@dataclass(frozen=True)
class Sharpness:
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"sharpness gamma must be finite and >= 0, got {self.gamma}")

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return sharpness(img, self.gamma)

    @property
    def is_identity(self) -> bool:
        return self.gamma == 1

    def describe(self) -> str:
        return f"sharp{self.gamma:g}"


@dataclass(frozen=True)
class Composition:
    transforms: tuple["ViewTransform", ...]

    def __post_init__(self):
        if not self.transforms:
            raise ValueError("a composition needs at least one transform")

    def __call__(self, img: np.ndarray) -> np.ndarray:
        for t in self.transforms:
            img = t(img)
        return img

    @property
    def is_identity(self) -> bool:
        return all(t.is_identity for t in self.transforms)

    def describe(self) -> str:
        return "+".join(t.describe() for t in self.transforms)


ViewTransform = Union[Rotation, ChannelPermutation, Sharpness, Composition]


def compose(ts: Sequence[ViewTransform]) -> Composition:
    """Apply ``ts`` left to right."""
    return Composition(tuple(ts))


IDENTITY = Rotation(0)


@dataclass(frozen=True)
class ViewSet:
    """Labelled views ``(j, T_j)`` for ``j = 0..M`` with ``T_0`` the identity."""

    views: tuple[tuple[int, ViewTransform], ...]
    name: str = ""

    def __post_init__(self):
        if not self.views:
            raise ValueError("a view set needs at least the identity view")
        labels = [j for j, _ in self.views]
        if labels != list(range(len(labels))):
            raise ValueError(f"view labels must be exactly 0..M in order, got {labels}")
        if not self.views[0][1].is_identity:
            raise ValueError(f"view 0 must be the identity, got {self.views[0][1].describe()}")

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self) -> Iterator[tuple[int, ViewTransform]]:
        return iter(self.views)

    @property
    def M(self) -> int:  # noqa: N802 - number of non-identity views
        return len(self.views) - 1

    @property
    def transforms(self) -> list[ViewTransform]:
        return [t for _, t in self.views]

    def describe(self) -> list[str]:
        return [t.describe() for t in self.transforms]


IDENTITY_VIEWS = ViewSet(((0, IDENTITY),), name="identity")


# ---------------------------------------------------------------- declarative specs

_FAMILY_KINDS = ("rotation", "permutation", "sharpness")


def _family_member(kind: str, value: Any) -> ViewTransform:
    if kind == "rotation":
        deg = int(value)
        if deg % 90:
            raise ValueError(f"rotation angles must be multiples of 90 degrees, got {value}")
        return Rotation((deg // 90) % 4)
    if kind == "permutation":
        if isinstance(value, str):
            return ChannelPermutation.named(value)
        return ChannelPermutation(tuple(value))
    if kind == "sharpness":
        return Sharpness(float(value))
    raise ValueError(f"unknown transform family {kind!r}; expected one of {_FAMILY_KINDS}")


def build_view_set(spec: Mapping[str, Any] | Sequence[Mapping[str, Any]]) -> ViewSet:
    """Expand a declarative spec into a :class:`ViewSet`.

    ``spec`` is ``{"name": ..., "families": [{"kind": "rotation", "values": [0, 90]}, ...]}``
    (or just the list of families).  Rotation values are degrees, permutation
    values channel-order names such as ``"GBR"``, sharpness values gammas.

    The views are the Cartesian product of the families, applied in the
    listed order.  Every family must contain its identity element; the
    all-identity combination is pinned to label 0 and the remaining
    combinations follow in listed order.
    """
    if isinstance(spec, Mapping):
        name = str(spec.get("name", ""))
        families = spec.get("families")
    else:
        name, families = "", spec
    if not families:
        raise ValueError("view spec needs at least one transform family")
    expanded: list[list[ViewTransform]] = []
    for fam in families:
        kind = fam.get("kind")
        values = fam.get("values")
        if not values:
            raise ValueError(f"{kind} family has no values")
        members = [_family_member(kind, v) for v in values]
        if len(set(members)) != len(members):
            raise ValueError(f"{kind} family lists a transform twice: {values}")
        identity = [m for m in members if m.is_identity]
        if not identity:
            raise ValueError(f"{kind} family {list(values)} lacks its identity element")
        expanded.append(identity + [m for m in members if not m.is_identity])
    views = []
    for j, combo in enumerate(itertools.product(*expanded)):
        t = combo[0] if len(combo) == 1 else compose(combo)
        views.append((j, t))
    return ViewSet(tuple(views), name=name)


def apply_view(t: ViewTransform, images: np.ndarray) -> np.ndarray:
    return images if t.is_identity else t(images)


# ---------------------------------------------------------------- preview expressions

_ALIASES = {"id": "rot:0", "rot90": "rot:1", "rot180": "rot:2", "rot270": "rot:3"}


def _parse_token(token: str) -> list[ViewTransform]:
    token = _ALIASES.get(token.strip().lower(), token.strip())
    if ":" not in token:
        raise ValueError(f"cannot parse transform {token!r}")
    kind, arg = token.split(":", 1)
    kind = kind.lower()
    if kind == "rot":
        values = ["0", "1", "2", "3"] if arg == "*" else arg.split("|")
        return [Rotation(int(v)) for v in values]
    if kind == "perm":
        values = list(PERMUTATIONS) if arg == "*" else arg.split("|")
        return [ChannelPermutation.named(v) for v in values]
    if kind == "sharp":
        return [Sharpness(float(v)) for v in arg.split("|")]
    raise ValueError(f"unknown transform kind {kind!r} in {token!r}")


def parse_view_expression(expr: str) -> list[ViewTransform]:
    """Parse a preview expression into an ordered list of transforms.

    Grammar: views are comma-separated; a view is ``+``-joined transforms
    applied left to right; a transform is ``rot:<quarter turns>``,
    ``perm:<channel order>``, ``sharp:<gamma>`` or ``id``.  ``*`` and
    ``a|b|c`` alternatives expand to one view per choice, e.g.
    ``perm:*`` gives all six channel orders.
    """
    out: list[ViewTransform] = []
    for view in expr.split(","):
        if not view.strip():
            raise ValueError(f"empty view in expression {expr!r}")
        choices = [_parse_token(tok) for tok in view.split("+")]
        for combo in itertools.product(*choices):
            out.append(combo[0] if len(combo) == 1 else compose(combo))
    return out
