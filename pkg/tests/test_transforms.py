import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vadlab import transforms as T
from vadlab.ppm import decode_ppm, encode_ppm, make_test_card

images = arrays(np.float32, st.tuples(st.just(3), st.integers(1, 7), st.integers(1, 7)),
                elements=st.floats(0, 1, width=32))
square_images = st.integers(1, 6).flatmap(
    lambda n: arrays(np.float32, (3, n, n), elements=st.floats(0, 1, width=32)))


def rotate_oracle(img):
    c, h, w = img.shape
    out = np.empty((c, w, h), dtype=img.dtype)
    for ch in range(c):
        for r in range(w):
            for k in range(h):
                out[ch, r, k] = img[ch, k, w - 1 - r]
    return out


def blur_oracle(img):
    c, h, w = img.shape

    def refl(i, n):
        if n == 1:
            return 0
        if i < 0:
            return -i
        if i >= n:
            return 2 * (n - 1) - i
        return i

    kernel = [[1, 1, 1], [1, 5, 1], [1, 1, 1]]
    out = np.zeros(img.shape, dtype=np.float64)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for di in range(-1, 2):
                    for dj in range(-1, 2):
                        acc += kernel[di + 1][dj + 1] * img[ch, refl(y + di, h), refl(x + dj, w)]
                out[ch, y, x] = acc / 13.0
    return out


# ---------------------------------------------------------------- rotation

def test_rotate_zero_is_identity():
    img = make_test_card(5, 7)
    np.testing.assert_array_equal(T.rotate(img, 0), img)


def test_rotate_two_by_two_example():
    a, b, d, e = 1.0, 2.0, 3.0, 4.0
    img = np.array([[[a, b], [d, e]]])
    np.testing.assert_array_equal(T.rotate(img, 1), [[[b, e], [a, d]]])


def test_rotate_matches_index_oracle_rectangular():
    img = make_test_card(4, 6)
    out = T.rotate(img, 1)
    assert out.shape == (3, 6, 4)
    np.testing.assert_array_equal(out, rotate_oracle(img))


@settings(max_examples=40, deadline=None)
@given(images)
def test_four_turns_restore(img):
    out = img
    for _ in range(4):
        out = T.rotate(out, 1)
    assert out.tobytes() == img.tobytes()


@settings(max_examples=25, deadline=None)
@given(square_images)
def test_rotation_group_law(img):
    for a, b in itertools.product(range(4), repeat=2):
        lhs = T.rotate(T.rotate(img, a), b)
        assert lhs.tobytes() == T.rotate(img, (a + b) % 4).tobytes()


def test_rotation_preserves_multiset():
    img = make_test_card(6, 9)
    assert sorted(T.rotate(img, 3).ravel()) == sorted(img.ravel())


def test_rotation_rejects_bad_turns():
    with pytest.raises(ValueError):
        T.Rotation(4)


# ---------------------------------------------------------------- permutation

def test_rgb_identity():
    img = make_test_card()
    np.testing.assert_array_equal(T.ChannelPermutation.named("RGB")(img), img)


def test_perm_slot_semantics():
    img = np.stack([np.full((2, 2), v, dtype=np.float32) for v in (0.1, 0.2, 0.3)])
    out = T.ChannelPermutation.named("GBR")(img)
    np.testing.assert_array_equal(out[:, 0, 0], np.array([0.2, 0.3, 0.1], dtype=np.float32))


def test_gbr_twice_is_brg():
    assert T.compose_perms((1, 2, 0), (1, 2, 0)) == (2, 0, 1)
    img = make_test_card()
    gbr = T.ChannelPermutation.named("GBR")
    np.testing.assert_array_equal(gbr(gbr(img)), T.ChannelPermutation.named("BRG")(img))


@settings(max_examples=20, deadline=None)
@given(images)
def test_permutation_group_law_all_pairs(img):
    perms = list(T.PERMUTATIONS.values())
    for p, q in itertools.product(perms, repeat=2):
        lhs = T.permute_channels(T.permute_channels(img, p), q)
        np.testing.assert_array_equal(lhs, T.permute_channels(img, T.compose_perms(p, q)))


@settings(max_examples=20, deadline=None)
@given(images)
def test_perm_inverse(img):
    for p in T.PERMUTATIONS.values():
        back = T.permute_channels(T.permute_channels(img, p), T.invert_perm(p))
        np.testing.assert_array_equal(back, img)


@pytest.mark.parametrize("perm", [(0, 0, 1), (0, 1), (0, 1, 3)])
def test_non_bijective_perm_rejected(perm):
    with pytest.raises(ValueError, match="bijection"):
        T.ChannelPermutation(perm)


# ---------------------------------------------------------------- sharpness

@settings(max_examples=40, deadline=None)
@given(images)
def test_sharpness_one_is_exact_identity(img):
    assert T.Sharpness(1.0)(img).tobytes() == img.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 4), st.integers(1, 6), st.integers(1, 6))
def test_sharpness_constant_fixpoint(v, gamma, h, w):
    img = np.full((3, h, w), v, dtype=np.float64)
    np.testing.assert_allclose(T.sharpness(img, gamma), img, atol=1e-12)


def test_sharpness_zero_is_blur_oracle():
    img = np.random.default_rng(0).random((3, 6, 5))
    np.testing.assert_allclose(T.sharpness(img, 0.0), blur_oracle(img), atol=1e-6)


def test_blur_matches_oracle_on_batches():
    batch = np.random.default_rng(1).random((2, 3, 4, 4))
    for i in range(2):
        np.testing.assert_allclose(T.blur(batch)[i], blur_oracle(batch[i]), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(images, st.floats(0, 5))
def test_sharpness_stays_in_range(img, gamma):
    out = T.sharpness(img, gamma)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1


def test_sharpness_rejects_negative():
    with pytest.raises(ValueError):
        T.Sharpness(-0.5)


# ---------------------------------------------------------------- composition

def test_single_compose_matches_transform():
    img = make_test_card()
    np.testing.assert_array_equal(T.compose([T.Rotation(2)])(img), T.rotate(img, 2))


@settings(max_examples=20, deadline=None)
@given(square_images)
def test_compose_two_quarter_turns(img):
    np.testing.assert_array_equal(T.compose([T.Rotation(1), T.Rotation(1)])(img), T.rotate(img, 2))


@settings(max_examples=20, deadline=None)
@given(images)
def test_compose_identities(img):
    t = T.compose([T.Sharpness(1.0), T.ChannelPermutation.named("RGB")])
    assert t.is_identity
    assert t(img).tobytes() == img.tobytes()


@settings(max_examples=20, deadline=None)
@given(square_images)
def test_compose_associative(img):
    a, b, c = T.Rotation(1), T.ChannelPermutation.named("BGR"), T.Sharpness(0.5)
    left = T.compose([T.compose([a, b]), c])(img)
    right = T.compose([a, T.compose([b, c])])(img)
    np.testing.assert_array_equal(left, right)


def test_empty_compose_rejected():
    with pytest.raises(ValueError):
        T.compose([])


@settings(max_examples=20, deadline=None)
@given(square_images)
def test_transforms_are_pure(img):
    for t in [T.Rotation(3), T.ChannelPermutation.named("GRB"), T.Sharpness(1.5),
              T.compose([T.Rotation(1), T.Sharpness(0.0)])]:
        assert t(img).tobytes() == t(img).tobytes()


# ---------------------------------------------------------------- view sets

ROT = {"kind": "rotation", "values": [0, 90, 180, 270]}
SHARP = {"kind": "sharpness", "values": [0, 0.5, 1, 1.5]}


def test_rotation_view_set():
    vs = T.build_view_set({"families": [ROT]})
    assert len(vs) == 4 and vs.M == 3
    assert [j for j, _ in vs] == [0, 1, 2, 3]


def test_rotation_by_sharpness_has_sixteen_views():
    vs = T.build_view_set({"families": [ROT, SHARP]})
    assert len(vs) == 16
    assert vs.transforms[0].is_identity
    assert sum(t.is_identity for t in vs.transforms) == 1


def test_permutation_subset():
    vs = T.build_view_set([{"kind": "permutation", "values": ["RGB", "GRB", "BGR"]}])
    assert [j for j, _ in vs] == [0, 1, 2]
    assert vs.describe() == ["RGB", "GRB", "BGR"]


def test_identity_pinned_first_even_when_listed_late():
    vs = T.build_view_set([{"kind": "sharpness", "values": [0, 0.5, 1, 1.5]}])
    assert vs.describe() == ["sharp1", "sharp0", "sharp0.5", "sharp1.5"]


def test_family_without_identity_rejected():
    with pytest.raises(ValueError, match="identity"):
        T.build_view_set([{"kind": "permutation", "values": ["GBR", "BRG"]}])


def test_view_set_requires_identity_first():
    with pytest.raises(ValueError):
        T.ViewSet(((0, T.Rotation(1)),))
    with pytest.raises(ValueError):
        T.ViewSet(((0, T.Rotation(0)), (2, T.Rotation(1))))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["rot", "perm", "sharp"]), min_size=1, max_size=3, unique=True),
       st.data())
def test_view_set_contiguity(kinds, data):
    pools = {"rot": ("rotation", [0, 90, 180, 270]),
             "perm": ("permutation", list(T.PERMUTATIONS)),
             "sharp": ("sharpness", [1, 0, 0.5, 1.5, 2])}
    families = []
    expected = 1
    for k in kinds:
        kind, pool = pools[k]
        identity = pool[0]
        rest = data.draw(st.lists(st.sampled_from(pool[1:]), unique=True, max_size=len(pool) - 1))
        values = data.draw(st.permutations([identity] + rest))
        families.append({"kind": kind, "values": values})
        expected *= len(values)
    vs = T.build_view_set(families)
    assert [j for j, _ in vs] == list(range(expected))
    assert vs.transforms[0].is_identity


def test_view_expression_parsing():
    assert len(T.parse_view_expression("perm:*")) == 6
    assert len(T.parse_view_expression("rot:*+sharp:0|0.5|1|1.5")) == 16
    assert T.parse_view_expression("id")[0].is_identity
    with pytest.raises(ValueError):
        T.parse_view_expression("blur:3")


# ---------------------------------------------------------------- ppm

def test_ppm_round_trip_is_exact():
    img = (np.arange(3 * 5 * 4) % 256).reshape(3, 5, 4).astype(np.float32) / 255
    data = encode_ppm(img)
    assert data.startswith(b"P6\n4 5\n255\n")
    assert encode_ppm(decode_ppm(data)) == data
