"""Property-based checks of the invariants that hold for all inputs."""
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dida import pnm
from dida import tensor as T
from dida.attention import attention_map, dida_loss, dominant_difference, soften, vda_signal
from dida.evaluation import FG, grabcut_seeds, iou
from dida.scenes import DataConfig, augment, downsample_mask, generate_scene
from dida.tensor import Tensor

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)
unit = st.floats(0, 1, allow_nan=False, allow_infinity=False)
FAST = settings(max_examples=40, deadline=None)


def vec(n, elements=finite):
    return arrays(np.float64, n, elements=elements)


@FAST
@given(vec(6), vec(6))
def test_elementwise_gradients(a, b):
    for op in (T.add, T.sub, T.mul):
        x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        gx, gy = T.backward(T.sum(T.mul(op(x, y), Tensor(np.arange(1.0, 7.0)))), [x, y])
        fd_x = T.finite_diff_gradient(lambda v: T.sum(T.mul(op(v, Tensor(b)), Tensor(np.arange(1.0, 7.0)))), a)
        assert T.max_rel_error(gx, fd_x) <= 1e-6


@FAST
@given(vec(5), st.booleans())
def test_build_higher_does_not_change_first_order(a, squash):
    def loss(x):
        y = T.sigmoid(x) if squash else T.exp(T.mul(x, 0.5))
        return T.l2_norm(T.mul(y, y))
    x = Tensor(a, requires_grad=True)
    (plain,) = T.backward(loss(x), [x])
    (linked,) = T.backward(loss(x), [x], build_higher=True)
    assert plain.data.tobytes() == linked.data.tobytes()


@FAST
@given(vec(6))
def test_second_order_consistency(a):
    v = np.linspace(-1, 1, 6)

    def contracted(x):
        (g,) = T.backward(T.sum(T.mul(T.sigmoid(x), x)), [x], build_higher=True)
        return T.dot(g, Tensor(v))
    x = Tensor(a, requires_grad=True)
    (h,) = T.backward(contracted(x), [x])
    fd = T.finite_diff_gradient(lambda t: contracted(Tensor(t.data, requires_grad=True)), a)
    assert T.max_rel_error(h, fd) <= 1e-4


@FAST
@given(arrays(np.float64, (3, 2, 2), elements=unit), vec(3))
def test_raw_map_is_max_normalized(acts, weights):
    A = Tensor(acts, requires_grad=True)
    s = T.sum(T.mul(T.mean(A, axis=(1, 2)), Tensor(weights)))
    raw = attention_map(s, A).raw.data
    assert raw.min() >= 0 and raw.max() <= 1
    assert raw.max() == 1.0 or not raw.any()


@FAST
@given(arrays(np.float64, 9, elements=unit), arrays(np.float64, 9, elements=unit),
       st.floats(1e-3, 1e3))
def test_dida_loss_range_and_scale_invariance(m, s, c):
    assume(m.any() and s.any())
    base = dida_loss(Tensor(m), Tensor(s)).data
    assert -1e-15 <= base <= 1 + 1e-15
    scaled = dida_loss(Tensor(c * m), Tensor(s)).data
    assert scaled == pytest.approx(base, abs=1e-14)


@FAST
@given(arrays(np.float64, 9, elements=st.floats(0.01, 1)), st.floats(0.01, 100))
def test_dida_loss_zero_for_proportional_maps(m, c):
    assert abs(dida_loss(Tensor(m), Tensor(c * m)).data) < 1e-14


@FAST
@given(arrays(np.float64, 8, elements=unit))
def test_soften_is_monotone_and_bounded(m):
    out = soften(Tensor(np.sort(m))).data
    assert np.all(np.diff(out) >= 0)
    assert np.all((out >= 0) & (out <= 1))


@FAST
@given(vec(12), st.floats(0.05, 1.0))
def test_dominant_keeps_the_largest(f_d, keep):
    kept = dominant_difference(Tensor(f_d), keep).data
    n_keep = int(np.ceil(keep * 12))
    selected = kept != 0
    assert selected.sum() <= n_keep
    if selected.any():
        assert np.abs(f_d[selected]).min() >= np.abs(f_d[~selected]).max(initial=0)


@FAST
@given(vec(8, unit))
def test_signal_modes_coincide_for_ones(f_m):
    ones = Tensor(np.ones(8))
    dot = vda_signal(ones, Tensor(f_m), "dot").data
    thr = vda_signal(ones, Tensor(f_m), "threshold", keep_fraction=1.0).data
    assert dot == pytest.approx(thr, abs=1e-14)


@FAST
@given(arrays(np.float64, 16, elements=unit), st.floats(0.3, 0.9), st.floats(0.3, 0.9))
def test_seeds_monotone_in_hi(m, hi_a, hi_b):
    lo_hi, hi_hi = sorted((hi_a, hi_b))
    assert np.count_nonzero(grabcut_seeds(m, hi=hi_hi) == FG) <= np.count_nonzero(grabcut_seeds(m, hi=lo_hi) == FG)


@FAST
@given(arrays(bool, 10), arrays(bool, 10))
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a) and 0 <= v <= 1


@FAST
@given(arrays(np.uint8, (3, 4, 5)))
def test_pnm_round_trip(tmp_path_factory, codes):
    path = tmp_path_factory.mktemp("pnm") / "x.ppm"
    pnm.write_image(path, codes / 255.0)
    assert pnm.read_codes(path).tobytes() == codes.astype(np.int64).tobytes()


@FAST
@given(st.integers(0, 2**31), st.integers(0, 500))
def test_scene_invariants(seed, index):
    scene = generate_scene(DataConfig(seed=seed), index)
    assert 1 <= len(scene.objects) <= 3
    union = np.zeros((32, 32), bool)
    for obj in scene.objects:
        fp = obj.footprint(32, 32)
        assert not (union & fp).any()
        union |= fp
    assert np.array_equal(union, scene.saliency == 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100), st.integers(0, 2**31))
def test_augment_keeps_image_and_mask_aligned(index, seed):
    scene = generate_scene(DataConfig(seed=1), index)
    out = augment(scene, seed)
    mirrored = not np.array_equal(out.saliency, scene.saliency)
    base_image = scene.image[:, :, ::-1] if mirrored else scene.image
    base_mask = scene.saliency[:, ::-1] if mirrored else scene.saliency
    assert np.array_equal(out.saliency, base_mask)
    # away from clamping, every pixel moved by the same brightness offset
    shift = out.image - base_image
    free = shift[(out.image > 0) & (out.image < 1)]
    if free.size:
        assert free.max() - free.min() < 1e-12
        assert abs(free[0]) <= 0.1 + 1e-12


@FAST
@given(arrays(np.float64, (8, 8), elements=unit), st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]))
def test_downsample_preserves_mean(mask, p, q):
    assert downsample_mask(mask, p, q).mean() == pytest.approx(mask.mean(), abs=1e-14)
