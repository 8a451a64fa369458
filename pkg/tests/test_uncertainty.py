import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pgfanet.uncertainty import (entropy_uncertainty, minmax_normalize, rectify_teacher,
                                 shape_attention, uncertainty_maps)


def probs_from(values, c):
    t = torch.tensor(values, dtype=torch.float64).view(1, c, 1, -1)
    return t


def test_entropy_endpoints():
    onehot = probs_from([1.0, 0.0, 0.0, 1.0], 2)
    assert torch.all(entropy_uncertainty(onehot) == 0)
    for c in (2, 3, 5):
        uni = torch.full((1, c, 2, 2), 1.0 / c, dtype=torch.float64)
        assert torch.allclose(entropy_uncertainty(uni), torch.ones(1, 1, 2, 2, dtype=torch.float64), atol=1e-12)


def test_entropy_two_class_value():
    u = entropy_uncertainty(probs_from([0.9, 0.1], 2)).item()
    want = (-0.9 * math.log(0.9) - 0.1 * math.log(0.1)) / math.log(2)
    assert u == pytest.approx(want, abs=1e-12)
    assert u == pytest.approx(0.4690, abs=1e-4)


def test_entropy_rejects_invalid():
    with pytest.raises(ValueError):
        entropy_uncertainty(probs_from([1.2, -0.2], 2))
    with pytest.raises(ValueError):
        entropy_uncertainty(probs_from([0.5, 0.6], 2))


def test_entropy_image_scope_is_mean():
    p = torch.softmax(torch.randn(2, 3, 4, 4, dtype=torch.float64), 1)
    pix = entropy_uncertainty(p)
    img = entropy_uncertainty(p, scope="image")
    assert torch.allclose(img, pix.mean(dim=(2, 3), keepdim=True).expand_as(pix))


def test_rectify_identities_and_midpoint():
    q_tea = torch.softmax(torch.randn(2, 3, 4, 4, dtype=torch.float64), 1)
    q_stu = torch.softmax(torch.randn(2, 3, 4, 4, dtype=torch.float64), 1)
    zeros = torch.zeros(2, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(rectify_teacher(q_tea, q_stu, zeros), q_tea)
    assert torch.equal(rectify_teacher(q_tea, q_stu, zeros + 1), q_stu)
    mid = rectify_teacher(probs_from([1.0, 0.0], 2), probs_from([0.0, 1.0], 2),
                          torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64))
    assert mid.flatten().tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        rectify_teacher(q_tea, q_stu, zeros - 0.1)


def test_minmax_normalize():
    x = torch.tensor([0.0, 5.0, 10.0]).view(1, 1, 1, 3)
    assert minmax_normalize(x).flatten().tolist() == [0.0, 0.5, 1.0]
    assert torch.all(minmax_normalize(torch.full((2, 1, 3, 3), 7.0)) == 0)
    with pytest.raises(ValueError):
        minmax_normalize(torch.tensor([[float("nan")]]))


def test_minmax_is_per_image():
    x = torch.stack([torch.arange(4.0), 10 + 3 * torch.arange(4.0)]).view(2, 1, 2, 2)
    out = minmax_normalize(x)
    assert torch.allclose(out[0], out[1])


def test_shape_attention_identical_logits_gives_one():
    z = torch.randn(2, 2, 5, 5)
    assert torch.all(shape_attention(z, z.clone()) == 1)


def test_shape_attention_maximal_disagreement_pixel():
    s = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    t = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    s[0, 0, 1, 1], t[0, 1, 1, 1] = 80.0, 80.0
    w = shape_attention(s, t)
    others = torch.ones_like(w, dtype=torch.bool)
    others[0, 0, 1, 1] = False
    assert w[0, 0, 1, 1] < w[others].min()
    assert w[0, 0, 1, 1].item() == pytest.approx(1.0)


def test_shape_attention_peaks_near_inverse_e():
    # u = |p_s - p_t| * sqrt(2) / sqrt(2) for two classes; sweep disagreement levels
    d = torch.linspace(0.05, 0.95, 19, dtype=torch.float64)
    ps = torch.stack([0.5 + d / 2, 0.5 - d / 2]).view(1, 2, 1, -1)
    pt = torch.stack([0.5 - d / 2, 0.5 + d / 2]).view(1, 2, 1, -1)
    w = shape_attention(torch.log(ps), torch.log(pt)).flatten()
    u = d  # ||(d, -d)|| / sqrt(2)
    assert abs(u[int(w.argmax())].item() - 1 / math.e) < 0.05


def test_shape_attention_bounds_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        c = int(torch.randint(2, 5, (1,), generator=g))
        s = 5 * torch.randn(1, c, 4, 4, generator=g)
        t = 5 * torch.randn(1, c, 4, 4, generator=g)
        w = shape_attention(s, t)
        assert w.min() >= 1 and w.max() <= 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_shape_attention_shift_invariant(seed, shift):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    t = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    per_pixel = torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64) * shift
    a = shape_attention(s, t)
    b = shape_attention(s + per_pixel, t + per_pixel)
    assert torch.allclose(a, b, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_rectified_rows_are_distributions(seed, c):
    g = torch.Generator().manual_seed(seed)
    s = 4 * torch.randn(2, c, 3, 3, generator=g, dtype=torch.float64)
    t = 4 * torch.randn(2, c, 3, 3, generator=g, dtype=torch.float64)
    maps = uncertainty_maps(s, t)
    assert torch.allclose(maps.rectified_teacher.sum(1), torch.ones(2, 3, 3, dtype=torch.float64), atol=1e-6)
    assert maps.teacher_entropy.min() >= 0 and maps.teacher_entropy.max() <= 1
    assert maps.shape_weight.min() >= 1 and maps.shape_weight.max() <= 2


def test_uncertainty_maps_do_not_track_gradients():
    s = torch.randn(1, 2, 3, 3, requires_grad=True)
    t = torch.randn(1, 2, 3, 3, requires_grad=True)
    maps = uncertainty_maps(s, t)
    assert not maps.rectified_teacher.requires_grad
    assert not maps.shape_weight.requires_grad
