"""Spatial view transforms: involution identities and gradient routing."""

import numpy as np
import pytest

from multimod import ops
from multimod.tensor import Tensor, backward
from multimod.views import NUM_VIEWS, VIEW_IDS, apply_view, invert_view


def test_view_catalogue():
    assert VIEW_IDS == (1, 2, 3)
    assert NUM_VIEWS == 3


def test_view_semantics(rng):
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    t = Tensor(x)
    np.testing.assert_array_equal(apply_view(t, 1).data, x)
    np.testing.assert_array_equal(apply_view(t, 2).data, x.transpose(0, 1, 3, 2))
    np.testing.assert_array_equal(apply_view(t, 3).data, x[:, :, ::-1, :])


@pytest.mark.parametrize("vid", VIEW_IDS)
def test_roundtrip_is_bitwise(rng, vid):
    x = rng.standard_normal((2, 2, 6, 3)).astype(np.float32)
    back = invert_view(apply_view(Tensor(x), vid), vid)
    np.testing.assert_array_equal(back.data, x)


@pytest.mark.parametrize("vid", VIEW_IDS)
def test_apply_equals_invert(rng, vid):
    # every view is an involution, so the two names are one mapping
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(apply_view(x, vid).data, invert_view(x, vid).data)


def test_unknown_view_rejected(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32))
    for bad in (0, 4, -1):
        with pytest.raises(ValueError):
            apply_view(x, bad)


def test_non_4d_rejected(rng):
    with pytest.raises(ValueError):
        apply_view(Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32)), 1)


@pytest.mark.parametrize("vid", VIEW_IDS)
def test_gradient_is_routed_through_the_view(rng, vid):
    x = Tensor(rng.standard_normal((1, 1, 3, 3)).astype(np.float32), requires_grad=True)
    w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
    backward(ops.sum_all(ops.mul(apply_view(x, vid), Tensor(w))))
    # d(sum(view(x) * w))/dx = inverse-view of w
    want = invert_view(Tensor(w), vid).data
    np.testing.assert_allclose(x.grad, want, rtol=1e-6)
