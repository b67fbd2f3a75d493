"""Spatial views of NCHW feature maps and their inverses.

Three self-inverse views index the multi-view attention keys:

1. identity,
2. spatial transpose (swap the H and W axes),
3. vertical flip (reverse the H axis).

``apply_view`` and ``invert_view`` are the same mapping because every view
is an involution; the second name exists so call sites read as intent.
Both are differentiable (pure movement ops).
"""

from __future__ import annotations

from .ops import flip, permute
from .tensor import Tensor

VIEW_IDS = (1, 2, 3)
NUM_VIEWS = len(VIEW_IDS)


def apply_view(x: Tensor, view_id: int) -> Tensor:
    """Apply view ``view_id`` to a 4D NCHW tensor."""
    if x.ndim != 4:
        raise ValueError(f"apply_view: expected NCHW tensor, got shape {x.shape}")
    if view_id == 1:
        return x
    if view_id == 2:
        return permute(x, (0, 1, 3, 2))
    if view_id == 3:
        return flip(x, 2)
    raise ValueError(f"apply_view: unknown view id {view_id} (valid: {VIEW_IDS})")


def invert_view(x: Tensor, view_id: int) -> Tensor:
    """Undo view ``view_id`` (identical to applying it; all views are involutions)."""
    return apply_view(x, view_id)
