"""Finite-difference verification of reverse-mode gradients.

``grad_check`` runs a scalar-valued function twice per probed element
(central differences) and compares against the gradient produced by one
backward pass. Everything is forced to float64 regardless of the ambient
precision; float32 would drown the comparison in rounding noise.

For large inputs ``max_elements`` probes a deterministic random subset per
input instead of every element, trading exhaustiveness for runtime while
keeping the check reproducible.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, precision


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and numeric gradients of ``fn``.

    ``fn`` maps the given tensors to a scalar tensor. ``inputs`` may be
    Tensors or arrays; each is copied into a float64 leaf with
    ``requires_grad=True``. The relative error for one element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    with precision("float64"):
        leaves = []
        for x in inputs:
            arr = x.data if isinstance(x, Tensor) else np.asarray(x)
            leaves.append(Tensor(np.array(arr, dtype=np.float64), requires_grad=True))

        out = fn(*leaves)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("grad_check: fn must return a scalar tensor")
        backward(out)
        analytic = [
            leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves
        ]

        rng = np.random.default_rng(seed)
        worst = 0.0
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            if max_elements is not None and flat.size > max_elements:
                idxs = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            else:
                idxs = range(flat.size)
            for i in idxs:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + eps
                    f_plus = float(fn(*leaves).data.reshape(()))
                    flat[i] = orig - eps
                    f_minus = float(fn(*leaves).data.reshape(()))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(ana_flat[i] - numeric) / max(abs(ana_flat[i]), abs(numeric), 1e-8)
                if err > worst:
                    worst = err
        return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.2) -> np.ndarray:
    """Random values with |x| >= margin, so kinked ops stay differentiable
    at every probe (finite differences step across x = 0 otherwise)."""
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return signs * (margin + rng.random(shape))


def standard_battery(max_elements: Optional[int] = 200):
    """(name, fn, inputs) cases covering every op and the composite heads.

    Deterministic: fixed seeds, smooth compositions, rectifier inputs kept
    away from their kinks. ``max_elements`` bounds probes per input for the
    expensive composite cases. Intended use: each case passes through
    :func:`grad_check` and must come in under 1e-4.
    """
    from . import ops
    from .attention import LatentPyramid, PyramidFeatures, build_attention, make_paf_params, paf_forward
    from .blocks import conv_bn_relu, make_conv_block
    from .gating import gated_fusion, make_fusion_params
    from .model import ModalitySpec, ModelConfig, init_model, multimodal_forward
    from .tensor import Tensor
    from .train import weighted_ce_loss

    rng = np.random.default_rng(20240811)
    cases = []

    def case(name, fn, *inputs, cap=None):
        cases.append((name, fn, list(inputs), cap))

    a34 = rng.standard_normal((3, 4))
    b34 = rng.standard_normal((3, 4))
    case("add", lambda x, y: ops.mean_all(ops.add(x, y)), a34, b34)
    case("sub", lambda x, y: ops.mean_all(ops.tanh(ops.sub(x, y))), a34, b34)
    case("mul", lambda x, y: ops.mean_all(ops.mul(x, y)), a34, b34)
    case("scale_const", lambda x: ops.mean_all(ops.scale(x, -1.7)), a34)
    case(
        "scale_tensor",
        lambda x, s: ops.mean_all(ops.scale(ops.tanh(x), s)),
        a34,
        np.array(0.8),
    )
    case("one_minus", lambda x: ops.mean_all(ops.tanh(ops.one_minus(x))), a34)
    case("relu", lambda x: ops.mean_all(ops.relu(x)), _away_from_zero(rng, (4, 5)))
    case("tanh", lambda x: ops.mean_all(ops.tanh(x)), a34)
    case("sigmoid", lambda x: ops.mean_all(ops.sigmoid(x)), 3.0 * a34)
    case(
        "reshape",
        lambda x: ops.mean_all(ops.tanh(ops.reshape(x, (2, 6)))),
        rng.standard_normal((3, 4)),
    )
    case(
        "permute",
        lambda x: ops.mean_all(ops.tanh(ops.permute(x, (2, 0, 1)))),
        rng.standard_normal((2, 3, 4)),
    )
    case(
        "flip",
        lambda x: ops.mean_all(ops.tanh(ops.flip(x, 1))),
        rng.standard_normal((2, 3, 4)),
    )
    case(
        "concat",
        lambda x, y: ops.mean_all(ops.tanh(ops.concat([x, y], axis=1))),
        rng.standard_normal((2, 3)),
        rng.standard_normal((2, 5)),
    )
    case(
        "repeat_batch",
        lambda x: ops.mean_all(ops.tanh(ops.repeat_batch(x, 3))),
        rng.standard_normal((2, 4)),
    )
    case("sum_all", lambda x: ops.sum_all(ops.tanh(x)), a34)
    case("mean_all", lambda x: ops.mean_all(ops.sigmoid(x)), a34)
    case(
        "matmul2d",
        lambda x, y: ops.mean_all(ops.tanh(ops.matmul(x, y))),
        rng.standard_normal((3, 5)),
        rng.standard_normal((5, 2)),
    )
    case(
        "matmul3d",
        lambda x, y: ops.mean_all(ops.tanh(ops.matmul(x, y))),
        rng.standard_normal((2, 3, 4)),
        rng.standard_normal((2, 4, 5)),
    )
    case(
        "row_normalize",
        lambda x: ops.mean_all(ops.tanh(ops.row_normalize(x))),
        rng.random((2, 3, 4)) + 0.5,
    )
    case(
        "conv2d_plain",
        lambda x, k: ops.mean_all(ops.sigmoid(ops.conv2d(x, k))),
        rng.standard_normal((2, 3, 6, 6)),
        rng.standard_normal((4, 3, 3, 3)) * 0.5,
    )
    case(
        "conv2d_strided_bias",
        lambda x, k, b: ops.mean_all(ops.sigmoid(ops.conv2d(x, k, bias=b, stride=2, pad=1))),
        rng.standard_normal((2, 3, 7, 6)),
        rng.standard_normal((4, 3, 3, 3)) * 0.5,
        rng.standard_normal(4),
    )
    case(
        "conv2d_1x1",
        lambda x, k: ops.mean_all(ops.sigmoid(ops.conv2d(x, k))),
        rng.standard_normal((2, 5, 4, 4)),
        rng.standard_normal((3, 5, 1, 1)) * 0.5,
    )

    def bn_train(x, g, b):
        return ops.mean_all(
            ops.tanh(ops.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), "train"))
        )

    def bn_eval(x, g, b):
        rm = np.array([0.1, -0.2, 0.3])
        rv = np.array([1.1, 0.9, 1.4])
        return ops.mean_all(ops.tanh(ops.batchnorm2d(x, g, b, rm, rv, "eval")))

    case(
        "batchnorm_train",
        bn_train,
        rng.standard_normal((2, 3, 4, 5)),
        rng.standard_normal(3) * 0.5 + 1.0,
        rng.standard_normal(3) * 0.2,
    )
    case(
        "batchnorm_eval",
        bn_eval,
        rng.standard_normal((2, 3, 4, 5)),
        rng.standard_normal(3) * 0.5 + 1.0,
        rng.standard_normal(3) * 0.2,
    )
    case(
        "bilinear_up",
        lambda x: ops.mean_all(ops.tanh(ops.bilinear_resize(x, 7, 9))),
        rng.standard_normal((1, 2, 3, 4)),
    )
    case(
        "bilinear_down",
        lambda x: ops.mean_all(ops.tanh(ops.bilinear_resize(x, 3, 2))),
        rng.standard_normal((1, 2, 6, 5)),
    )
    case(
        "bilinear_identity",
        lambda x: ops.mean_all(ops.tanh(ops.bilinear_resize(x, 4, 4))),
        rng.standard_normal((1, 2, 4, 4)),
    )

    # composite heads: parameters become the checked inputs where feasible,
    # activations elsewhere; probe counts are capped for runtime.
    block = make_conv_block(np.random.default_rng(3), 3, 4, k=3, stride=2)

    def conv_block_fn(x, k, g, b):
        blk_bn = type(block.bn)(
            gamma=g, beta=b,
            running_mean=np.zeros(4), running_var=np.ones(4),
        )
        blk = type(block)(kernel=k, bn=blk_bn, stride=2)
        return ops.mean_all(ops.tanh(conv_bn_relu(x, blk, "train")))

    case(
        "conv_bn_relu_block",
        conv_block_fn,
        rng.standard_normal((2, 3, 8, 8)),
        rng.standard_normal((4, 3, 3, 3)) * 0.5,
        rng.standard_normal(4) * 0.3 + 1.0,
        rng.standard_normal(4) * 0.3,
        cap=max_elements,
    )

    paf = make_paf_params(np.random.default_rng(5), (6, 8, 10), latent=4, fused=6)

    def attention_fn(q, z, k1, k2, k3, cb):
        lat = LatentPyramid(query=q, context=z, keys=[k1, k2, k3])
        saved = paf.channel_bias
        paf.channel_bias = cb
        try:
            attn = build_attention(lat, paf)
        finally:
            paf.channel_bias = saved
        return ops.mean_all(ops.tanh(attn))

    case(
        "attention_build",
        attention_fn,
        rng.random((1, 4, 4, 4)) + 0.2,
        rng.random((1, 4, 2, 2)) + 0.2,
        rng.random((1, 4, 2, 2)) + 0.2,
        rng.random((1, 4, 2, 2)) + 0.2,
        rng.random((1, 4, 2, 2)) + 0.2,
        np.eye(4) + 0.1,
        cap=max_elements,
    )

    def paf_fn(low, mid, deep):
        feats = PyramidFeatures(low=low, mid=mid, deep=deep)
        return ops.mean_all(ops.tanh(paf_forward(feats, paf, "train")))

    case(
        "paf_head",
        paf_fn,
        rng.standard_normal((1, 6, 8, 8)) * 0.7,
        rng.standard_normal((1, 8, 4, 4)) * 0.7,
        rng.standard_normal((1, 10, 2, 2)) * 0.7,
        cap=max_elements,
    )

    gfu = make_fusion_params(np.random.default_rng(6), incoming=5, encoder=4, kind="gated")

    def gfu_fn(incoming, enc_feat):
        return ops.mean_all(ops.tanh(gated_fusion(incoming, enc_feat, gfu, "train")))

    case(
        "gated_fusion",
        gfu_fn,
        rng.standard_normal((2, 5, 4, 4)),
        rng.standard_normal((2, 4, 8, 8)),
        cap=max_elements,
    )

    tiny_cfg = ModelConfig(
        modalities=[ModalitySpec("color", 2), ModalitySpec("height", 1)],
        num_classes=3,
        widths=(4, 5, 6),
        latent=3,
        fused=5,
        num_views=2,
    )
    tiny = init_model(tiny_cfg, np.random.default_rng(7))
    tiny_labels = np.random.default_rng(8).integers(0, 3, (1, 32, 32))
    tiny_mask = np.ones((1, 32, 32), dtype=bool)
    tiny_weights = np.array([1.0, 0.7, 1.3])

    def model_fn(color, height):
        logits = multimodal_forward({"color": color, "height": height}, tiny, "train")
        return weighted_ce_loss(logits, tiny_labels, tiny_weights, tiny_mask)

    case(
        "full_model_ce",
        model_fn,
        rng.random((1, 2, 32, 32)),
        rng.random((1, 1, 32, 32)),
        cap=min(max_elements or 80, 80),
    )

    def loss_fn(logits):
        return weighted_ce_loss(
            logits,
            tiny_labels[:, :4, :4],
            tiny_weights,
            tiny_mask[:, :4, :4],
        )

    case("weighted_ce", loss_fn, rng.standard_normal((1, 3, 4, 4)), cap=max_elements)
    return cases


def run_battery(
    max_elements: Optional[int] = 200,
    eps: float = 1e-4,
    keep: Optional[Callable[[str], bool]] = None,
):
    """Run every battery case; yields (name, max relative error).

    The default step is coarser than :func:`grad_check`'s: across a deep
    composite the difference quotient loses ~1e-12 of the output's
    magnitude to rounding, which a 1e-5 step inflates tenfold on elements
    whose true gradient sits near the comparison floor.

    ``keep`` filters cases by name before any differencing happens, so a
    single-case run costs a single case.
    """
    for name, fn, inputs, cap in standard_battery(max_elements):
        if keep is not None and not keep(name):
            continue
        yield name, grad_check(fn, inputs, eps=eps, max_elements=cap)
