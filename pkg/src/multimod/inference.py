"""Prediction-time machinery: TTA, sliding windows, corruptions, evaluation.

All prediction goes through a *predictor*: a function from a dict of
modality rasters (C, H, W) to raw logits (num_classes, H, W). Building one
from model parameters wraps eval mode and disables graph recording.

Test-time augmentation runs the four flip combinations (identity,
horizontal, vertical, both), converts each output to probabilities, undoes
the flip, and averages the *probabilities* -- averaging logits is not the
same thing and is deliberately not offered.

Sliding-window inference tiles the image with a fixed stride; the final row
and column of tiles are clamped to the image border, so every pixel is
covered. Overlapping probabilities are averaged by visit count.

Corruptions simulate a broken sensor at evaluation time: a modality is
replaced wholesale by zeros, uniform noise, or full-scale ones. Corrupting
the first (primary) modality is allowed but logged as a warning, since the
fusion chain is anchored on it.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .data import Sample
from .metrics import Confusion, compute_metrics
from .model import ModelParams, multimodal_forward
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

Predictor = Callable[[Dict[str, np.ndarray]], np.ndarray]

CORRUPTION_KINDS = ("missing_zero", "white_noise", "interfered_max")


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def make_predictor(params: ModelParams) -> Predictor:
    """Single-image logits function over a trained model (eval mode).

    Only the model's configured modalities are read from the input dict, so
    a unimodal model evaluates directly on multi-modality samples; a
    configured modality missing from the dict is an error.
    """
    names = [m.name for m in params.config.modalities]

    def predict(modalities: Dict[str, np.ndarray]) -> np.ndarray:
        missing = [n for n in names if n not in modalities]
        if missing:
            raise KeyError(
                f"predictor needs modalities {names}, input lacks {missing}"
            )
        inputs = {n: Tensor(modalities[n][None]) for n in names}
        with no_grad():
            logits = multimodal_forward(inputs, params, mode="eval")
        return logits.data[0]

    return predict


def _flip_dict(mods: Dict[str, np.ndarray], horizontal: bool, vertical: bool):
    out = {}
    for k, v in mods.items():
        if horizontal:
            v = v[..., ::-1]
        if vertical:
            v = v[..., ::-1, :]
        out[k] = np.ascontiguousarray(v)
    return out


def tta_predict(predict: Predictor, modalities: Dict[str, np.ndarray]) -> np.ndarray:
    """Probabilities averaged over the four flip variants."""
    acc = None
    for horizontal, vertical in ((False, False), (True, False), (False, True), (True, True)):
        flipped = _flip_dict(modalities, horizontal, vertical)
        probs = softmax(predict(flipped), axis=0)
        if horizontal:
            probs = probs[..., ::-1]
        if vertical:
            probs = probs[..., ::-1, :]
        acc = probs.copy() if acc is None else acc + probs
    return acc / 4.0


def sliding_window_predict(
    predict: Predictor,
    modalities: Dict[str, np.ndarray],
    window: int,
    stride: int,
    tta: bool = False,
) -> np.ndarray:
    """Tile the image, average overlapping tile probabilities."""
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be positive, got {window}/{stride}")
    h, w = next(iter(modalities.values())).shape[-2:]
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds image {h}x{w}")

    def positions(extent: int) -> list:
        pos = list(range(0, extent - window + 1, stride))
        if pos[-1] != extent - window:
            pos.append(extent - window)
        return pos

    prob_sum: Optional[np.ndarray] = None
    counts = np.zeros((1, h, w), dtype=np.float64)
    for top in positions(h):
        for left in positions(w):
            tile = {
                k: v[..., top : top + window, left : left + window]
                for k, v in modalities.items()
            }
            probs = (
                tta_predict(predict, tile)
                if tta
                else softmax(predict(tile), axis=0)
            )
            if prob_sum is None:
                prob_sum = np.zeros((probs.shape[0], h, w), dtype=np.float64)
            prob_sum[:, top : top + window, left : left + window] += probs
            counts[:, top : top + window, left : left + window] += 1.0
    return prob_sum / counts


def corrupt_modality(
    modalities: Dict[str, np.ndarray],
    kind: str,
    target: str,
    rng: Optional[np.random.Generator] = None,
    primary: Optional[str] = None,
) -> Dict[str, np.ndarray]:
    """Replace one modality's raster according to ``kind``.

    ``white_noise`` needs ``rng``. When ``target`` equals ``primary`` a
    warning is logged (the chain is conditioned on the primary modality, so
    scores after corrupting it say little about fusion robustness).
    """
    if target not in modalities:
        raise KeyError(f"corrupt_modality: no modality {target!r} in sample")
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption {kind!r} (valid: {CORRUPTION_KINDS})")
    if primary is not None and target == primary:
        log.warning("corrupting the primary modality %r", target)
    out = dict(modalities)
    shape = modalities[target].shape
    if kind == "missing_zero":
        out[target] = np.zeros(shape, dtype=np.float32)
    elif kind == "interfered_max":
        out[target] = np.ones(shape, dtype=np.float32)
    else:
        if rng is None:
            raise ValueError("white_noise corruption needs a random generator")
        out[target] = rng.random(shape, dtype=np.float32)
    return out


def evaluate(
    predict: Predictor,
    samples: Sequence[Sample],
    num_classes: int,
    tta: bool = False,
    window: int = 0,
    stride: int = 0,
    corruption: Optional[Tuple[str, str]] = None,  # (kind, modality)
    corruption_seed: int = 0,
    primary: Optional[str] = None,
) -> Tuple[dict, Confusion]:
    """Score a predictor over samples; returns (metrics, confusion).

    ``window=0`` predicts whole images. Multi-label samples accumulate with
    the set-membership rule automatically.
    """
    if not samples:
        raise ValueError("evaluate: no samples")
    conf = Confusion.empty(num_classes, multi_label=samples[0].multi_label)
    for i, sample in enumerate(samples):
        mods = sample.modalities
        if corruption is not None:
            kind, target = corruption
            mods = corrupt_modality(
                mods,
                kind,
                target,
                rng=np.random.default_rng([corruption_seed, 4000 + i]),
                primary=primary,
            )
        if window:
            probs = sliding_window_predict(predict, mods, window, stride, tta=tta)
        elif tta:
            probs = tta_predict(predict, mods)
        else:
            probs = softmax(predict(mods), axis=0)
        pred = probs.argmax(axis=0)
        conf.update(pred, sample.labels, sample.valid_mask)
    return compute_metrics(conf), conf


def robustness_eval(
    predict: Predictor,
    samples: Sequence[Sample],
    num_classes: int,
    kind: str,
    target: str,
    corruption_seed: int = 0,
    primary: Optional[str] = None,
) -> dict:
    """Metrics with one modality corrupted for every sample."""
    metrics, _ = evaluate(
        predict,
        samples,
        num_classes,
        corruption=(kind, target),
        corruption_seed=corruption_seed,
        primary=primary,
    )
    return metrics
