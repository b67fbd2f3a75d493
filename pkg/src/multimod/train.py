"""Training: loss, learning-rate schedules, the two-phase optimizer, the loop.

The loss is class-weighted cross entropy over valid pixels, normalised by
the *count* of valid pixels (not their weight mass). Optimisation runs Adam
for the first ``adam_iters`` iterations and plain SGD with momentum 0.9
afterwards; weight decay is classic L2 folded into the gradient, applied
only to ``weight``-kind parameters, and ``bias``-kind parameters train at
twice the scheduled rate. Schedules compose multiplicatively, so
``"poly,step"`` means poly decay times staircase decay.

Shuffling, augmentation and cropping draw from generators derived from
(seed, epoch) or (seed, iteration), never from shared mutable RNG state;
resuming from a checkpoint therefore replays the identical stream and a
resumed run is bitwise equal to an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .data import Sample, augment, median_frequency_weights
from .metrics import Confusion, compute_metrics
from .model import ModelConfig, ModelParams, count_parameters, init_model, multimodal_forward
from .tensor import Tensor, accumulate_grad, backward, make_node, no_grad

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SGD_MOMENTUM = 0.9

SCHEDULE_NAMES = ("poly", "step", "cosine")


class TrainingAborted(RuntimeError):
    """Raised when the loss stops being finite; carries the iteration."""


@dataclass
class TrainConfig:
    seed: int = 0
    total_iters: int = 600
    batch_size: int = 4
    crop: int = 0  # 0 = no cropping
    base_lr: float = 3e-3
    schedule: str = "poly"  # comma-joined subset of poly/step/cosine
    poly_power: float = 0.9
    poly_max_iter: int = 0  # 0 = total_iters
    step_factor: float = 0.75
    step_every: int = 5  # epochs per staircase step
    cosine_max_epoch: int = 0  # 0 = derived from total_iters
    adam_iters: int = 10000
    weight_decay: float = 2e-5
    bias_lr_multiplier: float = 2.0
    augment: bool = True
    augment_prob: float = 0.5
    val_every: int = 1  # epochs between validations

    def validate(self) -> None:
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be positive")
        parts = [p.strip() for p in self.schedule.split(",") if p.strip()]
        if not parts:
            raise ValueError("schedule must name at least one component")
        for p in parts:
            if p not in SCHEDULE_NAMES:
                raise ValueError(f"unknown schedule {p!r} (valid: {SCHEDULE_NAMES})")


@dataclass
class TrainResult:
    best_miou: float
    best_iter: int
    final_loss: float
    log_rows: List[dict]
    checkpoint_dir: str
    best_checkpoint_dir: str


# ---------------------------------------------------------------------------
# loss


def weighted_ce_loss(
    logits: Tensor,
    labels: np.ndarray,
    class_weights: np.ndarray,
    valid_mask: np.ndarray,
) -> Tensor:
    """Mean class-weighted cross entropy over valid pixels.

    ``logits`` is (N, K, H, W); ``labels`` (N, H, W) int; ``valid_mask``
    (N, H, W) bool. The normaliser is the number of valid pixels. Computed
    fused (log-softmax with max subtraction and the one-hot gather in
    numpy), with a single backward closure on the logits.
    """
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} vs logits {logits.shape}")
    if valid_mask.shape != (n, h, w):
        raise ValueError(f"valid mask {valid_mask.shape} vs logits {logits.shape}")
    if class_weights.shape != (k,):
        raise ValueError(f"class weights {class_weights.shape}, expected ({k},)")
    n_valid = int(valid_mask.sum())
    if n_valid == 0:
        raise ValueError("weighted_ce_loss: no valid pixels in batch")

    x = logits.data
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse  # (N, K, H, W)

    ni, hi, wi = np.nonzero(valid_mask)
    y = labels[ni, hi, wi]
    pix_w = class_weights[y].astype(x.dtype)
    picked = logp[ni, y, hi, wi]
    loss_val = -(pix_w * picked).sum() / n_valid

    out = make_node(np.asarray(loss_val, dtype=x.dtype), (logits,))
    if out.requires_grad:

        def _bw(g):
            gscale = float(g.reshape(())) / n_valid
            prob = np.exp(logp)
            grad = np.zeros_like(x)
            # d/dlogit of -w_y * logp_y at a valid pixel: w_y * (softmax - onehot)
            grad[ni, :, hi, wi] = prob[ni, :, hi, wi] * pix_w[:, None]
            grad[ni, y, hi, wi] -= pix_w
            accumulate_grad(logits, grad * gscale)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# learning-rate schedules


def lr_at(cfg: TrainConfig, iteration: int, iters_per_epoch: int) -> float:
    """Scheduled learning rate for a 0-based iteration (composed factors)."""
    epoch = iteration // iters_per_epoch
    lr = cfg.base_lr
    for part in cfg.schedule.split(","):
        part = part.strip()
        if part == "poly":
            max_iter = cfg.poly_max_iter or cfg.total_iters
            frac = min(iteration / max_iter, 1.0)
            lr *= (1.0 - frac) ** cfg.poly_power
        elif part == "step":
            lr *= cfg.step_factor ** (epoch // cfg.step_every)
        elif part == "cosine":
            max_epoch = cfg.cosine_max_epoch or max(
                1, math.ceil(cfg.total_iters / iters_per_epoch)
            )
            frac = min(epoch / max_epoch, 1.0)
            lr *= 0.5 * (1.0 + math.cos(math.pi * frac))
        elif part:
            raise ValueError(f"unknown schedule {part!r}")
    return lr


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    sgd_momentum: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, table in (
            ("adam_m", self.adam_m),
            ("adam_v", self.adam_v),
            ("sgd_momentum", self.sgd_momentum),
        ):
            for name, arr in table.items():
                out[f"{prefix}.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "OptimizerState":
        state = cls()
        for key, arr in arrays.items():
            prefix, _, name = key.partition(".")
            table = getattr(state, prefix, None)
            if table is None:
                raise ValueError(f"unknown optimizer array {key!r}")
            table[name] = arr
        return state


def optimizer_step(
    named_params: Sequence[Tuple[str, str, Tensor]],
    state: OptimizerState,
    cfg: TrainConfig,
    iteration: int,
    iters_per_epoch: int,
) -> float:
    """One update over all parameters; returns the learning rate used.

    Iterations below ``adam_iters`` use Adam (bias-corrected with the global
    step count); later ones use SGD with momentum, whose buffers start at
    zero when the switch happens.
    """
    lr = lr_at(cfg, iteration, iters_per_epoch)
    use_adam = iteration < cfg.adam_iters
    t = iteration + 1
    for name, kind, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay and kind == "weight":
            g = g + cfg.weight_decay * p.data
        plr = lr * (cfg.bias_lr_multiplier if kind == "bias" else 1.0)
        if use_adam:
            m = state.adam_m.get(name)
            if m is None:
                m = state.adam_m[name] = np.zeros_like(p.data)
                state.adam_v[name] = np.zeros_like(p.data)
            v = state.adam_v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1**t)
            v_hat = v / (1.0 - ADAM_BETA2**t)
            p.data -= plr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:
            buf = state.sgd_momentum.get(name)
            if buf is None:
                buf = state.sgd_momentum[name] = np.zeros_like(p.data)
            buf *= SGD_MOMENTUM
            buf += g
            p.data -= plr * buf
    return lr


# ---------------------------------------------------------------------------
# deterministic stream derivation


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + epoch]).permutation(n)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2000 + iteration])


def model_init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


# ---------------------------------------------------------------------------
# batching


def _prepare_batch(
    samples: Sequence[Sample],
    indices: np.ndarray,
    cfg: TrainConfig,
    modality_names: Sequence[str],
    iteration: int,
) -> Tuple[Dict[str, Tensor], np.ndarray, np.ndarray]:
    rng = iteration_rng(cfg.seed, iteration)
    chosen = []
    for idx in indices:
        s = samples[int(idx)]
        if cfg.augment:
            s = augment(s, rng, prob=cfg.augment_prob)
        if cfg.crop:
            h, w = s.valid_mask.shape
            if cfg.crop > h or cfg.crop > w:
                raise ValueError(f"crop {cfg.crop} larger than image {h}x{w}")
            top = int(rng.integers(0, h - cfg.crop + 1))
            left = int(rng.integers(0, w - cfg.crop + 1))
            s = Sample(
                modalities={
                    k: v[:, top : top + cfg.crop, left : left + cfg.crop]
                    for k, v in s.modalities.items()
                },
                labels=s.labels[..., top : top + cfg.crop, left : left + cfg.crop],
                valid_mask=s.valid_mask[top : top + cfg.crop, left : left + cfg.crop],
            )
        chosen.append(s)
    inputs = {
        name: Tensor(np.stack([s.modalities[name] for s in chosen]))
        for name in modality_names
    }
    labels = np.stack([s.labels for s in chosen])
    mask = np.stack([s.valid_mask for s in chosen])
    return inputs, labels, mask


def _validate(
    params: ModelParams, val: Sequence[Sample], num_classes: int
) -> dict:
    names = [m.name for m in params.config.modalities]
    conf = Confusion.empty(num_classes, multi_label=False)
    with no_grad():
        for s in val:
            inputs = {n: Tensor(s.modalities[n][None]) for n in names}
            logits = multimodal_forward(inputs, params, mode="eval")
            pred = logits.data[0].argmax(axis=0)
            conf.update(pred, s.labels, s.valid_mask)
    return compute_metrics(conf)


# ---------------------------------------------------------------------------
# driver


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    out_dir: str,
    resume_from: Optional[str] = None,
    quiet: bool = False,
) -> TrainResult:
    """Run the full loop; returns summary plus checkpoint locations.

    Writes ``last/`` and ``best/`` checkpoints and ``log.csv`` (columns
    iter, epoch, lr, loss, val_mIoU, val_mF1; metric cells are empty except
    on validation rows) under ``out_dir``.
    """
    model_cfg.validate()
    cfg.validate()
    for s in list(train_samples)[:1] + list(val_samples)[:1]:
        s.validate(model_cfg.num_classes)
        if s.multi_label:
            raise ValueError("training expects single-label samples")
        absent = [m.name for m in model_cfg.modalities if m.name not in s.modalities]
        if absent:
            raise ValueError(
                f"samples carry modalities {sorted(s.modalities)}, model also "
                f"needs {absent}"
            )

    params = init_model(model_cfg, model_init_rng(cfg.seed))
    named = list(params.named_params())
    opt = OptimizerState()
    start_iter = 0
    best_miou = float("-inf")
    best_iter = -1
    if resume_from is not None:
        man = ckpt.load_checkpoint(
            resume_from, params.named_params(), params.named_buffers()
        )
        opt = OptimizerState.from_arrays(man["optim_arrays"])
        start_iter = int(man["meta"].get("iter", 0))
        best_miou = float(man["meta"].get("best_miou", "-inf"))
        best_iter = int(man["meta"].get("best_iter", -1))

    weights = median_frequency_weights(train_samples, model_cfg.num_classes)
    modality_names = [m.name for m in model_cfg.modalities]
    n_train = len(train_samples)
    iters_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))

    if not quiet:
        log.info(
            "training %d params for %d iters (%d/epoch), resuming at %d",
            count_parameters(params),
            cfg.total_iters,
            iters_per_epoch,
            start_iter,
        )

    rows: List[dict] = []
    final_loss = float("nan")
    t_start = time.time()
    for iteration in range(start_iter, cfg.total_iters):
        epoch = iteration // iters_per_epoch
        perm = epoch_permutation(cfg.seed, epoch, n_train)
        offset = (iteration % iters_per_epoch) * cfg.batch_size
        indices = perm[offset : offset + cfg.batch_size]
        if indices.size == 0:  # only when batch_size > n_train
            indices = perm

        inputs, labels, mask = _prepare_batch(
            train_samples, indices, cfg, modality_names, iteration
        )
        logits = multimodal_forward(inputs, params, mode="train")
        loss = weighted_ce_loss(logits, labels, weights, mask)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingAborted(
                f"non-finite loss {loss_val} at iteration {iteration}"
            )
        for _, _, p in named:
            p.grad = None
        backward(loss)
        lr = optimizer_step(named, opt, cfg, iteration, iters_per_epoch)
        final_loss = loss_val

        row = {
            "iter": iteration,
            "epoch": epoch,
            "lr": lr,
            "loss": loss_val,
            "val_mIoU": "",
            "val_mF1": "",
        }

        end_of_epoch = (iteration + 1) % iters_per_epoch == 0
        last_iter = iteration + 1 == cfg.total_iters
        if (end_of_epoch and (epoch + 1) % cfg.val_every == 0) or last_iter:
            metrics = _validate(params, val_samples, model_cfg.num_classes)
            row["val_mIoU"] = metrics["miou"]
            row["val_mF1"] = metrics["mf1"]
            if metrics["miou"] > best_miou:
                best_miou = metrics["miou"]
                best_iter = iteration
                _save(params, opt, cfg, os.path.join(out_dir, "best"), iteration + 1,
                      best_miou, best_iter)
            if not quiet:
                log.info(
                    "iter %d epoch %d loss %.4f val mIoU %.4f (%.1fs)",
                    iteration, epoch, loss_val, metrics["miou"], time.time() - t_start,
                )
        rows.append(row)

    _save(params, opt, cfg, os.path.join(out_dir, "last"), cfg.total_iters,
          best_miou, best_iter)
    if best_iter < 0:  # validation never produced a usable score
        _save(params, opt, cfg, os.path.join(out_dir, "best"), cfg.total_iters,
              best_miou, best_iter)
    _write_log(os.path.join(out_dir, "log.csv"), rows)
    return TrainResult(
        best_miou=best_miou,
        best_iter=best_iter,
        final_loss=final_loss,
        log_rows=rows,
        checkpoint_dir=os.path.join(out_dir, "last"),
        best_checkpoint_dir=os.path.join(out_dir, "best"),
    )


def _save(
    params: ModelParams,
    opt: OptimizerState,
    cfg: TrainConfig,
    path: str,
    next_iter: int,
    best_miou: float,
    best_iter: int,
) -> None:
    ckpt.save_checkpoint(
        path,
        params.named_params(),
        params.named_buffers(),
        opt.to_arrays(),
        meta={
            "iter": next_iter,
            "seed": cfg.seed,
            "best_miou": repr(best_miou),
            "best_iter": best_iter,
        },
    )


def _write_log(path: str, rows: List[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    cols = ["iter", "epoch", "lr", "loss", "val_mIoU", "val_mF1"]
    with open(path, "w", encoding="ascii") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
