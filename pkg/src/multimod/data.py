"""Samples, the synthetic two-modality benchmark, augmentation, dataset I/O.

A :class:`Sample` carries per-modality rasters (channel-first float32 in
[0, 1]), integer labels, and a validity mask. Labels are either a (H, W)
class-id map or, in multi-label mode, a (num_classes, H, W) 0/1 membership
stack.

The synthetic generator is built so that *neither* modality alone can
separate all classes. Classes come in confounded pairs: both members of a
pair share one colour distribution (identical in the colour modality) but
live in disjoint height bands (low vs high in the height modality), while
different pairs have distinct colours. A scene is a full partition of the
canvas into random rectangles with rectangle/ellipse patches painted on
top; every region's class is drawn from one fixed distribution after its
geometry, so region shape, size, and position carry no class information
and there is no spatial shortcut: a model must combine colour and height
to tell 1 from 0 or 3 from 2.

Within each pair the first member is deliberately prevalent (roughly nine
to one). The rarer member rides the high height band, so blanking the
height modality collapses predictions onto the common member (mild), while
saturating it drags them onto the rare one (severe): the corruption
orderings a fusion model should exhibit have a ground-truth direction.

``bayes_ceiling`` bounds what any per-pixel classifier can do from a given
modality subset: it histograms quantised raster values on the training
split and classifies validation pixels by training-count majority. Models
with spatial context may exceed it slightly; a large excess signals a leak.

Everything is driven by explicit numpy Generators seeded per sample, so
datasets are bitwise reproducible and independent of generation order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fileio import load_pgm, load_tensor, save_pgm, save_tensor

# well separated anchor colours, one per confounded group
_PALETTE = np.array(
    [
        (0.30, 0.50, 0.70),
        (0.70, 0.40, 0.20),
        (0.25, 0.70, 0.30),
        (0.75, 0.25, 0.65),
        (0.85, 0.80, 0.30),
        (0.20, 0.20, 0.55),
        (0.60, 0.75, 0.75),
        (0.50, 0.30, 0.30),
    ],
    dtype=np.float64,
)

_LOW_BAND = (0.05, 0.35)
_HIGH_BAND = (0.65, 0.95)
_MID_BAND = (0.35, 0.65)

# scene composition: the canvas is cut into this many base rectangles
# before patches are painted on top, and every region (cell or patch)
# draws its class from the same skewed distribution
_BASE_CELLS = 8
_MINORITY_SHARE = 0.10  # within-pair probability mass of the rare member


@dataclass
class Sample:
    """One training/validation item: rasters per modality plus targets."""

    modalities: Dict[str, np.ndarray]  # name -> (C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int64, or (K, H, W) uint8 when multi-label
    valid_mask: np.ndarray  # (H, W) bool

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 3

    def validate(self, num_classes: Optional[int] = None) -> None:
        if not self.modalities:
            raise ValueError("sample has no modalities")
        shapes = {m.shape[1:] for m in self.modalities.values()}
        if len(shapes) != 1:
            raise ValueError(f"modalities disagree on spatial size: {sorted(shapes)}")
        hw = next(iter(shapes))
        for name, m in self.modalities.items():
            if m.ndim != 3:
                raise ValueError(f"modality {name}: expected (C, H, W), got {m.shape}")
        if self.multi_label:
            if self.labels.shape[1:] != hw:
                raise ValueError(
                    f"labels {self.labels.shape} do not cover rasters {hw}"
                )
            if num_classes is not None and self.labels.shape[0] != num_classes:
                raise ValueError(
                    f"multi-label stack has {self.labels.shape[0]} planes, "
                    f"expected {num_classes}"
                )
        else:
            if self.labels.shape != hw:
                raise ValueError(f"labels {self.labels.shape} != raster size {hw}")
            if num_classes is not None and self.labels.max(initial=0) >= num_classes:
                raise ValueError(
                    f"label id {int(self.labels.max())} out of range for "
                    f"{num_classes} classes"
                )
        if self.valid_mask.shape != hw or self.valid_mask.dtype != np.bool_:
            raise ValueError(
                f"valid mask must be bool {hw}, got {self.valid_mask.dtype} "
                f"{self.valid_mask.shape}"
            )


@dataclass
class SynthSpec:
    """Recipe for the synthetic confounded-pairs benchmark."""

    num_classes: int = 4
    image_size: int = 64
    num_train: int = 200
    num_val: int = 50
    shapes_per_image: int = 6
    noise: float = 0.02
    seed: int = 7
    multi_label: bool = False
    confounded_pairs: Tuple[Tuple[int, int], ...] = ((0, 1), (2, 3))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")
        if self.image_size < 16:
            raise ValueError(f"image size {self.image_size} too small")
        seen: set = set()
        for pair in self.confounded_pairs:
            if len(pair) != 2:
                raise ValueError(f"confounded pair {pair} must have two classes")
            for cls in pair:
                if not 0 <= cls < self.num_classes:
                    raise ValueError(f"class {cls} out of range in pair {pair}")
                if cls in seen:
                    raise ValueError(f"class {cls} appears in two pairs")
                seen.add(cls)
        groups = len(self.confounded_pairs) + (self.num_classes - len(seen))
        if groups > len(_PALETTE):
            raise ValueError(
                f"{groups} colour groups exceed the palette of {len(_PALETTE)}"
            )


def _appearance_tables(spec: SynthSpec):
    """Per-class colour anchor and height band (lo, hi)."""
    colour = np.zeros((spec.num_classes, 3))
    band_lo = np.full(spec.num_classes, _MID_BAND[0])
    band_hi = np.full(spec.num_classes, _MID_BAND[1])
    group = 0
    paired = set()
    for a, b in spec.confounded_pairs:
        colour[a] = colour[b] = _PALETTE[group]
        band_lo[a], band_hi[a] = _LOW_BAND
        band_lo[b], band_hi[b] = _HIGH_BAND
        paired.update((a, b))
        group += 1
    for cls in range(spec.num_classes):
        if cls not in paired:
            colour[cls] = _PALETTE[group]
            group += 1
    return colour, band_lo, band_hi


def _class_weights(spec: SynthSpec) -> np.ndarray:
    """Class-draw probabilities: groups share mass evenly, pairs skew it.

    Each colour group (a confounded pair or an unpaired class) receives the
    same total mass; inside a pair the first member takes 1 - minority
    share of it. The skew gives every pair a stable majority member, which
    keeps the class-weighted training objective from treating the two
    colour-identical members as interchangeable.
    """
    paired = {cls for pair in spec.confounded_pairs for cls in pair}
    groups = len(spec.confounded_pairs) + (spec.num_classes - len(paired))
    weights = np.full(spec.num_classes, 1.0 / groups)
    for major, minor in spec.confounded_pairs:
        weights[major] = (1.0 - _MINORITY_SHARE) / groups
        weights[minor] = _MINORITY_SHARE / groups
    return weights


def _draw_class(rng: np.random.Generator, cum_weights: np.ndarray) -> int:
    return int(np.searchsorted(cum_weights, rng.random(), side="right"))


def _partition_cells(rng: np.random.Generator, size: int) -> List[Tuple[int, int, int, int]]:
    """Cut the canvas into ``_BASE_CELLS`` rectangles by guillotine splits.

    Each step splits the largest remaining rectangle across its longer
    side at a position drawn from the middle half, so cells stay chunky.
    Cut positions are drawn before any class, keeping geometry and class
    independent.
    """
    cells = [(0, 0, size, size)]  # (top, left, height, width)
    while len(cells) < _BASE_CELLS:
        idx = max(range(len(cells)), key=lambda i: cells[i][2] * cells[i][3])
        top, left, h, w = cells[idx]
        span = max(h, w)
        if span < 4:
            break
        margin = span // 4
        cut = int(rng.integers(margin, span - margin + 1))
        if h >= w:
            halves = [(top, left, cut, w), (top + cut, left, h - cut, w)]
        else:
            halves = [(top, left, h, cut), (top, left + cut, h, w - cut)]
        cells[idx : idx + 1] = halves
    return cells


def _paint_shape(rng: np.random.Generator, class_map: np.ndarray, cls: int) -> np.ndarray:
    """Draw one random rect or ellipse of ``cls`` onto the class map.

    Returns the painted region as a bool mask. Geometry draws do not depend
    on ``cls``, so confounded pair members share their shape distribution.
    """
    h, w = class_map.shape
    kind = rng.integers(0, 2)
    cy = rng.uniform(0.15, 0.85) * h
    cx = rng.uniform(0.15, 0.85) * w
    ry = rng.uniform(0.06, 0.22) * h
    rx = rng.uniform(0.06, 0.22) * w
    ys, xs = np.ogrid[:h, :w]
    if kind == 0:
        mask = (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    else:
        mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    class_map[mask] = cls
    return mask


def _render_sample(spec: SynthSpec, rng: np.random.Generator) -> Sample:
    colour_tab, band_lo, band_hi = _appearance_tables(spec)
    cum_weights = np.cumsum(_class_weights(spec))
    size = spec.image_size
    class_map = np.zeros((size, size), dtype=np.int64)
    if spec.multi_label:
        stack = np.zeros((spec.num_classes, size, size), dtype=np.uint8)
    for top, left, h, w in _partition_cells(rng, size):
        cls = _draw_class(rng, cum_weights)
        class_map[top : top + h, left : left + w] = cls
        if spec.multi_label:
            stack[cls, top : top + h, left : left + w] = 1
    for _ in range(spec.shapes_per_image):
        cls = _draw_class(rng, cum_weights)
        mask = _paint_shape(rng, class_map, cls)
        if spec.multi_label:
            stack[cls][mask] = 1

    colour = colour_tab[class_map].transpose(2, 0, 1)  # (3, H, W)
    colour = colour + rng.normal(0.0, spec.noise, colour.shape)
    u = rng.random((size, size))
    height = band_lo[class_map] + u * (band_hi[class_map] - band_lo[class_map])
    height = height[None] + rng.normal(0.0, spec.noise, (1, size, size))

    labels = stack if spec.multi_label else class_map
    return Sample(
        modalities={
            "color": np.clip(colour, 0.0, 1.0).astype(np.float32),
            "height": np.clip(height, 0.0, 1.0).astype(np.float32),
        },
        labels=labels,
        valid_mask=np.ones((size, size), dtype=bool),
    )


def synth_generate(spec: SynthSpec) -> List[Sample]:
    """All samples of the benchmark (train block first, then val block)."""
    spec.validate()
    total = spec.num_train + spec.num_val
    return [
        _render_sample(spec, np.random.default_rng([spec.seed, idx]))
        for idx in range(total)
    ]


def synth_splits(spec: SynthSpec) -> Tuple[List[Sample], List[Sample]]:
    """(train, val) split of :func:`synth_generate`."""
    samples = synth_generate(spec)
    return samples[: spec.num_train], samples[spec.num_train :]


# ---------------------------------------------------------------------------
# per-pixel information ceiling


def bayes_ceiling(
    train: Sequence[Sample],
    val: Sequence[Sample],
    modalities: Sequence[str],
    num_classes: int,
    bins: int = 16,
) -> dict:
    """Histogram-classifier score: the per-pixel ceiling for a modality subset.

    Each pixel becomes a joint bin over the chosen modalities' quantised
    channels; validation pixels take the training-majority class of their
    bin (global majority for unseen bins). Returns the metrics dict of that
    classifier on ``val``.
    """
    from .metrics import Confusion, compute_metrics

    if not modalities:
        raise ValueError("bayes_ceiling: need at least one modality")

    def pixel_bins(sample: Sample) -> np.ndarray:
        chans = []
        for name in modalities:
            if name not in sample.modalities:
                raise KeyError(f"bayes_ceiling: sample lacks modality {name!r}")
            chans.append(sample.modalities[name].reshape(sample.modalities[name].shape[0], -1))
        stacked = np.concatenate(chans, axis=0)  # (C_total, P)
        q = np.minimum((stacked * bins).astype(np.int64), bins - 1)
        flat = np.zeros(q.shape[1], dtype=np.int64)
        for row in q:
            flat = flat * bins + row
        return flat

    total_channels = sum(
        train[0].modalities[name].shape[0] for name in modalities
    )
    num_bins = bins**total_channels
    if num_bins * num_classes > 50_000_000:
        raise ValueError(
            f"bayes_ceiling: {bins} bins over {total_channels} channels is too "
            f"large a joint histogram"
        )
    counts = np.zeros(num_bins * num_classes, dtype=np.int64)
    for sample in train:
        if sample.multi_label:
            raise ValueError("bayes_ceiling supports single-label samples only")
        b = pixel_bins(sample)
        y = sample.labels.reshape(-1)
        m = sample.valid_mask.reshape(-1)
        counts += np.bincount(
            b[m] * num_classes + y[m], minlength=num_bins * num_classes
        )
    counts = counts.reshape(num_bins, num_classes)
    fallback = int(counts.sum(axis=0).argmax())
    rule = counts.argmax(axis=1)
    rule[counts.sum(axis=1) == 0] = fallback

    conf = Confusion.empty(num_classes, multi_label=False)
    for sample in val:
        pred = rule[pixel_bins(sample)].reshape(sample.labels.shape)
        conf.update(pred, sample.labels, sample.valid_mask)
    return compute_metrics(conf)


# ---------------------------------------------------------------------------
# class balance and augmentation


def median_frequency_weights(samples: Sequence[Sample], num_classes: int) -> np.ndarray:
    """Median-frequency balancing weights, float64, zero for absent classes.

    A class's frequency is its pixel share within the images where it
    occurs; weights are median(present frequencies) / frequency.
    """
    pixel_counts = np.zeros(num_classes, dtype=np.int64)
    image_pixels = np.zeros(num_classes, dtype=np.int64)
    for sample in samples:
        m = sample.valid_mask
        total = int(m.sum())
        if sample.multi_label:
            present = sample.labels[:, m].sum(axis=1)
            for cls in range(num_classes):
                if present[cls]:
                    pixel_counts[cls] += int(present[cls])
                    image_pixels[cls] += total
        else:
            y = sample.labels[m]
            binc = np.bincount(y, minlength=num_classes)
            for cls in range(num_classes):
                if binc[cls]:
                    pixel_counts[cls] += int(binc[cls])
                    image_pixels[cls] += total
    freq = np.zeros(num_classes, dtype=np.float64)
    present = image_pixels > 0
    freq[present] = pixel_counts[present] / image_pixels[present]
    weights = np.zeros(num_classes, dtype=np.float64)
    if present.any():
        weights[present] = np.median(freq[present]) / freq[present]
    return weights


def augment(sample: Sample, rng: np.random.Generator, prob: float = 0.5) -> Sample:
    """Random flips/rotation/noise/photometric jitter; rasters stay in [0, 1].

    Five independent coins are drawn in a fixed order (horizontal flip,
    vertical flip, quarter rotation, noise, brightness/contrast), then the
    parameters of the transforms that fired, so one Generator yields one
    reproducible augmentation. Geometric transforms move labels and mask
    along; photometric ones touch rasters only. Rotation requires square
    images and is skipped otherwise (its coin is still drawn). Inputs are
    assumed already normalised to [0, 1]; noisy or jittered values are
    clipped back.
    """
    coins = [rng.random() < prob for _ in range(5)]
    mods = {k: v.copy() for k, v in sorted(sample.modalities.items())}
    labels = sample.labels.copy()
    mask = sample.valid_mask.copy()
    h, w = mask.shape

    if coins[0]:  # horizontal flip
        mods = {k: v[..., ::-1].copy() for k, v in mods.items()}
        labels = labels[..., ::-1].copy()
        mask = mask[..., ::-1].copy()
    if coins[1]:  # vertical flip
        mods = {k: v[..., ::-1, :].copy() for k, v in mods.items()}
        labels = labels[..., ::-1, :].copy()
        mask = mask[..., ::-1, :].copy()
    if coins[2] and h == w:  # quarter rotation
        mods = {k: np.rot90(v, axes=(-2, -1)).copy() for k, v in mods.items()}
        labels = np.rot90(labels, axes=(-2, -1)).copy()
        mask = np.rot90(mask, axes=(-2, -1)).copy()
    if coins[3]:  # additive gaussian noise, per modality
        for name in sorted(mods):
            noise = rng.normal(0.0, 0.02, mods[name].shape)
            mods[name] = np.clip(mods[name] + noise, 0.0, 1.0).astype(np.float32)
    if coins[4]:  # brightness/contrast jitter, per modality
        for name in sorted(mods):
            contrast = rng.uniform(0.9, 1.1)
            brightness = rng.uniform(-0.1, 0.1)
            jittered = 0.5 + (mods[name] - 0.5) * contrast + brightness
            mods[name] = np.clip(jittered, 0.0, 1.0).astype(np.float32)
    return Sample(modalities=mods, labels=labels, valid_mask=mask)


# ---------------------------------------------------------------------------
# on-disk datasets


def save_dataset(
    root: str,
    splits: Dict[str, Sequence[Sample]],
    num_classes: int,
    multi_label: bool = False,
) -> None:
    """Write samples under ``root/<split>/<id>/`` plus a self-describing index."""
    first = next(iter(splits.values()))[0]
    modality_shapes = {k: v.shape[0] for k, v in sorted(first.modalities.items())}
    lines = ["multimod-dataset v1", f"classes {num_classes}", f"multi_label {int(multi_label)}"]
    for name, ch in modality_shapes.items():
        lines.append(f"modality {name} {ch}")
    os.makedirs(root, exist_ok=True)
    for split, samples in splits.items():
        for idx, sample in enumerate(samples):
            sample.validate(num_classes)
            sid = f"{idx:05d}"
            d = os.path.join(root, split, sid)
            os.makedirs(d, exist_ok=True)
            for name, raster in sample.modalities.items():
                save_tensor(os.path.join(d, f"mod-{name}.ten"), raster.astype(np.float32))
            save_tensor(
                os.path.join(d, "labels.ten"), sample.labels.astype(np.float32)
            )
            save_pgm(os.path.join(d, "mask.pgm"), sample.valid_mask.astype(np.float32))
            lines.append(f"sample {split} {sid}")
    with open(os.path.join(root, "index.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(root: str) -> Tuple[dict, Dict[str, List[Sample]]]:
    """Read a dataset written by :func:`save_dataset`.

    Returns (meta, splits): meta has ``classes``, ``multi_label`` and
    ``modalities`` (name -> channels); splits maps split name to samples in
    index order.
    """
    index = os.path.join(root, "index.txt")
    if not os.path.exists(index):
        raise FileNotFoundError(f"{root}: no index.txt, not a dataset directory")
    meta = {"modalities": {}}
    entries: List[Tuple[str, str]] = []
    with open(index, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != "multimod-dataset v1":
            raise ValueError(f"{index}: unrecognised header {header!r}")
        for ln, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "classes":
                meta["classes"] = int(parts[1])
            elif parts[0] == "multi_label":
                meta["multi_label"] = bool(int(parts[1]))
            elif parts[0] == "modality":
                meta["modalities"][parts[1]] = int(parts[2])
            elif parts[0] == "sample":
                entries.append((parts[1], parts[2]))
            else:
                raise ValueError(f"{index}:{ln}: unknown record {parts[0]!r}")
    if "classes" not in meta or not meta["modalities"]:
        raise ValueError(f"{index}: missing classes/modality records")

    splits: Dict[str, List[Sample]] = {}
    for split, sid in entries:
        d = os.path.join(root, split, sid)
        mods = {}
        for name, ch in meta["modalities"].items():
            raster = load_tensor(os.path.join(d, f"mod-{name}.ten"))
            if raster.ndim != 3 or raster.shape[0] != ch:
                raise ValueError(
                    f"{d}: modality {name} has shape {raster.shape}, expected ({ch}, H, W)"
                )
            mods[name] = raster.astype(np.float32)
        raw_labels = load_tensor(os.path.join(d, "labels.ten"))
        if meta["multi_label"]:
            labels = raw_labels.astype(np.uint8)
            if not np.array_equal(labels, raw_labels):
                raise ValueError(f"{d}: labels.ten holds non-0/1 values")
        else:
            labels = raw_labels.astype(np.int64)
            if not np.array_equal(labels, raw_labels):
                raise ValueError(f"{d}: labels.ten holds non-integer values")
        mask = load_pgm(os.path.join(d, "mask.pgm")) > 0.5
        sample = Sample(modalities=mods, labels=labels, valid_mask=mask)
        sample.validate(meta["classes"])
        splits.setdefault(split, []).append(sample)
    return meta, splits
