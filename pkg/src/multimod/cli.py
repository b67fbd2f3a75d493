"""Command-line interface.

Subcommands: ``synth``, ``train``, ``eval``, ``infer``, ``gradcheck``,
``robustness``, ``heatmap``, ``ceiling``. Exit codes: 0 success, 1 usage
error, 2 runtime failure.

Every command that produces an output directory drops a ``manifest.txt``
there recording the package version, kernel backend and every resolved
setting, so the run can be reproduced from the manifest alone. Commands
that only print (``gradcheck``, ``ceiling``) print the same header lines
instead. Seeds resolve as: the ``MULTIMOD_SEED`` environment variable
beats the ``--seed`` flag, which beats the config file value.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, configio
from . import checkpoint as ckpt_mod
from .data import SynthSpec, bayes_ceiling, load_dataset, save_dataset, synth_splits
from .fileio import load_pgm, load_ppm, load_tensor, save_pgm, save_tensor
from .gradcheck import run_battery
from .inference import (
    CORRUPTION_KINDS,
    evaluate,
    make_predictor,
    robustness_eval,
    sliding_window_predict,
    softmax,
    tta_predict,
)
from .kernels import BACKEND
from .model import ModalitySpec, ModelConfig, ModelParams, init_model, multimodal_forward
from .tensor import Tensor, no_grad
from .train import TrainConfig, TrainingAborted, train

log = logging.getLogger("multimod")

# short corruption names accepted on the command line -> internal kinds
_KIND_ALIASES = {
    "missing": "missing_zero",
    "noise": "white_noise",
    "interfered": "interfered_max",
}

# gradcheck battery cases grouped for --module filtering; "tensor" is the
# complement of the named groups, "all" disables filtering
_MODULE_CASES = {
    "paf": {"attention_build", "paf_head"},
    "gfu": {"gated_fusion"},
    "model": {"conv_bn_relu_block", "full_model_ce", "weighted_ce"},
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers


def _resolve_seed(config_seed: int, flag_seed: Optional[int]) -> Tuple[int, str]:
    env = os.environ.get("MULTIMOD_SEED")
    if env is not None:
        try:
            return int(env), "MULTIMOD_SEED"
        except ValueError:
            raise _UsageError(f"MULTIMOD_SEED={env!r} is not an integer") from None
    if flag_seed is not None:
        return flag_seed, "--seed"
    return config_seed, "config"


def _manifest_lines(command: str, settings: Dict[str, object]) -> List[str]:
    lines = [
        "multimod-run v1",
        f"command {command}",
        f"version {__version__}",
        f"backend {BACKEND}",
    ]
    for key, value in settings.items():
        lines.append(f"{key} {value}")
    return lines


def _write_manifest(out_dir: str, command: str, settings: Dict[str, object]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(_manifest_lines(command, settings)) + "\n")


def _load_model(ckpt_dir: str) -> ModelParams:
    cfg_path = os.path.join(ckpt_dir, "model.cfg")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(
            f"{ckpt_dir}: no model.cfg; point --checkpoint at a directory "
            f"written by 'multimod train'"
        )
    cfg = configio.model_config_from_kv(configio.parse_kv_file(cfg_path))
    params = init_model(cfg, np.random.default_rng(0))
    ckpt_mod.load_checkpoint(ckpt_dir, params.named_params(), params.named_buffers())
    return params


def _get_split(data_dir: str, split: str):
    meta, splits = load_dataset(data_dir)
    if split not in splits:
        raise _UsageError(
            f"dataset {data_dir} has splits {sorted(splits)}, not {split!r}"
        )
    return meta, splits[split]


def _load_raster(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ten":
        arr = load_tensor(path).astype(np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"{path}: raster must be (C, H, W), got shape {arr.shape}")
        return arr
    if ext == ".ppm":
        return load_ppm(path)
    if ext == ".pgm":
        return load_pgm(path)[None]
    raise _UsageError(f"{path}: unsupported raster extension {ext!r}")


def _load_inputs(specs: List[str], modality_names: List[str]) -> Dict[str, np.ndarray]:
    """Resolve ``--input`` values into modality rasters.

    Each value is either ``name=path`` or a sample directory holding one
    raster per modality (``mod-<name>.ten`` as written by ``synth``, or
    bare ``<name>.ten/.ppm/.pgm``).
    """
    modalities: Dict[str, np.ndarray] = {}
    for item in specs:
        name, sep, path = item.partition("=")
        if sep:
            modalities[name] = _load_raster(path)
            continue
        if not os.path.isdir(item):
            raise _UsageError(
                f"--input {item!r} is neither name=path nor a sample directory"
            )
        for name in modality_names:
            for candidate in (
                f"mod-{name}.ten",
                f"{name}.ten",
                f"{name}.ppm",
                f"{name}.pgm",
            ):
                full = os.path.join(item, candidate)
                if os.path.exists(full):
                    modalities[name] = _load_raster(full)
                    break
            else:
                raise _UsageError(f"{item}: no raster found for modality {name!r}")
    missing = [n for n in modality_names if n not in modalities]
    if missing:
        raise _UsageError(f"missing --input for modalities: {', '.join(missing)}")
    extra = [n for n in modalities if n not in modality_names]
    if extra:
        raise _UsageError(f"model has no modality named: {', '.join(extra)}")
    return modalities


def _parse_corrupt(spec: Optional[str]) -> Optional[Tuple[str, str]]:
    if spec is None:
        return None
    kind, sep, modality = spec.partition(":")
    kind = _KIND_ALIASES.get(kind, kind)
    if not sep or kind not in CORRUPTION_KINDS or not modality:
        raise _UsageError(
            f"--corrupt expects kind:modality with kind in {CORRUPTION_KINDS} "
            f"(or {tuple(_KIND_ALIASES)}), got {spec!r}"
        )
    return kind, modality


def _metrics_lines(metrics: dict) -> List[str]:
    lines = [
        f"oa {metrics['oa']:.6f}",
        f"miou {metrics['miou']:.6f}",
        f"mf1 {metrics['mf1']:.6f}",
    ]
    for cls, (iou, f1) in enumerate(zip(metrics["iou"], metrics["f1"])):
        lines.append(f"class{cls} iou {iou:.6f} f1 {f1:.6f}")
    if metrics["absent"]:
        lines.append("absent " + ",".join(str(c) for c in metrics["absent"]))
    return lines


def _predict_probs(predictor, modalities, tta: bool, window: int, stride: int):
    if window:
        if not stride:
            raise _UsageError("--window needs --stride")
        return sliding_window_predict(predictor, modalities, window, stride, tta=tta)
    if tta:
        return tta_predict(predictor, modalities)
    return softmax(predictor(modalities), axis=0)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    if args.spec:
        spec = configio.synth_spec_from_kv(configio.parse_kv_file(args.spec))
    else:
        spec = SynthSpec()
    seed, source = _resolve_seed(spec.seed, args.seed)
    spec.seed = seed
    train_samples, val_samples = synth_splits(spec)
    save_dataset(
        args.out,
        {"train": train_samples, "val": val_samples},
        spec.num_classes,
        spec.multi_label,
    )
    settings = {f"synth.{k}": v for k, v in configio.synth_spec_to_kv(spec).items()}
    settings["seed_source"] = source
    _write_manifest(args.out, "synth", settings)
    print(
        f"wrote {len(train_samples)} train + {len(val_samples)} val samples to {args.out}"
    )
    return 0


def _split_train_config(path: Optional[str]) -> Tuple[Dict[str, str], Dict[str, str]]:
    """Split a flat ``train --config`` file into model and train key groups."""
    if path is None:
        return {}, {}
    kv = configio.parse_kv_file(path)
    model_keys = set(
        configio.model_config_to_kv(
            ModelConfig(modalities=[ModalitySpec("x", 1)], num_classes=2)
        )
    )
    train_keys = set(configio.train_config_to_kv(TrainConfig()))
    model_kv = {k: v for k, v in kv.items() if k in model_keys}
    train_kv = {k: v for k, v in kv.items() if k in train_keys}
    unknown = sorted(set(kv) - model_keys - train_keys)
    if unknown:
        raise _UsageError(
            f"{path}: unknown config keys {unknown}; valid keys are "
            f"{sorted(model_keys | train_keys)}"
        )
    return model_kv, train_kv


def _cmd_train(args) -> int:
    meta, splits = load_dataset(args.data)
    if "train" not in splits or "val" not in splits:
        raise _UsageError(
            f"dataset {args.data} needs 'train' and 'val' splits, has {sorted(splits)}"
        )

    model_kv, train_kv = _split_train_config(args.config)
    base_kv = {
        "modalities": ",".join(f"{n}:{c}" for n, c in meta["modalities"].items()),
        "num_classes": str(meta["classes"]),
    }
    base_kv.update(model_kv)
    model_cfg = configio.model_config_from_kv(base_kv)
    # the model may consume a subset of the dataset's modalities (unimodal
    # baselines train on the full set), but names and channels must agree
    got = {m.name: m.channels for m in model_cfg.modalities}
    compatible = all(meta["modalities"].get(n) == c for n, c in got.items())
    if not compatible or model_cfg.num_classes != meta["classes"]:
        raise _UsageError(
            f"config expects modalities {got} with {model_cfg.num_classes} classes; "
            f"dataset has {meta['modalities']} with {meta['classes']}"
        )
    train_cfg = configio.train_config_from_kv(train_kv)
    seed, source = _resolve_seed(train_cfg.seed, args.seed)
    train_cfg.seed = seed

    result = train(
        model_cfg,
        train_cfg,
        splits["train"],
        splits["val"],
        args.out,
        resume_from=args.resume,
        quiet=args.quiet,
    )

    model_text = configio.format_kv(configio.model_config_to_kv(model_cfg))
    for d in (args.out, result.checkpoint_dir, result.best_checkpoint_dir):
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "model.cfg"), "w", encoding="ascii") as f:
            f.write(model_text)
    with open(os.path.join(args.out, "train.cfg"), "w", encoding="ascii") as f:
        f.write(configio.format_kv(configio.train_config_to_kv(train_cfg)))

    settings: Dict[str, object] = {"data": os.path.abspath(args.data)}
    settings.update(
        {f"model.{k}": v for k, v in configio.model_config_to_kv(model_cfg).items()}
    )
    settings.update(
        {f"train.{k}": v for k, v in configio.train_config_to_kv(train_cfg).items()}
    )
    settings["seed_source"] = source
    if args.resume:
        settings["resume"] = os.path.abspath(args.resume)
    _write_manifest(args.out, "train", settings)

    print(f"final loss {result.final_loss:.4f}")
    print(f"best val mIoU {result.best_miou:.4f} at iter {result.best_iter}")
    print(
        f"checkpoints: {result.checkpoint_dir} (last), "
        f"{result.best_checkpoint_dir} (best)"
    )
    return 0


def _cmd_eval(args) -> int:
    meta, samples = _get_split(args.data, args.split)
    params = _load_model(args.checkpoint)
    corruption = _parse_corrupt(args.corrupt)
    if args.window and not args.stride:
        raise _UsageError("--window needs --stride")
    metrics, _ = evaluate(
        make_predictor(params),
        samples,
        meta["classes"],
        tta=args.tta,
        window=args.window,
        stride=args.stride,
        corruption=corruption,
        corruption_seed=args.seed if args.seed is not None else 0,
        primary=params.config.modalities[0].name,
    )
    lines = _metrics_lines(metrics)
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.txt"), "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")
        _write_manifest(
            args.out,
            "eval",
            {
                "checkpoint": os.path.abspath(args.checkpoint),
                "data": os.path.abspath(args.data),
                "split": args.split,
                "tta": int(args.tta),
                "window": args.window,
                "stride": args.stride,
                "corrupt": args.corrupt or "",
            },
        )
    return 0


def _cmd_infer(args) -> int:
    params = _load_model(args.checkpoint)
    names = [m.name for m in params.config.modalities]
    modalities = _load_inputs(args.input, names)
    probs = _predict_probs(
        make_predictor(params), modalities, args.tta, args.window, args.stride
    )
    pred = probs.argmax(axis=0)

    os.makedirs(args.out, exist_ok=True)
    save_tensor(os.path.join(args.out, "probs.ten"), probs.astype(np.float32))
    save_pgm(os.path.join(args.out, "pred.pgm"), pred.astype(np.float32) / 255.0)
    _write_manifest(
        args.out,
        "infer",
        {
            "checkpoint": os.path.abspath(args.checkpoint),
            "inputs": ";".join(args.input),
            "tta": int(args.tta),
            "window": args.window,
            "stride": args.stride,
        },
    )
    print(
        f"wrote {args.out}/pred.pgm (class ids) and probs.ten; classes present: "
        f"{sorted(int(c) for c in np.unique(pred))}"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    if args.module in _MODULE_CASES:
        wanted = _MODULE_CASES[args.module]
        keep = lambda name: name in wanted  # noqa: E731
    elif args.module == "tensor":
        named = set().union(*_MODULE_CASES.values())
        keep = lambda name: name not in named  # noqa: E731
    else:
        keep = lambda name: True  # noqa: E731
    print("\n".join(_manifest_lines("gradcheck", {"module": args.module})))
    worst = 0.0
    failed = []
    ran = 0
    for name, err in run_battery(max_elements=args.max_elements, keep=keep):
        ran += 1
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:24s} {err:.3e}  {status}")
        worst = max(worst, err)
        if err >= args.tolerance:
            failed.append(name)
    print(f"{ran} cases, worst {worst:.3e} (tolerance {args.tolerance:g})")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def _cmd_robustness(args) -> int:
    meta, samples = _get_split(args.data, args.split)
    params = _load_model(args.checkpoint)
    names = [m.name for m in params.config.modalities]
    target = args.modality
    if target is None:
        if len(names) < 2:
            raise _UsageError("single-modality model: --modality is required")
        target = names[-1]
    if target not in names:
        raise _UsageError(f"model has modalities {names}, not {target!r}")
    predictor = make_predictor(params)
    seed = args.seed if args.seed is not None else 0

    if args.kind:
        kinds = [_KIND_ALIASES[args.kind]]
        rows = []
    else:
        kinds = list(CORRUPTION_KINDS)
        clean, _ = evaluate(predictor, samples, meta["classes"])
        rows = [("clean", clean)]
    for kind in kinds:
        rows.append(
            (
                kind,
                robustness_eval(
                    predictor,
                    samples,
                    meta["classes"],
                    kind,
                    target,
                    corruption_seed=seed,
                    primary=names[0],
                ),
            )
        )
    lines = [f"modality {target}"]
    for label, metrics in rows:
        lines.append(
            f"{label} miou {metrics['miou']:.6f} mf1 {metrics['mf1']:.6f} "
            f"oa {metrics['oa']:.6f}"
        )
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "robustness.txt"), "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")
        _write_manifest(
            args.out,
            "robustness",
            {
                "checkpoint": os.path.abspath(args.checkpoint),
                "data": os.path.abspath(args.data),
                "split": args.split,
                "modality": target,
                "kind": args.kind or "all",
            },
        )
    return 0


def _cmd_heatmap(args) -> int:
    params = _load_model(args.checkpoint)
    names = [m.name for m in params.config.modalities]
    modalities = _load_inputs(args.input, names)
    collect: Dict[str, object] = {}
    inputs = {k: Tensor(v[None]) for k, v in modalities.items()}
    with no_grad():
        multimodal_forward(inputs, params, mode="eval", collect=collect)

    os.makedirs(args.out, exist_ok=True)
    wrote = []
    report = []
    for key, value in sorted(collect.items()):
        name, _, what = key.partition(".")
        if what == "gate":
            heat = np.asarray(value)[0].mean(axis=0)  # channel-mean gate, in (0,1)
            path = os.path.join(args.out, f"gate-{name}.pgm")
            save_pgm(path, heat)
            wrote.append(path)
            report.append(
                f"gate {name} mean {heat.mean():.4f} min {heat.min():.4f} "
                f"max {heat.max():.4f}"
            )
        elif what == "attention":
            report.append(
                f"attention {name} rows {value.rows} guarded {value.guarded} "
                f"({value.guarded_fraction:.2%})"
            )
    _write_manifest(
        args.out,
        "heatmap",
        {
            "checkpoint": os.path.abspath(args.checkpoint),
            "inputs": ";".join(args.input),
        },
    )
    print("\n".join(report))
    for path in wrote:
        print(f"wrote {path}")
    return 0


def _cmd_ceiling(args) -> int:
    meta, splits = load_dataset(args.data)
    if "train" not in splits or "val" not in splits:
        raise _UsageError(f"dataset {args.data} needs train and val splits")
    names = sorted(meta["modalities"])
    chosen = args.modalities.split(",") if args.modalities else names
    for name in chosen:
        if name not in names:
            raise _UsageError(f"dataset has modalities {names}, not {name!r}")
    print(
        "\n".join(
            _manifest_lines(
                "ceiling",
                {
                    "data": os.path.abspath(args.data),
                    "modalities": ",".join(chosen),
                    "bins": args.bins,
                },
            )
        )
    )
    metrics = bayes_ceiling(
        splits["train"], splits["val"], chosen, meta["classes"], bins=args.bins
    )
    print("\n".join(_metrics_lines(metrics)))
    return 0


# ---------------------------------------------------------------------------
# wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="multimod", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"multimod {__version__}"
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        metavar="N",
        help="worker threads; BLAS pools are pinned at import via "
        "MULTIMOD_THREADS, values over 1 only raise the numba pool "
        "(default: 1, the reproducible setting)",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="info-level logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-modality dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--spec", help="synthesis spec file (key = value)")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument(
        "--config",
        help="flat key=value file; model keys (widths, latent, ...) and "
        "training keys (base_lr, total_iters, ...) may be mixed",
    )
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument(
        "--tta", action="store_true", help="average flip-variant probabilities"
    )
    p.add_argument("--window", type=int, default=0, help="sliding window size")
    p.add_argument("--stride", type=int, default=0, help="sliding window stride")
    p.add_argument("--corrupt", help="kind:modality, e.g. missing:height")
    p.add_argument("--seed", type=int, help="corruption noise seed")
    p.add_argument("--out", help="write metrics.txt and manifest here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="predict one sample from raster files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--input",
        action="append",
        required=True,
        metavar="DIR|NAME=PATH",
        help="sample directory, or one name=path raster (.ten/.ppm/.pgm) "
        "per modality (repeatable)",
    )
    p.add_argument("--tta", action="store_true")
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--stride", type=int, default=0)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument(
        "--module",
        choices=("all", "tensor", "paf", "gfu", "model"),
        default="all",
        help="restrict to one op group",
    )
    p.add_argument("--max-elements", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("robustness", help="score with one modality corrupted")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument(
        "--kind",
        choices=tuple(_KIND_ALIASES),
        help="single corruption kind (default: clean plus all three)",
    )
    p.add_argument("--modality", help="modality to corrupt (default: the last one)")
    p.add_argument("--seed", type=int, help="corruption noise seed")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_robustness)

    p = sub.add_parser("heatmap", help="write fusion-gate heatmaps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--input",
        action="append",
        required=True,
        metavar="DIR|NAME=PATH",
        help="sample directory or name=path rasters, as for infer",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_heatmap)

    p = sub.add_parser("ceiling", help="per-pixel histogram-classifier ceiling")
    p.add_argument("--data", required=True)
    p.add_argument("--modalities", help="comma list (default: all)")
    p.add_argument("--bins", type=int, default=16)
    p.set_defaults(fn=_cmd_ceiling)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads != 1:
        os.environ["MULTIMOD_THREADS"] = str(args.threads)
        try:
            import numba

            numba.set_num_threads(args.threads)
        except (ImportError, ValueError):
            pass
        log.warning(
            "threads=%d: BLAS pools keep their import-time size; set "
            "MULTIMOD_THREADS before launching to resize them",
            args.threads,
        )
    try:
        return args.fn(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract: exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
