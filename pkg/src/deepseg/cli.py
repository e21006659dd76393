"""``deepseg`` command-line harness.

    deepseg <train|predict|evaluate|benchmark|synth|augment-preview>
            --config RUN.json [--fold 0|1] [--seed N] [--out DIR]

The run configuration is a JSON object; see ``RUN_CONFIG_SCHEMA`` (also
printed by ``deepseg --print-schema``). Paths inside the config are resolved
relative to the config file's directory. Every command validates the whole
config before writing anything.

Exit status: 0 success, 2 configuration error, 3 I/O error (missing or
corrupt files, unwritable output), 4 numerical failure (non-finite loss or
gradient), 5 completed with warnings (e.g. unmatched cases in evaluate).
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from deepseg import __version__
from deepseg.augment import AugmentSpec, augment_sample
from deepseg.data_io import (
    DataError,
    PhantomSpec,
    binarize_labels,
    generate_phantom_dataset,
    load_dataset,
    load_slice,
    normalize_slice,
    preprocess_slice,
    read_manifest,
    resize_bilinear,
    save_slice,
)
from deepseg.metrics import MetricReport, evaluate_case
from deepseg.nn.checkpoint import CheckpointError, dumps, load_checkpoint, save_checkpoint
from deepseg.nn.model import ENCODER_FAMILIES, ModelConfig, assemble_model, count_layers, count_parameters
from deepseg.train import LossSpec, NumericalError, TrainConfig, crossval_split, predict_masks, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_WARNING = 0, 2, 3, 4, 5
COMMANDS = ("train", "predict", "evaluate", "benchmark", "synth", "augment-preview")

log = logging.getLogger("deepseg")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

RUN_CONFIG_SCHEMA = _obj(
    {
        "model": _obj(
            {
                "encoder_family": {"enum": list(ENCODER_FAMILIES)},
                "depth": _INT,
                "base_filters": _INT,
                "num_classes": _INT,
                "input_shape": {"type": "array", "items": _INT, "minItems": 3, "maxItems": 3},
                "seed": _INT,
                "expansion_factor": _INT,
                "dense_layers": _INT,
                "drop_path_rate": _NUM,
            }
        ),
        "train": _obj({k: (_INT if k in ("epochs", "batch_size", "seed") else _NUM) for k in (
            "epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "dropout_rate", "seed")}),
        "loss": _obj({"class_weights": {"type": "array", "items": _NUM, "minItems": 2}}),
        "augment": _obj(
            {
                **{k: _NUM for k in ("flip_h_prob", "flip_v_prob", "scale_range", "translate_range",
                                     "rotate_range", "shear_range", "affine_prob", "elastic_prob")},
                "enabled": {"type": "boolean"},
                "elastic": _obj({"alpha": _NUM, "sigma": _NUM}),
            }
        ),
        "data": _obj(
            {
                "manifest": _STR,
                "phantom": _obj(
                    {
                        "extent": _INT, "brain_axes": _PAIR, "brain_intensity": _PAIR, "max_blobs": _INT,
                        "blob_radius": _PAIR, "blob_intensity": _PAIR, "noise": _NUM, "seed": _INT,
                        "cases": _INT, "slices_per_case": _INT,
                    }
                ),
            }
        ),
        "output_dir": _STR,
        "fold": {"enum": [0, 1]},
        "predict": _obj({"checkpoint": _STR, "manifest": _STR, "subset": {"enum": ["all", "validation"]}}),
        "evaluate": _obj({"predictions": _STR, "truth": _STR, "hd_percentile": _NUM}),
        "benchmark": _obj(
            {
                "families": {"type": "array", "items": _STR, "minItems": 1},
                "extent": _INT, "slices": _INT, "epochs": _INT, "predictions": _INT, "warmup": {"type": "boolean"},
            }
        ),
        "preview": _obj({"count": _INT, "seed": _INT}),
    }
)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    manifest: Path | None = None
    phantom: PhantomSpec | None = None
    phantom_cases: int = 8
    phantom_slices: int = 4
    output_dir: Path = Path("deepseg_out")
    fold: int = 0
    predict: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)
    preview: dict = field(default_factory=dict)

    @property
    def extent(self) -> int:
        return self.model.input_shape[1]

    def data_manifest(self) -> Path:
        """Manifest to read: the configured one, or the phantom set under the output dir."""
        if self.manifest is not None:
            return self.manifest
        return self.output_dir / "data" / "manifest.json"


def _describe_schema_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "additionalProperties":
        allowed = list(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - set(allowed))
        hints = []
        for key in extra:
            close = difflib.get_close_matches(key, allowed, n=1)
            hints.append(f"unknown key {key!r}" + (f" (did you mean {close[0]!r}?)" if close else ""))
        return f"{where}: " + "; ".join(hints) + f"; allowed keys: {', '.join(allowed)}"
    return f"{where}: {err.message}"


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_run_config(raw: dict, base_dir: Path = Path("."), overrides: dict | None = None) -> RunConfig:
    """Validate a run-config mapping (structure, then every nested invariant)."""
    errors = sorted(jsonschema.Draft7Validator(RUN_CONFIG_SCHEMA).iter_errors(raw), key=lambda e: [str(p) for p in e.path])
    if errors:
        raise ConfigError("invalid run config:\n  " + "\n  ".join(_describe_schema_error(e) for e in errors))
    overrides = overrides or {}

    def path(p):
        return None if p is None else (base_dir / p)

    model_d = dict(raw.get("model", {}))
    if "input_shape" in model_d:
        model_d["input_shape"] = tuple(model_d["input_shape"])
    model = _build(ModelConfig, "model", model_d)
    if model.input_shape[1] != model.input_shape[2]:
        raise ConfigError("model.input_shape: slices are resized to a square, so height must equal width")
    if model.input_shape[0] != 1:
        raise ConfigError("model.input_shape: slices have a single channel")
    train_d = dict(raw.get("train", {}))
    if overrides.get("seed") is not None:
        train_d["seed"] = overrides["seed"]
    train = _build(TrainConfig, "train", train_d)
    loss = _build(LossSpec, "loss", {k: tuple(v) for k, v in raw.get("loss", {}).items()})
    if loss.num_classes != model.num_classes:
        raise ConfigError(f"loss.class_weights has {loss.num_classes} entries for {model.num_classes} classes")
    try:
        augment = AugmentSpec.from_dict(raw.get("augment", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"augment: {exc}") from exc

    data = raw.get("data", {})
    if ("manifest" in data) == ("phantom" in data):
        raise ConfigError("data: give exactly one of 'manifest' or 'phantom'")
    phantom = None
    cases, slices = 8, 4
    if "phantom" in data:
        pd = dict(data["phantom"])
        cases = pd.pop("cases", cases)
        slices = pd.pop("slices_per_case", slices)
        if cases < 1 or slices < 1:
            raise ConfigError("data.phantom: cases and slices_per_case must be >= 1")
        phantom = _build(PhantomSpec, "data.phantom", {k: tuple(v) if isinstance(v, list) else v for k, v in pd.items()})

    out = overrides.get("out")
    output_dir = Path(out) if out is not None else path(raw.get("output_dir", "deepseg_out"))
    fold = overrides.get("fold")
    fold = raw.get("fold", 0) if fold is None else fold
    if fold not in (0, 1):
        raise ConfigError(f"fold must be 0 or 1, got {fold}")

    predict = dict(raw.get("predict", {}))
    for k in ("checkpoint", "manifest"):
        if k in predict:
            predict[k] = path(predict[k])
    evaluate = dict(raw.get("evaluate", {}))
    for k in ("predictions", "truth"):
        if k in evaluate:
            evaluate[k] = path(evaluate[k])
    if "hd_percentile" in evaluate and not 0 < evaluate["hd_percentile"] <= 100:
        raise ConfigError("evaluate.hd_percentile must lie in (0, 100]")
    bench = dict(raw.get("benchmark", {}))
    unknown = sorted(set(bench.get("families", [])) - set(ENCODER_FAMILIES))
    if unknown:
        raise ConfigError(f"benchmark.families: unknown {unknown}; choose from {list(ENCODER_FAMILIES)}")
    for k in ("extent", "slices", "predictions"):
        if k in bench and bench[k] < 1:
            raise ConfigError(f"benchmark.{k} must be >= 1")
    if bench.get("epochs", 1) < 1:
        raise ConfigError("benchmark.epochs must be >= 1")
    preview = dict(raw.get("preview", {}))
    if preview.get("count", 1) < 1:
        raise ConfigError("preview.count must be >= 1")
    return RunConfig(model, train, loss, augment, path(data.get("manifest")), phantom, cases, slices,
                     output_dir, fold, predict, evaluate, bench, preview)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: the run config must be a JSON object")
    return parse_run_config(raw, path.parent, overrides)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _ensure_output(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _ensure_data(cfg: RunConfig) -> Path:
    """Generate the configured phantom set (deterministic) if it is not there yet."""
    manifest = cfg.data_manifest()
    if cfg.phantom is not None and not manifest.is_file():
        generate_phantom_dataset(cfg.phantom, cfg.phantom_cases, cfg.phantom_slices, manifest.parent)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    return manifest


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.phantom is None:
        raise ConfigError("synth needs data.phantom in the run config")
    _ensure_output(cfg)
    target = cfg.data_manifest().parent
    m = generate_phantom_dataset(cfg.phantom, cfg.phantom_cases, cfg.phantom_slices, target)
    print(f"wrote {len(m.cases)} cases x {cfg.phantom_slices} slices to {target / 'manifest.json'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _ensure_output(cfg)
    manifest_path = _ensure_data(cfg)
    manifest = read_manifest(manifest_path)
    train_ids, val_ids = crossval_split(manifest.case_ids, cfg.fold, cfg.train.seed)
    train_set = load_dataset(manifest_path, cfg.extent, train_ids)
    val_set = load_dataset(manifest_path, cfg.extent, val_ids)
    log.info("fold %d: %d training slices from %d cases, %d validation slices from %d cases",
             cfg.fold, len(train_set), len(train_ids), len(val_set), len(val_ids))
    model = assemble_model(cfg.model)

    def progress(step, loss):
        log.debug("step %d loss %.6f", step, loss)

    model, history = train_loop(model, train_set, cfg.train, cfg.loss, cfg.augment, val_set, on_step=progress)
    size = save_checkpoint(model, out / "model.dsegmdl")
    history.write_csv(out / "history.csv")
    final = history.records[-1].val_dsc if history.records else None
    print(f"checkpoint {out / 'model.dsegmdl'} ({size} bytes); history {out / 'history.csv'}")
    print(f"final validation DSC: {'NA' if final is None else f'{final:.4f}'}")
    return EXIT_OK


def _load_model(cfg: RunConfig):
    ckpt = Path(cfg.predict.get("checkpoint", cfg.output_dir / "model.dsegmdl"))
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    have, want = model.config, cfg.model
    if (have.input_shape, have.num_classes) != (want.input_shape, want.num_classes):
        raise ConfigError(
            f"checkpoint {ckpt} was built for input {have.input_shape} with {have.num_classes} classes; "
            f"config asks for {want.input_shape} with {want.num_classes}"
        )
    return model


def cmd_predict(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    manifest_path = Path(cfg.predict["manifest"]) if "manifest" in cfg.predict else _ensure_data(cfg)
    manifest = read_manifest(manifest_path)
    cases = manifest.cases
    if cfg.predict.get("subset", "all") == "validation":
        _, val_ids = crossval_split(manifest.case_ids, cfg.fold, cfg.train.seed)
        cases = [c for c in cases if c.case_id in set(val_ids)]
    out = _ensure_output(cfg) / "predictions"
    n = 0
    for case in cases:
        for img_rel, mask_rel in zip(case.images, case.masks):
            raw = load_slice(manifest.root / img_rel)
            image = normalize_slice(raw)
            small, _ = resize_bilinear(image, np.zeros(image.shape, np.uint8), cfg.extent)
            # predict at the model extent, then map back to the slice's own extent
            pred = _resize_mask(predict_masks(model, [small])[0], raw.shape)
            target = out / mask_rel
            target.parent.mkdir(parents=True, exist_ok=True)
            save_slice(target, pred.astype(np.uint8))
            n += 1
    print(f"wrote {n} predicted masks under {out}")
    return EXIT_OK


def _align_nearest(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=int)
    return np.minimum(np.floor(np.arange(n_out) * ((n_in - 1) / (n_out - 1)) + 0.5).astype(int), n_in - 1)


def _resize_mask(mask: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour resize with the same corner-aligned grid as resize_bilinear."""
    if mask.shape == tuple(shape):
        return mask
    return mask[np.ix_(_align_nearest(mask.shape[0], shape[0]), _align_nearest(mask.shape[1], shape[1]))]


def _mask_files(root: Path) -> dict[str, Path]:
    return {p.relative_to(root).with_suffix("").as_posix(): p for p in sorted(root.rglob("*.dseg"))}


def cmd_evaluate(cfg: RunConfig) -> int:
    from deepseg.metrics import MetricConfig

    pred_dir = Path(cfg.evaluate.get("predictions", cfg.output_dir / "predictions"))
    truth = Path(cfg.evaluate["truth"]) if "truth" in cfg.evaluate else _ensure_data(cfg)
    mconf = MetricConfig(hd_percentile=cfg.evaluate.get("hd_percentile", 100.0))
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    if truth.is_dir():
        truth_files = _mask_files(truth)
    elif truth.is_file():
        m = read_manifest(truth)
        truth_files = {Path(rel).with_suffix("").as_posix(): m.root / rel for c in m.cases for rel in c.masks}
    else:
        raise FileNotFoundError(f"ground truth not found: {truth}")
    pred_files = _mask_files(pred_dir)
    out = _ensure_output(cfg)
    report = MetricReport()
    missing = sorted(set(pred_files) ^ set(truth_files))
    for key in sorted(set(pred_files) & set(truth_files)):
        try:
            pred = load_slice(pred_files[key])
            gt = binarize_labels(load_slice(truth_files[key]))
            if pred.shape != gt.shape:
                raise DataError(f"prediction {pred.shape} vs truth {gt.shape}")
            report.cases.append(evaluate_case(key, binarize_labels(pred), gt, mconf))
        except (DataError, OSError, ValueError) as exc:
            log.warning("case %s excluded: %s", key, exc)
            missing.append(key)
    report.missing = sorted(missing)
    report.write_csv(out / "metrics.csv")
    mean = report.mean_dsc
    print(f"evaluated {len(report.cases)} cases; mean DSC {'NA' if mean is None else f'{mean:.4f}'}; "
          f"report {out / 'metrics.csv'}")
    if report.missing:
        log.warning("%d unmatched or unreadable cases: %s", len(report.missing), ", ".join(report.missing[:10]))
        return EXIT_WARNING
    return EXIT_OK


def hardware_header(threads: int) -> list[str]:
    return [
        f"# deepseg {__version__} benchmark",
        f"# platform: {platform.platform()}",
        f"# processor: {platform.processor() or platform.machine()}; cpus: {os.cpu_count()}",
        f"# python {platform.python_version()}, numpy {np.__version__}; worker threads: {threads}",
    ]


def cmd_benchmark(cfg: RunConfig) -> int:
    from deepseg.train import worker_count

    b = cfg.benchmark
    families = b.get("families", list(ENCODER_FAMILIES))
    extent = b.get("extent", 64)
    n_slices = b.get("slices", 4)
    epochs = b.get("epochs", 1)
    n_pred = b.get("predictions", 2)
    warmup = b.get("warmup", True)
    out = _ensure_output(cfg)
    phantom = replace(cfg.phantom or PhantomSpec(), extent=extent)
    bench_data = out / "benchmark_data"
    generate_phantom_dataset(phantom, 1, n_slices, bench_data)
    records = load_dataset(bench_data / "manifest.json", extent)
    tcfg = replace(cfg.train, epochs=1)
    rows = []
    for fam in families:
        try:
            mcfg = replace(cfg.model, encoder_family=fam, input_shape=(1, extent, extent))
            model = assemble_model(mcfg)
            params, layers = count_parameters(model), count_layers(model)
            if warmup:
                train_loop(assemble_model(mcfg), records[:1], replace(tcfg, batch_size=1), cfg.loss, None)
            times = []
            for e in range(epochs):
                t0 = time.perf_counter()
                train_loop(model, records, replace(tcfg, seed=cfg.train.seed + e), cfg.loss, None)
                times.append(time.perf_counter() - t0)
            ptimes = []
            for i in range(n_pred):
                t0 = time.perf_counter()
                predict_masks(model, [records[i % len(records)].image])
                ptimes.append(time.perf_counter() - t0)
            rows.append([fam, len(dumps(model)), f"{np.mean(times):.4f}", f"{np.mean(ptimes):.4f}", params, layers, "ok"])
        except NumericalError as exc:
            rows.append([fam, "NA", "NA", "NA", "NA", "NA", f"failed: {exc}"])
        except (ValueError, MemoryError) as exc:
            rows.append([fam, "NA", "NA", "NA", "NA", "NA", f"failed: {exc}"])
        log.info("benchmark %s: %s", fam, rows[-1][-1])
    path = out / "benchmark.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in hardware_header(worker_count()):
            fh.write(line + "\n")
        fh.write(f"# phantom extent {extent}, {n_slices} slices, batch {tcfg.batch_size}, {epochs} timed epochs, "
                 f"{n_pred} timed predictions\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "size_bytes", "train_epoch_seconds", "predict_seconds", "params", "layers", "status"])
        w.writerows(rows)
    print(f"benchmark report {path}")
    return EXIT_WARNING if any(r[-1] != "ok" for r in rows) else EXIT_OK


def cmd_augment_preview(cfg: RunConfig) -> int:
    out = _ensure_output(cfg) / "preview"
    manifest_path = _ensure_data(cfg)
    manifest = read_manifest(manifest_path)
    count = cfg.preview.get("count", 4)
    seed = cfg.preview.get("seed", cfg.train.seed)
    done = 0
    for case in manifest.cases:
        for idx, (img_rel, mask_rel) in enumerate(zip(case.images, case.masks)):
            if done >= count:
                break
            pre = preprocess_slice(load_slice(manifest.root / img_rel), load_slice(manifest.root / mask_rel), cfg.extent)
            if pre is None:
                continue
            image, mask = pre
            aug_img, aug_mask = augment_sample(image, mask, cfg.augment, seed + done)
            stem = f"{case.case_id}_{idx:03d}"
            out.mkdir(parents=True, exist_ok=True)
            save_slice(out / f"{stem}_before_image.dseg", image)
            save_slice(out / f"{stem}_before_mask.dseg", mask)
            save_slice(out / f"{stem}_after_image.dseg", aug_img.astype(np.float32))
            save_slice(out / f"{stem}_after_mask.dseg", aug_mask.astype(np.uint8))
            done += 1
    print(f"wrote {done} before/after pairs under {out}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "synth": cmd_synth,
    "augment-preview": cmd_augment_preview,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deepseg",
        description="Encoder-decoder brain-tumour segmentation harness.",
        epilog="exit status: 0 success, 2 config error, 3 I/O error, 4 numerical failure, 5 completed with warnings",
    )
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--fold", type=int, choices=(0, 1), help="cross-validation fold (overrides config)")
    p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--print-schema", action="store_true", help="print the run-config JSON schema and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"deepseg {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    if args.print_schema:
        print(json.dumps(RUN_CONFIG_SCHEMA, indent=2))
        return EXIT_OK
    if args.command is None or args.config is None:
        print("deepseg: a command and --config are required (see --help)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_run_config(args.config, {"fold": args.fold, "seed": args.seed, "out": args.out})
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"deepseg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"deepseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError, CheckpointError) as exc:
        print(f"deepseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"deepseg: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
