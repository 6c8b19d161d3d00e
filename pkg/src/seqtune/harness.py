"""End-to-end protocol: source pretraining followed by 2-fold CV of each fine-tuning mode.

Seeds: one global seed fans out through ``numpy.random.SeedSequence``:

==============================  ===============================
use                             entropy
==============================  ===============================
two-fold split                  ``seed``
pretraining init / shuffling    ``(seed, 0)``
train/val split of fold f       ``(seed, 1, f)``
new head of fold f              ``(seed, 2, f)``
training shuffles, mode i       ``(seed, 3, f, i)``
==============================  ===============================

so all modes start from identical data partitions and weights. Only the
freeze schedule and the shuffling order differ between them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data_io import (
    Dataset,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_dataset,
    load_weights,
    save_weights,
    source_task_spec,
    split_train_val,
    split_two_fold,
)
from .errors import ConfigurationError, SeqtuneError
from .evaluation import PROJECTION_ORDER, EvalReport, build_report, format_table
from .model import DenseNetConfig, Network, build_densenet_lite, replace_head
from .scheduler import MODE_ORDER, FineTuneMode, SftSchedule, schedule_summary
from .training import ClassWeightPolicy, TrainConfig, fit, predict, restore

logger = logging.getLogger(__name__)


def derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    out_dir: Path
    synthetic: SyntheticSpec | None = None
    data_index: Path | None = None
    model: DenseNetConfig = field(default_factory=DenseNetConfig)
    modes: tuple[FineTuneMode, ...] = MODE_ORDER
    epochs: int = 30
    step_epochs: int = 2
    unfreeze_per_step: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    class_weight_policy: ClassWeightPolicy = ClassWeightPolicy.INVERSE_FREQUENCY
    train_fraction: float = 0.7
    weights: Path | None = None
    pretrain_epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        modes = {FineTuneMode.parse(mode) for mode in self.modes}
        if not modes:
            raise ConfigurationError("at least one fine-tuning mode is required")
        self.modes = tuple(mode for mode in MODE_ORDER if mode in modes)
        self.class_weight_policy = ClassWeightPolicy(self.class_weight_policy)
        if (self.synthetic is None) == (self.data_index is None):
            raise ConfigurationError("exactly one of a synthetic spec or a dataset index is required")
        if self.weights is None and self.synthetic is None:
            raise ConfigurationError("a dataset index needs pretrained --weights")
        # fail fast on bad schedule parameters
        SftSchedule(self.epochs, self.step_epochs, self.unfreeze_per_step, 1)

    def to_dict(self) -> dict:
        return {
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "data_index": str(self.data_index) if self.data_index else None,
            "model": self.model.to_dict(),
            "modes": [mode.value for mode in self.modes],
            "epochs": self.epochs,
            "step_epochs": self.step_epochs,
            "unfreeze_per_step": self.unfreeze_per_step,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "class_weight_policy": self.class_weight_policy.value,
            "train_fraction": self.train_fraction,
            "weights": str(self.weights) if self.weights else None,
            "pretrain_epochs": self.pretrain_epochs,
            "seed": self.seed,
        }


@dataclass
class PretrainResult:
    network: Network
    source_accuracy: float
    source_spec: SyntheticSpec


def cmd_pretrain(target_spec: SyntheticSpec, model: DenseNetConfig, epochs: int, out_path=None,
                 seed: int = 0, learning_rate: float = 0.01, batch_size: int = 16) -> PretrainResult:
    """Train from scratch on the source task derived from ``target_spec``.

    Uses 80% of the source set for training and reports accuracy on the rest.
    The final-epoch weights are kept.
    """
    spec = source_task_spec(target_spec)
    source = generate_synthetic_dataset(spec)
    config = DenseNetConfig(**{**model.to_dict(), "num_classes": len(spec.counts),
                               "input_channels": 1, "input_size": (spec.image_size, spec.image_size)})
    network = build_densenet_lite(config, derive_seed(seed, 0))
    train, held_out = split_train_val(source, 0.8, derive_seed(seed, 0))
    schedule = SftSchedule(epochs, 1, 1, network.num_groups, FineTuneMode.FT_ALL)
    fit(network, train, held_out, TrainConfig(schedule, learning_rate, batch_size=batch_size,
                                              seed=derive_seed(seed, 0)))
    _, predicted = predict(network, held_out.images)
    acc = float(np.mean(predicted == held_out.labels))
    logger.info("pretrained on %d source samples, held-out accuracy %.4f", len(train), acc)
    if out_path is not None:
        save_weights(network, out_path)
    return PretrainResult(network, acc, spec)


def cmd_schedule_preview(epochs: int, step_epochs: int, unfreeze_per_step: int, num_groups: int,
                         mode="SFT") -> str:
    schedule = SftSchedule(epochs, step_epochs, unfreeze_per_step, num_groups, mode)
    lines = [f"mode={schedule.mode.value} epochs={epochs} step_epochs={step_epochs} "
             f"unfreeze_per_step={unfreeze_per_step} groups={num_groups} steps={schedule.step_count}"]
    lines += [str(p) for p in schedule_summary(schedule)]
    return "\n".join(lines)


@dataclass
class ModeResult:
    mode: FineTuneMode
    ids: list[str]
    labels: np.ndarray
    probabilities: np.ndarray
    predicted: np.ndarray
    folds: list[dict]
    histories: list[list]
    report: EvalReport | None = None


def _load_target(config: ExperimentConfig, image_size) -> Dataset:
    if config.synthetic is not None:
        return generate_synthetic_dataset(config.synthetic)
    return load_dataset(config.data_index, image_size=image_size)


def run_mode(mode: FineTuneMode, pretrained: Network, parts, config: ExperimentConfig,
             class_names: Sequence[str]) -> ModeResult:
    mode_index = MODE_ORDER.index(mode)
    ids, labels, probs, folds, histories = [], [], [], [], []
    for fold in range(2):
        test, pool = parts[fold], parts[1 - fold]
        train, val = split_train_val(pool, config.train_fraction, derive_seed(config.seed, 1, fold))
        net = replace_head(pretrained, len(class_names), derive_seed(config.seed, 2, fold))
        schedule = SftSchedule(config.epochs, config.step_epochs, config.unfreeze_per_step, net.num_groups, mode)
        train_config = TrainConfig(schedule, config.learning_rate, config.momentum, config.batch_size,
                                   derive_seed(config.seed, 3, fold, mode_index), config.class_weight_policy)
        checkpoint = fit(net, train, val, train_config)
        restore(net, checkpoint)
        p, _ = predict(net, test.images)
        ids += test.ids
        labels.append(test.labels)
        probs.append(p)
        histories.append(checkpoint.history)
        folds.append({
            "fold": fold,
            "test_size": len(test),
            "train_size": len(train),
            "val_size": len(val),
            "best_epoch": checkpoint.epoch,
            "best_validation_accuracy": checkpoint.validation_accuracy,
            "train_class_counts": train.class_counts().tolist(),
            "train_config": train_config.to_dict(),
        })
        logger.info("%s fold %d: best epoch %d, val acc %.4f", mode.value, fold, checkpoint.epoch,
                    checkpoint.validation_accuracy)
    probabilities = np.concatenate(probs)
    return ModeResult(mode, ids, np.concatenate(labels), probabilities, np.argmax(probabilities, axis=1),
                      folds, histories)


def _dump_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    tmp.replace(path)


def write_report_files(out_dir: Path, report: EvalReport, tag: str) -> None:
    _dump_json(out_dir / f"report_{tag}.json", report.to_dict())
    for name, curve in report.roc.items():
        _write_csv(out_dir / f"roc_{tag}_{name.lower()}.csv", ["threshold", "fpr", "tpr"],
                   zip([repr(float(t)) for t in curve.thresholds], curve.fpr.tolist(), curve.tpr.tolist()))
    _write_csv(out_dir / f"confusion_{tag}.csv", ["true\\predicted", *report.class_names],
               [[name, *row] for name, row in zip(report.class_names, report.confusion)])


def write_predictions(path: Path, result: ModeResult, class_names: Sequence[str]) -> None:
    _write_csv(path, ["id", "true_label", "predicted_label", *[f"p_{c}" for c in class_names]],
               [[i, int(t), int(p), *map(repr, row.tolist())]
                for i, t, p, row in zip(result.ids, result.labels, result.predicted, result.probabilities)])


def read_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray, list[str]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["id", "true_label", "predicted_label"]:
        raise ConfigurationError(f"{path}: not a predictions file")
    class_names = [c[2:] for c in rows[0][3:]]
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body])
    predicted = np.array([int(r[2]) for r in body])
    probs = np.array([[float(v) for v in r[3:]] for r in body])
    return ids, labels, predicted, probs, class_names


def cmd_evaluate(predictions_path, out_dir, mode: str = "evaluated") -> EvalReport:
    _, labels, predicted, probs, class_names = read_predictions(predictions_path)
    report = build_report(mode, probs, labels, predicted, class_names)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_files(out_dir, report, mode.lower())
    return report


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_experiment(config: ExperimentConfig) -> tuple[dict[str, EvalReport], dict]:
    """Run every requested mode through 2-fold CV and write all artifacts.

    Returns the reports keyed by mode name and the run manifest. A mode that
    fails is recorded in the manifest under ``errors`` and the others continue.
    """
    started = time.perf_counter()
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t = time.perf_counter()
    if config.weights is not None:
        pretrained = load_weights(config.weights)
        weights_path = Path(config.weights)
        pretrain_info = {"source": "file", "path": str(weights_path)}
        # index images are resized to whatever the weights were trained on
        dataset = _load_target(config, pretrained.config.input_size)
    else:
        dataset = _load_target(config, config.model.input_size)
        result = cmd_pretrain(config.synthetic, config.model, config.pretrain_epochs, out / "pretrained.sqw",
                              seed=config.seed, learning_rate=config.learning_rate, batch_size=config.batch_size)
        pretrained = result.network
        weights_path = out / "pretrained.sqw"
        pretrain_info = {"source": "inline", "source_task": result.source_spec.to_dict(),
                         "source_accuracy": result.source_accuracy, "epochs": config.pretrain_epochs}
    class_names = dataset.class_names
    if len(class_names) != 3:
        raise ConfigurationError(f"the three-class protocol needs 3 classes, dataset has {len(class_names)}")
    pretrain_info["sha256"] = _sha(weights_path)
    if tuple(pretrained.config.input_size) != dataset.image_shape[1:] or \
            pretrained.config.input_channels != dataset.image_shape[0]:
        raise ConfigurationError(f"pretrained network expects {pretrained.config.input_channels}x"
                                 f"{pretrained.config.input_size}, data is {dataset.image_shape}")
    timings["pretrain"] = time.perf_counter() - t

    parts = split_two_fold(dataset, config.seed)
    reports: dict[str, EvalReport] = {}
    mode_meta, errors = {}, {}
    num_groups = pretrained.num_groups
    for mode in config.modes:
        t = time.perf_counter()
        tag = mode.value.lower()
        schedule = SftSchedule(config.epochs, config.step_epochs, config.unfreeze_per_step, num_groups, mode)
        summary = [{"first_epoch": p.first_epoch, "last_epoch": p.last_epoch,
                    "trainable_groups": p.trainable_count} for p in schedule_summary(schedule)]
        try:
            res = run_mode(mode, pretrained, parts, config, class_names)
            report = build_report(mode.value, res.probabilities, res.labels, res.predicted, class_names, metadata={
                "schedule": schedule.to_dict(),
                "schedule_summary": summary,
                "class_weight_policy": config.class_weight_policy.value,
                "split": "stratified two-fold; stratified 70/30 train/validation; sample level",
                "model_selection": "best validation accuracy, earliest epoch on ties",
                "folds": res.folds,
            })
        except SeqtuneError as exc:
            logger.error("mode %s failed: %s", mode.value, exc)
            errors[mode.value] = f"{type(exc).__name__}: {exc}"
            continue
        reports[mode.value] = report
        write_report_files(out, report, tag)
        write_predictions(out / f"predictions_{tag}.csv", res, class_names)
        for fold, history in enumerate(res.histories):
            _write_csv(out / f"epochs_{tag}_{fold}.csv",
                       ["epoch", "trainable_groups", "train_loss", "validation_accuracy"],
                       [[h.epoch, h.trainable_groups, repr(h.train_loss), repr(h.validation_accuracy)]
                        for h in history])
        timings[mode.value] = time.perf_counter() - t
        mode_meta[mode.value] = {"schedule_summary": summary, "folds": res.folds}

    ordered = [reports[mode.value] for mode in MODE_ORDER if mode.value in reports]
    table = format_table(ordered)
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    timings["total"] = time.perf_counter() - started
    manifest = {
        "tool": "seqtune",
        "version": __version__,
        "config": config.to_dict(),
        "seed_derivation": "numpy SeedSequence: split=seed; pretrain=(seed,0); train/val=(seed,1,fold); "
                           "head=(seed,2,fold); training=(seed,3,fold,mode_index)",
        "mode_index": {mode.value: i for i, mode in enumerate(MODE_ORDER)},
        "dataset": {"size": len(dataset), "class_names": class_names,
                    "class_counts": dataset.class_counts().tolist(),
                    "fold_sizes": [len(p) for p in parts]},
        "pretrained": pretrain_info,
        "num_groups": num_groups,
        "modes": mode_meta,
        "errors": errors,
        "projections": [p.value for p in PROJECTION_ORDER],
        "timings_seconds": timings,
    }
    _dump_json(out / "manifest.json", manifest)
    return reports, manifest
