"""Quality of a synthetic set: train on it from scratch, test on held-out real data."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import RealDataset, SyntheticDataset
from .diffmodels import LabeledBatch, ModelSpec, accuracy, ce_grad, init_params
from .errors import ContractError, DivergenceError
from .rng import derive_seed

__all__ = [
    "EvalReport",
    "ContinualProtocol",
    "train_on_synthetic",
    "train_eval",
    "cross_arch_eval",
    "continual_eval",
    "write_reports_csv",
]

DEFAULT_EPOCHS = 300


@dataclass
class EvalReport:
    mean_accuracy: float
    std_accuracy: float
    accuracies: list
    seeds: list
    epochs: int
    step_size: float
    spec: dict
    synthetic_id: str = ""
    test_id: str = ""
    label: str = ""

    CSV_COLUMNS = ("label", "arch", "synthetic_id", "test_id", "epochs", "step_size",
                   "repeats", "acc_mean", "acc_std")

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> dict:
        return {
            "label": self.label,
            "arch": ModelSpec.from_dict(self.spec).label(),
            "synthetic_id": self.synthetic_id,
            "test_id": self.test_id,
            "epochs": self.epochs,
            "step_size": repr(self.step_size),
            "repeats": len(self.accuracies),
            "acc_mean": repr(self.mean_accuracy),
            "acc_std": repr(self.std_accuracy),
        }


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def train_on_synthetic(spec: ModelSpec, features, labels, epochs: int, step_size: float, seed: int):
    """Full-batch gradient descent from ``init_params(spec, seed)``."""
    batch = LabeledBatch(np.asarray(features, dtype=np.float64), np.asarray(labels))
    theta = init_params(spec, seed)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            theta = theta - step_size * ce_grad(spec, theta, batch)
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"evaluation training diverged at epoch {epoch + 1}", where=epoch + 1)
    return theta


def _check_dims(spec, synthetic, test):
    if synthetic.d != spec.d or test.d != spec.d:
        raise ContractError(
            f"dimension mismatch: model d={spec.d}, synthetic d={synthetic.d}, test d={test.d}"
        )
    if max(synthetic.classes) >= spec.C or test.num_classes > spec.C:
        raise ContractError("model has fewer outputs than the datasets have classes")


def train_eval(spec: ModelSpec, synthetic: SyntheticDataset, test: RealDataset,
               epochs: int = DEFAULT_EPOCHS, repeats: int = 1, seed: int = 0,
               step_size: float | None = None, seeds=None) -> EvalReport:
    """Accuracy on ``test`` of ``repeats`` fresh models trained on ``synthetic``.

    The step size defaults to the synthetic set's learned ``inner_lr``.
    ``seeds`` overrides the per-repeat initialisation seeds.
    """
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    _check_dims(spec, synthetic, test)
    lr = synthetic.inner_lr if step_size is None else float(step_size)
    if seeds is None:
        seeds = [derive_seed(seed, "eval_init", r) for r in range(repeats)]
    elif len(seeds) != repeats:
        raise ContractError("need one seed per repeat")
    accs = []
    for s in seeds:
        theta = train_on_synthetic(spec, synthetic.images, synthetic.labels, epochs, lr, s)
        accs.append(accuracy(spec, theta, test.features, test.labels))
    mean, std = _mean_std(accs)
    return EvalReport(mean, std, accs, [int(s) for s in seeds], int(epochs), lr, spec.to_dict(),
                      synthetic.provenance, test.id, synthetic.label)


def cross_arch_eval(spec_list, synthetic: SyntheticDataset, test: RealDataset,
                    epochs: int = DEFAULT_EPOCHS, repeats: int = 1, seed: int = 0,
                    step_size: float | None = None) -> list:
    return [train_eval(spec, synthetic, test, epochs, repeats, seed, step_size) for spec in spec_list]


@dataclass
class ContinualProtocol:
    task_splits: list
    ipc: int
    matrix: list  # matrix[k][j]: mean accuracy on task j's classes after stage k
    stage_accuracy: list  # per stage, per repeat accuracy on all classes seen so far
    seeds: list
    root_seed: int = 0
    label: str = ""
    acc_mean: list = field(default_factory=list)
    acc_std: list = field(default_factory=list)

    CSV_COLUMNS = ("stage", "classes_seen", "acc_mean", "acc_std", "seed")

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self):
        seen = []
        for k, split in enumerate(self.task_splits):
            seen.extend(split)
            yield {
                "stage": k + 1,
                "classes_seen": len(seen),
                "acc_mean": repr(self.acc_mean[k]),
                "acc_std": repr(self.acc_std[k]),
                "seed": self.root_seed,
            }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.csv_rows())

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _validate_splits(task_splits, memories, test):
    flat = [int(c) for split in task_splits for c in split]
    if len(flat) != len(set(flat)):
        raise ContractError("task class partitions overlap")
    present = set(test.classes_present())
    if not present <= set(flat):
        raise ContractError(f"task splits miss test classes {sorted(present - set(flat))}")
    if len(memories) != len(task_splits):
        raise ContractError("need exactly one memory per task")
    for k, (split, mem) in enumerate(zip(task_splits, memories)):
        if set(mem.classes) != set(int(c) for c in split):
            raise ContractError(f"memory {k} covers classes {mem.classes}, task has {list(split)}")


def continual_eval(task_splits, memories, test: RealDataset, spec: ModelSpec,
                   epochs: int = DEFAULT_EPOCHS, seed: int = 0, repeats: int = 1,
                   step_size: float | None = None, label: str = "") -> ContinualProtocol:
    """Class-incremental replay: at stage ``k`` a fresh model learns memories ``1..k``.

    Each stage is evaluated on the test samples of every class seen so far,
    overall and per task. The step size defaults to the mean learned
    ``inner_lr`` of the memories in use.
    """
    task_splits = [[int(c) for c in split] for split in task_splits]
    _validate_splits(task_splits, memories, test)
    seeds = [derive_seed(seed, "continual_init", r) for r in range(repeats)]
    matrix, stage_acc = [], []
    for k in range(len(task_splits)):
        used = memories[: k + 1]
        X = np.concatenate([m.images for m in used])
        y = np.concatenate([m.labels for m in used])
        if X.shape[1] != spec.d:
            raise ContractError(f"memory dimension {X.shape[1]} does not match model d={spec.d}")
        lr = float(np.mean([m.inner_lr for m in used])) if step_size is None else float(step_size)
        seen = [c for split in task_splits[: k + 1] for c in split]
        seen_mask = np.isin(test.labels, seen)
        per_task = np.zeros((repeats, k + 1))
        overall = []
        for r, s in enumerate(seeds):
            theta = train_on_synthetic(spec, X, y, epochs, lr, s)
            overall.append(accuracy(spec, theta, test.features[seen_mask], test.labels[seen_mask]))
            for j, split in enumerate(task_splits[: k + 1]):
                mask = np.isin(test.labels, split)
                per_task[r, j] = accuracy(spec, theta, test.features[mask], test.labels[mask])
        matrix.append([float(v) for v in per_task.mean(axis=0)])
        stage_acc.append(overall)
    stats = [_mean_std(row) for row in stage_acc]
    ipc = memories[0].ipc if memories else 0
    return ContinualProtocol(task_splits, ipc, matrix, stage_acc, [int(s) for s in seeds], int(seed), label,
                             [m for m, _ in stats], [s for _, s in stats])


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EvalReport.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.csv_row())
