"""Expert trajectories: training on real data, storage, and segment sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .data import RealDataset
from .diffmodels import LabeledBatch, ModelSpec, ce_grad, ce_loss, init_params
from .errors import ContractError, DegenerateTrajectoryError, DivergenceError, FormatError
from .rng import generator

__all__ = [
    "ExpertTrajectory",
    "Segment",
    "DELTA_MIN",
    "train_expert",
    "save_trajectory",
    "load_trajectory",
    "make_segment",
    "sample_segment",
    "sample_from_pool",
]

MAGIC = b"SATMTRJ1"
FORMAT_VERSION = 1
DELTA_MIN = 1e-12


@dataclass(frozen=True)
class ExpertTrajectory:
    spec: ModelSpec
    checkpoints: np.ndarray  # (T + 1, P); row 0 is the initialisation
    dataset_id: str = ""
    seed: int = 0
    train_config: dict = field(default_factory=dict)
    epochs_per_checkpoint: int = 1
    train_losses: tuple = ()

    def __post_init__(self):
        ck = np.array(self.checkpoints, dtype=np.float64)
        if ck.ndim != 2 or ck.shape[0] < 1 or ck.shape[1] != self.spec.param_count:
            raise ContractError(
                f"checkpoints of shape {ck.shape} do not match {self.spec.param_count} parameters"
            )
        ck.setflags(write=False)
        object.__setattr__(self, "checkpoints", ck)
        object.__setattr__(self, "train_losses", tuple(float(x) for x in self.train_losses))

    @property
    def T(self) -> int:
        return self.checkpoints.shape[0] - 1

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "train_config": self.train_config,
            "T": self.T,
            "epochs_per_checkpoint": self.epochs_per_checkpoint,
            "train_losses": list(self.train_losses),
        }

    def __eq__(self, other):
        if not isinstance(other, ExpertTrajectory):
            return NotImplemented
        return (self.header() == other.header()
                and self.checkpoints.tobytes() == other.checkpoints.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class Segment:
    t: int
    M: int
    theta_start: np.ndarray
    theta_target: np.ndarray
    delta: float


def train_expert(spec: ModelSpec, dataset: RealDataset, epochs: int, step_size: float,
                 batch_size: int, seed: int) -> ExpertTrajectory:
    """Mini-batch SGD with a seeded shuffle; one checkpoint per epoch plus the init."""
    if epochs < 1:
        raise ContractError(f"epochs must be >= 1, got {epochs}")
    if dataset.n < 1:
        raise ContractError("cannot train an expert on an empty dataset")
    if batch_size < 1 or step_size <= 0:
        raise ContractError("batch_size must be >= 1 and step_size > 0")
    full = dataset.as_batch()
    theta = init_params(spec, seed)
    checkpoints = [theta.copy()]
    losses = [ce_loss(spec, theta, full)]
    for epoch in range(1, epochs + 1):
        order = generator(seed, "expert_shuffle", epoch).permutation(dataset.n)
        # overflow shows up as non-finite values, checked below
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, dataset.n, batch_size):
                idx = order[start:start + batch_size]
                batch = LabeledBatch(dataset.features[idx], dataset.labels[idx])
                theta = theta - step_size * ce_grad(spec, theta, batch)
                if not np.all(np.isfinite(theta)):
                    raise DivergenceError(f"expert training diverged in epoch {epoch}", where=epoch)
            try:
                loss = ce_loss(spec, theta, full)
            except ArithmeticError:
                loss = np.inf
        if not np.isfinite(loss):
            raise DivergenceError(f"expert training loss is not finite after epoch {epoch}", where=epoch)
        checkpoints.append(theta.copy())
        losses.append(loss)
    config = {"step_size": float(step_size), "batch_size": int(batch_size), "epochs": int(epochs)}
    return ExpertTrajectory(spec, np.stack(checkpoints), dataset.id, int(seed), config, 1, tuple(losses))


def save_trajectory(traj: ExpertTrajectory, path) -> None:
    path = Path(path)
    header = traj.header()
    path.write_bytes(_binio.encode_file(MAGIC, header, traj.checkpoints))
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_trajectory(path) -> ExpertTrajectory:
    what = str(path)
    reader = _binio.Reader(Path(path).read_bytes(), what)
    reader.magic(MAGIC)
    header = reader.header(FORMAT_VERSION)
    try:
        spec = ModelSpec.from_dict(_binio.header_field(header, "spec", what))
        T = int(_binio.header_field(header, "T", what))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{what}: bad header ({exc})") from None
    if T < 0:
        raise FormatError(f"{what}: negative trajectory length")
    rows = [reader.array(spec.param_count) for _ in range(T + 1)]
    reader.finish()
    return ExpertTrajectory(
        spec,
        np.stack(rows),
        header.get("dataset_id", ""),
        int(header.get("seed", 0)),
        header.get("train_config", {}),
        int(header.get("epochs_per_checkpoint", 1)),
        tuple(header.get("train_losses", ())),
    )


def make_segment(traj: ExpertTrajectory, t: int, M: int) -> Segment:
    if M < 1 or t < 0 or t + M > traj.T:
        raise ContractError(f"segment t={t}, M={M} does not fit a trajectory of length {traj.T}")
    start = traj.checkpoints[t]
    target = traj.checkpoints[t + M]
    diff = start - target
    return Segment(t, M, start, target, float(diff @ diff))


def sample_segment(traj: ExpertTrajectory, M: int, max_start: int, rng: np.random.Generator) -> Segment:
    """Draw ``t`` uniformly from ``0..max_start``; degenerate starts are excluded and redrawn."""
    if M < 1:
        raise ContractError("expert span M must be >= 1")
    if max_start < 0 or max_start + M > traj.T:
        raise ContractError(
            f"max_start={max_start} with M={M} needs a trajectory of length >= {max_start + M}, got {traj.T}"
        )
    candidates = list(range(max_start + 1))
    while candidates:
        t = candidates[int(rng.integers(len(candidates)))]
        seg = make_segment(traj, t, M)
        if seg.delta > DELTA_MIN:
            return seg
        candidates.remove(t)
    raise DegenerateTrajectoryError(
        f"degenerate trajectory: every segment with t <= {max_start}, M={M} has delta <= {DELTA_MIN}"
    )


def sample_from_pool(pool, M: int, max_start: int, rng: np.random.Generator):
    """Pick a trajectory uniformly, then a segment from it. Returns (index, Segment)."""
    if not pool:
        raise ContractError("trajectory pool is empty")
    k = int(rng.integers(len(pool)))
    return k, sample_segment(pool[k], M, max_start, rng)
