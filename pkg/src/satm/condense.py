"""Sharpness-aware trajectory matching: the outer loop that learns the synthetic set.

One outer step:

1. sample an expert segment ``(theta_t, theta_{t+M})`` and start the
   synthetic run at ``theta_t``;
2. add per-image Gaussian smoothing noise (variance ``gamma * ||phi_j||``);
3. pass 1: unroll ``N`` steps on the noisy images and take the truncated
   hypergradient over steps ``iota+1..N``;
4. ``eps = rho * g / ||g||`` from the pass-1 gradient, noise removed;
5. pass 2: restart from pass-1 state ``tau`` on ``phi + eps``, rerun
   steps ``tau+1..N`` and differentiate all of them;
6. ``phi -= outer_lr * d_phi``; ``alpha -= lr_lr * d_alpha`` (first-order
   rule), clamped at ``alpha_min``.

With ``rho = gamma = 0`` and ``iota = tau`` the update is plain (truncated)
trajectory matching.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import RealDataset, SyntheticDataset
from .errors import ContractError, DivergenceError, NumericError
from .hypergrad import (
    Hypergradient,
    InnerRunRecord,
    lr_first_order_grad,
    make_schedule,
    reuse_second_pass,
    rmd_hypergrad,
    truncated_hypergrad,
    unroll_inner,
)
from .rng import generator
from .trajectory import Segment, sample_from_pool

log = logging.getLogger(__name__)

__all__ = [
    "CondenseConfig",
    "SharpnessRecord",
    "StepOutcome",
    "smooth_perturb",
    "compute_epsilon",
    "satm_step",
    "satm_step_detailed",
    "naive_sam_step",
    "mtt_step",
    "condense",
    "init_synthetic",
    "write_sharpness_csv",
    "DEGENERATE_GRAD_NORM",
]

DEGENERATE_GRAD_NORM = 1e-12


@dataclass(frozen=True)
class CondenseConfig:
    inner_steps: int = 20
    expert_span: int = 2
    max_start: int = 2
    truncate_index: int = 0
    reuse_index: int | None = None  # defaults to truncate_index
    rho: float = 0.01
    gamma: float = 0.0
    outer_lr: float = 3.0
    lr_lr: float = 1e-5
    outer_iterations: int = 500
    synthetic_batch_size: int | None = None
    ipc: int = 1
    init_alpha: float = 0.01
    init_mode: str = "real_samples"
    alpha_min: float = 1e-6
    max_retries: int = 3
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.reuse_index is None:
            object.__setattr__(self, "reuse_index", self.truncate_index)
        N, iota, tau = self.inner_steps, self.truncate_index, self.reuse_index
        if N < 1:
            raise ContractError("inner_steps must be >= 1")
        if not 0 <= iota <= tau <= N:
            raise ContractError(f"need 0 <= iota <= tau <= N, got iota={iota}, tau={tau}, N={N}")
        if self.expert_span < 1 or self.max_start < 0:
            raise ContractError("expert_span must be >= 1 and max_start >= 0")
        if self.rho < 0 or self.gamma < 0 or self.lr_lr < 0:
            raise ContractError("rho, gamma and lr_lr must be >= 0")
        if not self.outer_lr >= 0:
            raise ContractError("outer_lr must be >= 0")
        if self.ipc < 1 or self.outer_iterations < 0:
            raise ContractError("ipc must be >= 1 and outer_iterations >= 0")
        if self.init_mode not in ("real_samples", "gaussian_noise"):
            raise ContractError(f"unknown init_mode {self.init_mode!r}")
        if not self.init_alpha > 0 or not self.alpha_min > 0:
            raise ContractError("init_alpha and alpha_min must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CondenseConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown condense options: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def mtt_equivalent(self) -> bool:
        return self.rho == 0 and self.gamma == 0 and self.truncate_index == 0 and self.reuse_index == 0

    def run_label(self) -> str:
        return "mtt-equivalent" if self.mtt_equivalent else "satm"


@dataclass(frozen=True)
class SharpnessRecord:
    iteration: int
    loss_phi: float
    loss_phi_eps: float
    sharpness: float
    hypergrad_norm: float
    epsilon_norm: float
    alpha: float
    degenerate: bool = False

    CSV_COLUMNS = ("iter", "loss_phi", "loss_phi_eps", "sharpness", "hypergrad_norm", "epsilon_norm", "alpha")

    def csv_row(self):
        return [self.iteration] + [repr(float(x)) for x in (
            self.loss_phi, self.loss_phi_eps, self.sharpness, self.hypergrad_norm,
            self.epsilon_norm, self.alpha)]


@dataclass
class StepOutcome:
    dataset: SyntheticDataset
    record: SharpnessRecord
    segment: Segment
    noise: np.ndarray
    epsilon: np.ndarray
    pass1: Hypergradient
    pass2: Hypergradient
    pass1_record: InnerRunRecord
    pass2_record: InnerRunRecord
    applied_d_phi: np.ndarray
    applied_d_alpha: float
    pass2_images: np.ndarray = field(repr=False, default=None)


def smooth_perturb(dataset: SyntheticDataset, gamma: float, rng: np.random.Generator):
    """Return ``(noisy dataset, noise)``; image ``j`` gets N(0, gamma * ||phi_j|| I)."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    if gamma == 0:
        noise = np.zeros_like(dataset.images)
        return dataset, noise
    norms = np.linalg.norm(dataset.images, axis=1)
    std = np.sqrt(gamma * norms)
    noise = rng.normal(size=dataset.images.shape) * std[:, None]
    return dataset.with_images(dataset.images + noise), noise


def compute_epsilon(d_phi, rho: float) -> np.ndarray:
    """``rho * d_phi / ||d_phi||_2``; zero when the gradient is degenerate or ``rho == 0``."""
    if rho < 0:
        raise ContractError("rho must be >= 0")
    d_phi = np.asarray(d_phi, dtype=np.float64)
    norm = float(np.linalg.norm(d_phi))
    if norm <= DEGENERATE_GRAD_NORM:
        log.info("degenerate pass-1 hypergradient (norm %.3e); epsilon set to zero", norm)
        return np.zeros_like(d_phi)
    if rho == 0:
        return np.zeros_like(d_phi)
    return (rho / norm) * d_phi


def _schedule(config, dataset, rng):
    if config.synthetic_batch_size is None:
        return make_schedule(dataset.size, config.inner_steps)
    return make_schedule(dataset.size, config.inner_steps, config.synthetic_batch_size,
                         seed=int(rng.integers(2**63)))


def _apply_update(dataset, config, d_phi, d_alpha):
    images = dataset.images - config.outer_lr * d_phi
    alpha = max(dataset.inner_lr - config.lr_lr * d_alpha, config.alpha_min)
    if not np.all(np.isfinite(images)):
        raise NumericError("outer update produced non-finite images")
    return replace(dataset, images=images, inner_lr=alpha)


def satm_step_detailed(dataset: SyntheticDataset, pool, config: CondenseConfig,
                       rng: np.random.Generator, iteration: int = 0) -> StepOutcome:
    _, segment = sample_from_pool(pool, config.expert_span, config.max_start, rng)
    spec = pool[0].spec
    schedule = _schedule(config, dataset, rng)
    N, iota, tau = config.inner_steps, config.truncate_index, config.reuse_index

    noisy, noise = smooth_perturb(dataset, config.gamma, rng)
    first = unroll_inner(spec, segment.theta_start, noisy, N, schedule, record_from=iota)
    hg1 = truncated_hypergrad(first, noisy, segment)
    eps = compute_epsilon(hg1.d_phi, config.rho)
    degenerate = hg1.grad_norm <= DEGENERATE_GRAD_NORM

    # noise removed: pass 2 sees the clean images plus the ascent direction only
    shifted = dataset.with_images(dataset.images + eps)
    hg2, second = reuse_second_pass(first, shifted, segment, tau)
    d_alpha = lr_first_order_grad(second, segment)
    updated = _apply_update(dataset, config, hg2.d_phi, d_alpha)
    record = SharpnessRecord(
        iteration,
        hg1.outer_loss,
        hg2.outer_loss,
        hg2.outer_loss - hg1.outer_loss,
        hg2.grad_norm,
        float(np.linalg.norm(eps)),
        updated.inner_lr,
        degenerate,
    )
    return StepOutcome(updated, record, segment, noise, eps, hg1, hg2, first, second,
                       hg2.d_phi, d_alpha, shifted.images)


def satm_step(dataset: SyntheticDataset, pool, config: CondenseConfig, rng: np.random.Generator,
              iteration: int = 0):
    """One outer iteration; returns ``(updated dataset, SharpnessRecord)``."""
    out = satm_step_detailed(dataset, pool, config, rng, iteration)
    return out.dataset, out.record


def naive_sam_step(dataset, pool, config, rng, iteration=0):
    """Reference SAM outer step: two complete unrolls, both differentiated end to end."""
    _, segment = sample_from_pool(pool, config.expert_span, config.max_start, rng)
    spec = pool[0].spec
    schedule = _schedule(config, dataset, rng)
    N = config.inner_steps
    noisy, _ = smooth_perturb(dataset, config.gamma, rng)
    first = unroll_inner(spec, segment.theta_start, noisy, N, schedule, record_from=0)
    hg1 = rmd_hypergrad(first, noisy, segment)
    eps = compute_epsilon(hg1.d_phi, config.rho)
    shifted = dataset.with_images(dataset.images + eps)
    second = unroll_inner(spec, segment.theta_start, shifted, N, schedule, record_from=0)
    hg2 = rmd_hypergrad(second, shifted, segment)
    updated = _apply_update(dataset, config, hg2.d_phi, lr_first_order_grad(second, segment))
    record = SharpnessRecord(iteration, hg1.outer_loss, hg2.outer_loss, hg2.outer_loss - hg1.outer_loss,
                             hg2.grad_norm, float(np.linalg.norm(eps)), updated.inner_lr)
    return updated, record


def mtt_step(dataset, pool, config, rng, iteration=0):
    """Plain trajectory matching: a single full unroll and reverse pass."""
    _, segment = sample_from_pool(pool, config.expert_span, config.max_start, rng)
    spec = pool[0].spec
    schedule = _schedule(config, dataset, rng)
    record = unroll_inner(spec, segment.theta_start, dataset, config.inner_steps, schedule, record_from=0)
    hg = rmd_hypergrad(record, dataset, segment)
    updated = _apply_update(dataset, config, hg.d_phi, lr_first_order_grad(record, segment))
    rec = SharpnessRecord(iteration, hg.outer_loss, hg.outer_loss, 0.0, hg.grad_norm, 0.0, updated.inner_lr)
    return updated, rec


def condense(config: CondenseConfig, pool, init_dataset: SyntheticDataset,
             rng: np.random.Generator | None = None, callback=None, step_fn=satm_step):
    """Run ``config.outer_iterations`` outer steps; returns ``(dataset, records)``.

    A step that diverges leaves the dataset unchanged; ``max_retries``
    consecutive failures re-raise the last error. ``callback(iteration,
    dataset, record)`` is invoked after each successful step.
    """
    if not pool:
        raise ContractError("trajectory pool is empty")
    need = config.max_start + config.expert_span
    short = [k for k, traj in enumerate(pool) if traj.T < need]
    if short:
        raise ContractError(f"trajectories {short} are shorter than max_start + expert_span = {need}")
    rng = generator(config.seed, "condense") if rng is None else rng
    dataset = init_dataset
    records = []
    failures = 0
    for it in range(config.outer_iterations):
        try:
            dataset, rec = step_fn(dataset, pool, config, rng, it)
        except (DivergenceError, NumericError) as exc:
            failures += 1
            log.warning("outer step %d aborted: %s", it, exc)
            if failures >= config.max_retries:
                raise
            continue
        failures = 0
        records.append(rec)
        if callback is not None:
            callback(it, dataset, rec)
    provenance = config.digest()
    return replace(dataset, provenance=provenance, label=config.run_label()), records


def init_synthetic(real: RealDataset, ipc: int, mode: str = "real_samples",
                   rng: np.random.Generator | None = None, init_alpha: float = 0.01,
                   classes=None) -> SyntheticDataset:
    """Initial synthetic set: ``ipc`` real samples per class (without replacement) or N(0, I) noise."""
    rng = np.random.default_rng(0) if rng is None else rng
    classes = real.classes_present() if classes is None else sorted(int(c) for c in classes)
    counts = real.class_counts()
    if ipc < 1:
        raise ContractError("ipc must be >= 1")
    lacking = [c for c in classes if counts[c] < ipc]
    if lacking:
        raise ContractError(f"classes {lacking} have fewer than ipc={ipc} samples")
    if mode == "real_samples":
        rows = []
        for c in classes:
            pool = np.flatnonzero(real.labels == c)
            rows.append(real.features[rng.choice(pool, size=ipc, replace=False)])
        images = np.concatenate(rows)
    elif mode == "gaussian_noise":
        images = rng.normal(size=(len(classes) * ipc, real.d))
    else:
        raise ContractError(f"unknown init mode {mode!r}")
    return SyntheticDataset(images, tuple(classes), ipc, init_alpha, provenance=f"init:{mode}")


def write_sharpness_csv(records, path_or_file) -> None:
    def _write(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(SharpnessRecord.CSV_COLUMNS))
        for rec in records:
            writer.writerow(rec.csv_row())

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write(fh)
