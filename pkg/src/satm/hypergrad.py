"""Unrolled inner loops and hypergradient estimators.

The inner loop is plain gradient descent on the synthetic set,
``theta_i = theta_{i-1} - alpha * grad L_CE(theta_{i-1}, batch_i)`` for
``i = 1..N``. Step ``i`` reads state ``i - 1`` and the schedule entry
``schedule.steps[i - 1]``.

Reverse accumulation for the trajectory-matching loss walks the steps
backwards with the adjoint ``a`` (initialised to ``dL/dtheta_N``)::

    d_phi[batch_i]  += -alpha * mixed_vp(theta_{i-1}, batch_i, a)
    d_alpha         += -a . grad(theta_{i-1}, batch_i)
    a               <- a - alpha * hvp(theta_{i-1}, batch_i, a)

Stopping after step ``iota + 1`` gives the truncated estimator; ``iota = 0``
is full reverse mode. A record only keeps ``theta_0`` and the states from
``record_from`` on, so truncation at ``iota`` needs ``record_from <= iota``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticDataset
from .diffmodels import LabeledBatch, ModelSpec, ce_grad, second_order_products
from .errors import ContractError, DivergenceError
from .rng import generator
from .trajectory import Segment

__all__ = [
    "BatchSchedule",
    "InnerRunRecord",
    "Hypergradient",
    "DiagnosticsReport",
    "make_schedule",
    "unroll_inner",
    "outer_loss",
    "outer_loss_grad",
    "rmd_hypergrad",
    "truncated_hypergrad",
    "reuse_second_pass",
    "lr_first_order_grad",
    "lr_exact_grad",
    "prop1_error_sweep",
    "thm1_divergence_probe",
]


@dataclass(frozen=True)
class BatchSchedule:
    steps: tuple  # one index array per inner step
    seed: int = 0
    batch_size: int | None = None  # None means full batch

    @property
    def N(self) -> int:
        return len(self.steps)


def make_schedule(dataset_size: int, N: int, batch_size: int | None = None, seed: int = 0) -> BatchSchedule:
    """Per-step sample indices; ``batch_size=None`` (or >= size) uses every sample each step."""
    if N < 1:
        raise ContractError("N must be >= 1")
    if batch_size is None or batch_size >= dataset_size:
        full = np.arange(dataset_size)
        full.setflags(write=False)
        return BatchSchedule(tuple(full for _ in range(N)), seed, None)
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    rng = generator(seed, "inner_schedule", dataset_size, batch_size)
    steps = []
    for _ in range(N):
        idx = np.sort(rng.choice(dataset_size, size=batch_size, replace=False))
        idx.setflags(write=False)
        steps.append(idx)
    return BatchSchedule(tuple(steps), seed, batch_size)


@dataclass(frozen=True)
class InnerRunRecord:
    spec: ModelSpec
    alpha: float
    schedule: BatchSchedule
    record_from: int
    theta_init: np.ndarray
    tape: np.ndarray  # states record_from..N, shape (N - record_from + 1, P)
    tape_grads: np.ndarray  # step gradients for steps record_from+1..N
    grad_sum_prefix: np.ndarray  # sum of step gradients for steps 1..record_from
    per_step_grad_norms: np.ndarray  # length N

    @property
    def N(self) -> int:
        return self.schedule.N

    @property
    def theta_N(self) -> np.ndarray:
        return self.tape[-1]

    @property
    def retained_state_count(self) -> int:
        """theta_0 plus every taped state (theta_0 counted twice when record_from == 0)."""
        return 1 + self.tape.shape[0]

    def state(self, i: int) -> np.ndarray:
        if i == 0:
            return self.theta_init
        if self.record_from <= i <= self.N:
            return self.tape[i - self.record_from]
        raise ContractError(f"state {i} is not retained (tape starts at {self.record_from})")

    def step_grad(self, i: int) -> np.ndarray:
        """Gradient used by step ``i`` (evaluated at state ``i - 1``)."""
        if self.record_from < i <= self.N:
            return self.tape_grads[i - self.record_from - 1]
        raise ContractError(f"gradient of step {i} is not retained")

    def grad_sum_through(self, step: int) -> np.ndarray:
        """Sum of step gradients for steps ``1..step`` (needs ``step >= record_from``)."""
        if step < self.record_from or step > self.N:
            raise ContractError(f"cannot form gradient sum through step {step}")
        return self.grad_sum_prefix + self.tape_grads[: step - self.record_from].sum(axis=0)

    @property
    def grad_sum(self) -> np.ndarray:
        return self.grad_sum_through(self.N)


@dataclass(frozen=True)
class Hypergradient:
    d_phi: np.ndarray
    d_alpha: float
    outer_loss: float
    grad_norm: float
    steps_differentiated: int = 0


@dataclass
class DiagnosticsReport:
    truncation_errors: list = field(default_factory=list)
    divergence_probe: list = field(default_factory=list)
    sigma_hat: float = 0.0
    warnings: list = field(default_factory=list)

    COLUMNS = ("iota", "err_l2", "tau", "div_l2", "bound", "alpha", "rho", "seed")

    def rows(self):
        for row in self.truncation_errors:
            yield {k: row.get(k, "") for k in self.COLUMNS}
        for row in self.divergence_probe:
            yield {k: row.get(k, "") for k in self.COLUMNS}

    def to_csv(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._write(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as fh:
                self._write(fh)

    def _write(self, fh):
        writer = csv.DictWriter(fh, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def extend(self, other: "DiagnosticsReport") -> None:
        self.truncation_errors.extend(other.truncation_errors)
        self.divergence_probe.extend(other.divergence_probe)
        self.sigma_hat = max(self.sigma_hat, other.sigma_hat)
        self.warnings.extend(other.warnings)


def _run_steps(spec, images, labels, schedule, alpha, start_state, start_step, record_from):
    """Advance from ``start_state`` (state index ``start_step``) to state N."""
    N = schedule.N
    P = spec.param_count
    theta = np.array(start_state, dtype=np.float64)
    prefix = np.zeros(P)
    tape = [theta.copy()] if start_step >= record_from else []
    grads = []
    norms = []
    for i in range(start_step + 1, N + 1):
        idx = schedule.steps[i - 1]
        g = ce_grad(spec, theta, LabeledBatch(images[idx], labels[idx]))
        if i <= record_from:
            prefix += g
        else:
            grads.append(g)
        norms.append(float(np.linalg.norm(g)))
        with np.errstate(over="ignore", invalid="ignore"):
            theta = theta - alpha * g
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"inner loop produced non-finite state at step {i}", where=i)
        if i >= record_from:
            tape.append(theta.copy())
    tape = np.stack(tape)
    grads = np.stack(grads) if grads else np.zeros((0, P))
    for arr in (tape, grads):
        arr.setflags(write=False)
    return tape, grads, prefix, np.asarray(norms)


def _check_dataset(spec, dataset):
    if dataset.d != spec.d:
        raise ContractError(f"synthetic images have d={dataset.d}, model expects {spec.d}")


def unroll_inner(spec: ModelSpec, theta_init, dataset: SyntheticDataset, N: int,
                 schedule: BatchSchedule, record_from: int, alpha: float | None = None) -> InnerRunRecord:
    """Run ``N`` gradient steps, keeping ``theta_0`` and states ``record_from..N``."""
    alpha = dataset.inner_lr if alpha is None else float(alpha)
    if N < 1 or schedule.N != N:
        raise ContractError(f"need N >= 1 matching the schedule length ({schedule.N}), got {N}")
    if not 0 <= record_from <= N:
        raise ContractError(f"record_from must be in [0, {N}], got {record_from}")
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    _check_dataset(spec, dataset)
    theta_init = np.array(theta_init, dtype=np.float64)
    if theta_init.shape != (spec.param_count,):
        raise ContractError(f"theta_init has shape {theta_init.shape}, expected ({spec.param_count},)")
    theta_init.setflags(write=False)
    tape, grads, prefix, norms = _run_steps(
        spec, dataset.images, dataset.labels, schedule, alpha, theta_init, 0, record_from
    )
    return InnerRunRecord(spec, alpha, schedule, record_from, theta_init, tape, grads, prefix, norms)


def outer_loss_grad(theta_N, segment: Segment) -> np.ndarray:
    if not segment.delta > 0:
        raise ContractError(f"segment delta must be positive, got {segment.delta}")
    return 2.0 * (np.asarray(theta_N) - segment.theta_target) / segment.delta


def outer_loss(theta_N, segment: Segment) -> float:
    """Squared distance to the expert target, normalised by the segment's delta."""
    if not segment.delta > 0:
        raise ContractError(f"segment delta must be positive, got {segment.delta}")
    theta_N = np.asarray(theta_N, dtype=np.float64)
    if theta_N.shape != np.shape(segment.theta_target):
        raise ContractError("theta_N and segment target differ in shape")
    diff = theta_N - segment.theta_target
    return float(diff @ diff) / segment.delta


def truncated_hypergrad(record: InnerRunRecord, dataset: SyntheticDataset, segment: Segment,
                        iota: int | None = None) -> Hypergradient:
    """Differentiate through steps ``iota+1..N`` only (defaults to ``record.record_from``)."""
    iota = record.record_from if iota is None else int(iota)
    N = record.N
    if iota > N or iota < 0:
        raise ContractError(f"truncation index {iota} outside [0, {N}]")
    if iota < record.record_from:
        raise ContractError(f"truncation index {iota} precedes the tape start {record.record_from}")
    _check_dataset(record.spec, dataset)
    spec, alpha = record.spec, record.alpha
    images, labels = dataset.images, dataset.labels
    theta_N = record.theta_N
    adj = outer_loss_grad(theta_N, segment)
    d_phi = np.zeros_like(images)
    d_alpha = 0.0
    for i in range(N, iota, -1):
        idx = record.schedule.steps[i - 1]
        prev = record.state(i - 1)
        d_alpha -= float(adj @ record.step_grad(i))
        hvp, mixed = second_order_products(spec, prev, LabeledBatch(images[idx], labels[idx]), adj)
        np.add.at(d_phi, idx, -alpha * mixed)
        adj = adj - alpha * hvp
    return Hypergradient(d_phi, d_alpha, outer_loss(theta_N, segment),
                         float(np.linalg.norm(d_phi)), N - iota)


def rmd_hypergrad(record: InnerRunRecord, dataset: SyntheticDataset, segment: Segment) -> Hypergradient:
    """Full reverse-mode hypergradient; ``d_alpha`` here is the exact step-size gradient."""
    if record.record_from != 0:
        raise ContractError("full reverse mode needs a complete tape (record_from == 0)")
    return truncated_hypergrad(record, dataset, segment, iota=0)


def reuse_second_pass(first_record: InnerRunRecord, dataset_perturbed: SyntheticDataset,
                      segment: Segment, tau: int):
    """Restart from the first pass's state ``tau`` on the perturbed set and differentiate the rerun."""
    N = first_record.N
    if not first_record.record_from <= tau <= N:
        raise ContractError(
            f"state {tau} is not retained by the first pass (tape covers {first_record.record_from}..{N})"
        )
    _check_dataset(first_record.spec, dataset_perturbed)
    tape, grads, _, norms = _run_steps(
        first_record.spec, dataset_perturbed.images, dataset_perturbed.labels,
        first_record.schedule, first_record.alpha, first_record.state(tau), tau, tau,
    )
    record = InnerRunRecord(
        first_record.spec,
        first_record.alpha,
        first_record.schedule,
        tau,
        first_record.theta_init,
        tape,
        grads,
        first_record.grad_sum_through(tau),
        np.concatenate([first_record.per_step_grad_norms[:tau], norms]),
    )
    return truncated_hypergrad(record, dataset_perturbed, segment, iota=tau), record


def lr_first_order_grad(record: InnerRunRecord, segment: Segment) -> float:
    """Step-size gradient treating every step gradient as constant in alpha."""
    return -float(outer_loss_grad(record.theta_N, segment) @ record.grad_sum)


def lr_exact_grad(record: InnerRunRecord, dataset: SyntheticDataset, segment: Segment):
    """Exact ``dL/dalpha`` by forward-mode tangent propagation.

    Returns ``(d_alpha, tangent, first_order_direction)`` where ``tangent`` is
    ``d theta_N / d alpha`` and ``first_order_direction`` is ``-sum_i grad_i``,
    the approximation the first-order rule puts in its place.
    """
    if record.record_from != 0:
        raise ContractError("exact step-size gradient needs a complete tape")
    spec, alpha = record.spec, record.alpha
    tangent = np.zeros(spec.param_count)
    for i in range(1, record.N + 1):
        idx = record.schedule.steps[i - 1]
        batch = LabeledBatch(dataset.images[idx], dataset.labels[idx])
        hvp, _ = second_order_products(spec, record.state(i - 1), batch, tangent)
        tangent = tangent - alpha * hvp - record.step_grad(i)
    adj = outer_loss_grad(record.theta_N, segment)
    return float(adj @ tangent), tangent, -record.grad_sum


def prop1_error_sweep(spec: ModelSpec, dataset: SyntheticDataset, segment: Segment, N: int,
                      iota_list, ridge: float, theta_init=None, seed: int = 0,
                      tol: float = 1e-6) -> DiagnosticsReport:
    """Truncation error ``||full - truncated(iota)||`` on a ridge-regularised, converged unroll."""
    spec = replace(spec, ridge=float(ridge))
    theta0 = segment.theta_start if theta_init is None else theta_init
    schedule = make_schedule(dataset.size, N)
    record = unroll_inner(spec, theta0, dataset, N, schedule, record_from=0)
    final_grad = ce_grad(spec, record.theta_N, LabeledBatch(dataset.images, dataset.labels))
    report = DiagnosticsReport()
    grad_norm = float(np.linalg.norm(final_grad))
    converged = grad_norm < tol
    if not converged:
        msg = f"inner loop not converged after {N} steps (|grad| = {grad_norm:.3e})"
        warnings.warn(msg, stacklevel=2)
        report.warnings.append(msg)
    full = truncated_hypergrad(record, dataset, segment, iota=0)
    for iota in iota_list:
        trunc = truncated_hypergrad(record, dataset, segment, iota=iota)
        err = float(np.linalg.norm(full.d_phi - trunc.d_phi))
        report.truncation_errors.append(
            {"iota": int(iota), "err_l2": err, "alpha": record.alpha, "seed": seed, "converged": converged}
        )
    return report


def thm1_divergence_probe(spec: ModelSpec, dataset: SyntheticDataset, epsilon, tau_list, alpha_list,
                          theta_init, schedule: BatchSchedule | None = None, seed: int = 0) -> DiagnosticsReport:
    """Compare two from-scratch unrolls on ``phi`` and ``phi + epsilon``.

    For each ``tau`` the measured ``||theta_hat_tau - theta_tau||`` is paired
    with the triangle-inequality bound ``alpha * sum_{i<tau} ||grad diff_i||``.
    """
    tau_list = [int(t) for t in tau_list]
    N = max(tau_list)
    if min(tau_list) < 0:
        raise ContractError("tau values must be >= 0")
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != dataset.images.shape:
        raise ContractError("epsilon must match the synthetic image array")
    schedule = schedule or make_schedule(dataset.size, max(N, 1))
    if schedule.N < N:
        raise ContractError("schedule shorter than the largest tau")
    rho = float(np.linalg.norm(epsilon))
    perturbed = dataset.with_images(dataset.images + epsilon)
    report = DiagnosticsReport()
    for alpha in alpha_list:
        base = unroll_inner(spec, theta_init, dataset, schedule.N, schedule, 0, alpha=alpha)
        pert = unroll_inner(spec, theta_init, perturbed, schedule.N, schedule, 0, alpha=alpha)
        diffs = np.linalg.norm(pert.tape_grads - base.tape_grads, axis=1)
        if diffs.size:
            report.sigma_hat = max(report.sigma_hat, float(diffs.max()))
        cum = np.concatenate([[0.0], np.cumsum(diffs)])
        for tau in tau_list:
            measured = float(np.linalg.norm(pert.state(tau) - base.state(tau)))
            report.divergence_probe.append({
                "tau": tau,
                "div_l2": measured,
                "bound": float(alpha) * float(cum[tau]),
                "alpha": float(alpha),
                "rho": rho,
                "seed": seed,
            })
    return report
