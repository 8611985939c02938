"""Measurement harnesses: step timing, tape size, step-size gradient fidelity,
truncation-error decay and trajectory divergence."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .condense import CondenseConfig, mtt_step, naive_sam_step, satm_step, satm_step_detailed
from .data import SyntheticDataset
from .diffmodels import ModelSpec
from .hypergrad import (
    DiagnosticsReport,
    lr_exact_grad,
    lr_first_order_grad,
    make_schedule,
    prop1_error_sweep,
    thm1_divergence_probe,
    unroll_inner,
)
from .rng import generator
from .trajectory import Segment

__all__ = [
    "MODES",
    "timing_benchmark",
    "memory_benchmark",
    "lr_grad_compare",
    "truncation_error_benchmark",
    "divergence_benchmark",
    "random_problem",
    "summarize_lr_compare",
    "with_indices",
]

MODES = ("hypergrad-error", "divergence", "timing", "memory", "lr-grad-compare")


def random_problem(spec: ModelSpec, ipc: int, seed: int, scale: float = 1.0):
    """A random synthetic set, start point and target for harness runs."""
    rng = generator(seed, "bench_problem")
    C = spec.C
    images = rng.normal(size=(C * ipc, spec.d)) * scale
    ds = SyntheticDataset(images, tuple(range(C)), ipc, 0.5)
    theta0 = rng.normal(size=spec.param_count) * 0.1
    target = theta0 + rng.normal(size=spec.param_count) * 0.5
    diff = theta0 - target
    return ds, Segment(0, 1, theta0, target, float(diff @ diff))


def timing_benchmark(pool, init: SyntheticDataset, config: CondenseConfig, steps: int = 20, seed: int = 0):
    """Median wall time per outer step for the three strategies on identical inputs."""
    methods = (("satm", satm_step), ("naive_sam", naive_sam_step), ("mtt", mtt_step))
    rows = []
    for name, fn in methods:
        rng = generator(seed, "timing", name)
        ds = init
        times = []
        fn(ds, pool, config, generator(seed, "timing_warmup"), 0)
        for it in range(steps):
            t0 = time.perf_counter()
            ds, _ = fn(ds, pool, config, rng, it)
            times.append(time.perf_counter() - t0)
        rows.append({
            "method": name,
            "N": config.inner_steps,
            "iota": config.truncate_index,
            "tau": config.reuse_index,
            "steps": steps,
            "median_s": float(np.median(times)),
            "mean_s": float(np.mean(times)),
        })
    return rows


def memory_benchmark(pool, init: SyntheticDataset, config: CondenseConfig, seed: int = 0):
    """Retained-state counts of the tapes each strategy builds."""
    out = satm_step_detailed(init, pool, config, generator(seed, "memory"), 0)
    N = config.inner_steps
    full = 1 + (N + 1)
    return [
        {"method": "satm", "pass": 1, "N": N, "record_from": config.truncate_index,
         "retained_states": out.pass1_record.retained_state_count},
        {"method": "satm", "pass": 2, "N": N, "record_from": config.reuse_index,
         "retained_states": out.pass2_record.retained_state_count},
        {"method": "naive_sam", "pass": 1, "N": N, "record_from": 0, "retained_states": full},
        {"method": "naive_sam", "pass": 2, "N": N, "record_from": 0, "retained_states": full},
        {"method": "mtt", "pass": 1, "N": N, "record_from": 0, "retained_states": full},
    ]


def lr_grad_compare(pool, init: SyntheticDataset, config: CondenseConfig, steps: int = 200, seed: int = 0):
    """Run a condensation and, at every step, compare the first-order and exact
    step-size gradients on the dataset that produced the applied update.

    ``cosine`` is the cosine between the exact tangent ``d theta_N / d alpha``
    and its first-order stand-in ``-sum_i grad_i``.
    """
    rng = generator(seed, "lr_compare")
    ds = init
    rows = []
    spec = pool[0].spec
    for it in range(steps):
        out = satm_step_detailed(ds, pool, config, rng, it)
        used = ds.with_images(out.pass2_images)
        schedule = out.pass1_record.schedule
        full = unroll_inner(spec, out.segment.theta_start, used, config.inner_steps, schedule, 0)
        exact, tangent, approx = lr_exact_grad(full, used, out.segment)
        first = lr_first_order_grad(full, out.segment)
        denom = np.linalg.norm(tangent) * np.linalg.norm(approx)
        rows.append({
            "iter": it,
            "alpha": ds.inner_lr,
            "d_alpha_first_order": first,
            "d_alpha_exact": exact,
            "sign_agree": int(np.sign(first) == np.sign(exact)),
            "cosine": float(tangent @ approx / denom) if denom > 0 else 1.0,
        })
        ds = out.dataset
    return rows


def truncation_error_benchmark(spec: ModelSpec, N: int, iotas, ridge: float, seeds, ipc: int = 1,
                               scale: float = 1.0) -> DiagnosticsReport:
    report = DiagnosticsReport()
    for s in seeds:
        ds, seg = random_problem(spec, ipc, s, scale)
        report.extend(prop1_error_sweep(spec, ds, seg, N, iotas, ridge, seed=s))
    return report


def divergence_benchmark(spec: ModelSpec, N: int, alphas, rhos, seeds, ipc: int = 1) -> DiagnosticsReport:
    report = DiagnosticsReport()
    for s in seeds:
        ds, seg = random_problem(spec, ipc, s)
        direction = generator(s, "bench_eps").normal(size=ds.images.shape)
        direction /= np.linalg.norm(direction)
        schedule = make_schedule(ds.size, N)
        for rho in rhos:
            report.extend(thm1_divergence_probe(spec, ds, rho * direction, range(1, N + 1), alphas,
                                                seg.theta_start, schedule, seed=s))
    return report


def summarize_lr_compare(rows) -> dict:
    agree = np.mean([r["sign_agree"] for r in rows]) if rows else float("nan")
    cos = np.mean([r["cosine"] for r in rows]) if rows else float("nan")
    return {"steps": len(rows), "sign_agreement": float(agree), "mean_cosine": float(cos)}


def with_indices(config: CondenseConfig, N: int, iota: int, tau: int | None = None) -> CondenseConfig:
    return replace(config, inner_steps=N, truncate_index=iota, reuse_index=iota if tau is None else tau)
