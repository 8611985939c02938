"""End-to-end recipes shared by the command line and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace

from .condense import CondenseConfig, condense, init_synthetic
from .data import RealDataset
from .diffmodels import ModelSpec
from .errors import ContractError
from .evalharness import continual_eval
from .rng import derive_seed, generator
from .trajectory import train_expert


def train_pool(spec: ModelSpec, train: RealDataset, num_experts: int, epochs: int, step_size: float,
               batch_size: int, seed: int):
    """Experts use seeds ``seed .. seed + num_experts - 1``."""
    return [train_expert(spec, train, epochs, step_size, batch_size, seed + k) for k in range(num_experts)]


def initial_synthetic(train: RealDataset, config: CondenseConfig, classes=None):
    rng = generator(config.seed, "init_synthetic")
    return init_synthetic(train, config.ipc, config.init_mode, rng, config.init_alpha, classes)


def condense_from_real(train: RealDataset, pool, config: CondenseConfig, classes=None):
    init = initial_synthetic(train, config, classes)
    final, records = condense(config, pool, init)
    return init, final, records


def task_splits(num_classes: int, tasks: int):
    if tasks < 1 or num_classes % tasks:
        raise ContractError(f"{num_classes} classes cannot be split into {tasks} equal tasks")
    size = num_classes // tasks
    return [list(range(k * size, (k + 1) * size)) for k in range(tasks)]


def continual_experiment(train: RealDataset, test: RealDataset, spec: ModelSpec, tasks: int,
                         config: CondenseConfig, expert_opts: dict, epochs: int, repeats: int, seed: int):
    """Condense one memory per task in isolation, then replay.

    Returns ``(condensed protocol, random-real protocol)``; the random
    baseline uses the very samples the condensed memories started from.
    """
    splits = task_splits(train.num_classes, tasks)
    condensed, random_real = [], []
    for k, classes in enumerate(splits):
        task_train = train.restrict(classes)
        task_seed = derive_seed(seed, "continual_task", k) % (2**31)
        pool = train_pool(spec, task_train, expert_opts["num_experts"], expert_opts["epochs"],
                          expert_opts["step_size"], expert_opts["batch_size"], task_seed)
        cfg = replace(config, seed=task_seed)
        init, final, _ = condense_from_real(task_train, pool, cfg, classes)
        condensed.append(final)
        random_real.append(init)
    ours = continual_eval(splits, condensed, test, spec, epochs, seed, repeats, label="condensed")
    base = continual_eval(splits, random_real, test, spec, epochs, seed, repeats, label="random-real")
    return ours, base
