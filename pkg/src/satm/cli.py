"""``satm`` command line.

Every command resolves its options from built-in defaults, then an optional
``--config`` JSON file, then explicit flags, and writes the resolved options
to ``manifest.json`` in the output directory together with the SHA-256 of each
output file. Feeding a manifest back through ``--config`` reproduces the run.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O or format error,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from . import bench as benchmod
from .condense import CondenseConfig, write_sharpness_csv
from .data import (
    apply_zca,
    fit_zca,
    load_idx,
    load_real_dataset,
    load_synthetic,
    make_gaussian_mixture,
    save_real_dataset,
    save_synthetic,
)
from .diffmodels import ModelSpec
from .errors import ContractError, FormatError, NumericError
from .evalharness import cross_arch_eval, train_eval, write_reports_csv
from .pipeline import condense_from_real, continual_experiment, train_pool
from .trajectory import load_trajectory, save_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"
_RESERVED = {"command", "outputs", "label", "manifest_version"}


class ConfigError(Exception):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "y", "on"):
        return True
    if lowered in ("0", "false", "no", "n", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt_int(text):
    if text is None or str(text).lower() in ("none", "null", "-", "full"):
        return None
    return int(text)


def _opt_float(text):
    if text is None or str(text).lower() in ("none", "null"):
        return None
    return float(text)


# name: (type, default, help); default None with required=True means mandatory
_MODEL_OPTS = {
    "arch": (str, "softmax_regression", "softmax_regression or mlp1"),
    "hidden": (int, 16, "hidden width for mlp1"),
    "activation": (str, "tanh", "smooth activation for mlp1"),
}

_CONDENSE_OPTS = {
    "inner_steps": (int, 20, "synthetic steps N"),
    "expert_span": (int, 2, "expert epochs M"),
    "max_start": (int, 2, "max start epoch"),
    "iota": (int, 0, "truncation index"),
    "tau": (_opt_int, None, "reuse index (defaults to iota)"),
    "rho": (float, 0.01, "SAM radius"),
    "gamma": (float, 0.01, "smoothing-noise strength"),
    "outer_lr": (float, 3.0, "learning rate for images"),
    "lr_lr": (float, 1e-5, "learning rate for the step size"),
    "outer_iterations": (int, 500, "outer iterations"),
    "synthetic_batch_size": (_opt_int, None, "synthetic batch size (none = full batch)"),
    "ipc": (int, 1, "images per class"),
    "init_alpha": (float, 0.01, "initial inner step size"),
    "init_mode": (str, "real_samples", "real_samples or gaussian_noise"),
}

_EXPERT_OPTS = {
    "epochs": (int, 10, "expert epochs"),
    "step_size": (float, 0.1, "expert SGD step size"),
    "batch_size": (int, 32, "expert mini-batch size"),
    "num_experts": (int, 5, "number of trajectories"),
}

COMMANDS = {
    "gen-data": {
        "source": (str, None, "gmm or idx", True),
        "classes": (int, 4, "number of classes (gmm)"),
        "dim": (int, 10, "feature dimension (gmm)"),
        "separation": (float, 4.0, "mean separation (gmm)"),
        "n_per_class": (int, 200, "train samples per class (gmm)"),
        "n_test_per_class": (int, 200, "test samples per class (gmm)"),
        "idx_train_images": (str, None, "IDX image file (train)"),
        "idx_train_labels": (str, None, "IDX label file (train)"),
        "idx_test_images": (str, None, "IDX image file (test)"),
        "idx_test_labels": (str, None, "IDX label file (test)"),
        "limit_per_class": (_opt_int, None, "keep the first K samples of each class (idx)"),
        "downscale_to": (_opt_int, None, "block-average images to this side length (idx)"),
        "zca": (_bool, False, "whiten with ZCA fitted on the training split"),
        "zca_eps": (float, 1e-6, "ZCA regulariser"),
        "seed": (int, 0, "root seed"),
    },
    "train-experts": {
        "train": (str, None, "training dataset file", True),
        **_MODEL_OPTS,
        **_EXPERT_OPTS,
        "seed": (int, 0, "first expert seed"),
    },
    "condense": {
        "experts": (str, None, "directory of trajectory files", True),
        "train": (str, None, "training dataset (initialisation)", True),
        **_CONDENSE_OPTS,
        "seed": (int, 0, "root seed"),
    },
    "eval": {
        "synthetic": (list, None, "synthetic dataset file(s)", True),
        "test": (str, None, "test dataset file", True),
        **_MODEL_OPTS,
        "epochs": (int, 300, "full-batch epochs"),
        "repeats": (int, 10, "fresh models per dataset"),
        "step_size": (_opt_float, None, "override the learned step size"),
        "seed": (int, 0, "root seed"),
    },
    "cross-eval": {
        "synthetic": (str, None, "synthetic dataset file", True),
        "test": (str, None, "test dataset file", True),
        "archs": (list, ["softmax_regression", "mlp1:16", "mlp1:64"], "architectures, e.g. mlp1:32"),
        "activation": (str, "tanh", "activation for mlp1 entries"),
        "epochs": (int, 300, "full-batch epochs"),
        "repeats": (int, 10, "fresh models per architecture"),
        "step_size": (_opt_float, None, "override the learned step size"),
        "seed": (int, 0, "root seed"),
    },
    "continual": {
        "train": (str, None, "training dataset file", True),
        "test": (str, None, "test dataset file", True),
        "tasks": (int, 5, "number of class-incremental tasks"),
        **_MODEL_OPTS,
        **{f"expert_{k}": v for k, v in _EXPERT_OPTS.items()},
        **{**_CONDENSE_OPTS, "ipc": (int, 5, "memory images per class"),
           "outer_iterations": (int, 200, "outer iterations per task")},
        "epochs": (int, 300, "evaluation epochs"),
        "repeats": (int, 5, "evaluation seeds"),
        "seed": (int, 0, "root seed"),
    },
    "bench": {
        "mode": (str, None, "|".join(benchmod.MODES), True),
        "classes": (int, 4, "mixture classes"),
        "dim": (int, 10, "mixture dimension"),
        "separation": (float, 4.0, "mixture separation"),
        "n_per_class": (int, 200, "mixture samples per class"),
        **_MODEL_OPTS,
        **{f"expert_{k}": v for k, v in _EXPERT_OPTS.items()},
        **{**_CONDENSE_OPTS, "inner_steps": (int, 50, "synthetic steps N"),
           "iota": (_opt_int, None, "truncation index (default 2N/3)"),
           "max_start": (int, 4, "max start epoch")},
        "steps": (int, 20, "timed steps / compared steps"),
        "ridge": (float, 1.0, "ridge for the truncation-error sweep"),
        "seeds": (int, 10, "problem seeds for sweeps"),
        "alphas": (list, [0.01, 0.05], "step sizes for the divergence probe"),
        "rhos": (list, [0.01, 0.1], "radii for the divergence probe"),
        "seed": (int, 0, "root seed"),
    },
}

_LIST_TYPES = {"alphas": float, "rhos": float}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satm", description="Sharpness-aware trajectory matching")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, table in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command", argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of options (a manifest works too)")
        p.add_argument("--out", help="output directory (default: $SATM_OUTPUT_DIR/<command>)")
        for opt, entry in table.items():
            typ, default, help_text = entry[:3]
            flag = "--" + opt.replace("_", "-")
            shown = "required" if len(entry) > 3 else f"default: {default}"
            if typ is list:
                p.add_argument(flag, dest=opt, nargs="+", help=f"{help_text} ({shown})")
            else:
                p.add_argument(flag, dest=opt, type=typ, help=f"{help_text} ({shown})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    table = COMMANDS[command]
    resolved = {k: v[1] for k, v in table.items()}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        if loaded.get("command", command) != command:
            raise ConfigError(f"config is for command {loaded['command']!r}, not {command!r}")
        # a manifest nests the options; a hand-written config may not
        options = loaded.get("options", loaded)
        if not isinstance(options, dict):
            raise ConfigError("config options must be a JSON object")
        for key, value in options.items():
            if key in _RESERVED:
                continue
            if key not in table:
                raise ConfigError(f"unknown option {key!r} for {command}")
            resolved[key] = value
    for key in table:
        if hasattr(args, key):
            resolved[key] = getattr(args, key)
    missing = [k for k, v in table.items() if len(v) > 3 and resolved.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    for key, caster in _LIST_TYPES.items():
        if key in resolved and resolved[key] is not None:
            resolved[key] = [caster(x) for x in resolved[key]]
    return resolved


def _out_dir(command: str, args) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get("SATM_OUTPUT_DIR", "satm_out")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, options: dict, outputs: list, label: str | None = None):
    manifest = {
        "manifest_version": 1,
        "command": command,
        "options": options,
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    if label is not None:
        manifest["label"] = label
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _model_spec(opts: dict, d: int, C: int) -> ModelSpec:
    arch = opts["arch"]
    if arch == "softmax_regression":
        return ModelSpec.softmax_regression(d, C)
    if arch == "mlp1":
        return ModelSpec.mlp1(d, opts["hidden"], C, opts["activation"])
    raise ContractError(f"unknown arch {arch!r}")


def _arch_from_token(token: str, d: int, C: int, activation: str) -> ModelSpec:
    if token == "softmax_regression":
        return ModelSpec.softmax_regression(d, C)
    if token.startswith("mlp1"):
        _, _, width = token.partition(":")
        return ModelSpec.mlp1(d, int(width or 16), C, activation)
    raise ContractError(f"unknown architecture token {token!r}")


def _condense_config(opts: dict) -> CondenseConfig:
    return CondenseConfig(
        inner_steps=opts["inner_steps"],
        expert_span=opts["expert_span"],
        max_start=opts["max_start"],
        truncate_index=opts["iota"],
        reuse_index=opts["tau"],
        rho=opts["rho"],
        gamma=opts["gamma"],
        outer_lr=opts["outer_lr"],
        lr_lr=opts["lr_lr"],
        outer_iterations=opts["outer_iterations"],
        synthetic_batch_size=opts["synthetic_batch_size"],
        ipc=opts["ipc"],
        init_alpha=opts["init_alpha"],
        init_mode=opts["init_mode"],
        seed=opts["seed"],
    )


def _write_rows_csv(path: Path, rows: list):
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# commands ----------------------------------------------------------------------

def cmd_gen_data(opts, out):
    if opts["source"] == "gmm":
        train = make_gaussian_mixture(opts["classes"], opts["dim"], opts["separation"],
                                      opts["n_per_class"], opts["seed"], "train")
        test = make_gaussian_mixture(opts["classes"], opts["dim"], opts["separation"],
                                     opts["n_test_per_class"], opts["seed"], "test")
    elif opts["source"] == "idx":
        need = ["idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"]
        missing = [k for k in need if not opts.get(k)]
        if missing:
            raise ConfigError("idx source needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
        train = load_idx(opts["idx_train_images"], opts["idx_train_labels"], opts["limit_per_class"],
                         opts["downscale_to"], "train")
        test = load_idx(opts["idx_test_images"], opts["idx_test_labels"], opts["limit_per_class"],
                        opts["downscale_to"], "test")
    else:
        raise ConfigError(f"unknown source {opts['source']!r}; use gmm or idx")
    outputs = ["train.rds", "test.rds"]
    if opts["zca"]:
        zca = fit_zca(train, opts["zca_eps"])
        train = train.with_features(apply_zca(zca, train.features), f"|zca({opts['zca_eps']!r})")
        test = test.with_features(apply_zca(zca, test.features), f"|zca({opts['zca_eps']!r})")
        (out / "zca.json").write_text(json.dumps(zca.to_dict(), sort_keys=True) + "\n")
        outputs.append("zca.json")
    save_real_dataset(train, out / "train.rds")
    save_real_dataset(test, out / "test.rds")
    ids = {"train": train.id, "test": test.id, "d": train.d, "num_classes": train.num_classes}
    (out / "datasets.json").write_text(json.dumps(ids, indent=2, sort_keys=True) + "\n")
    return outputs + ["datasets.json"], None


def cmd_train_experts(opts, out):
    train = _load_real(opts["train"], "train")
    spec = _model_spec(opts, train.d, train.num_classes)
    if opts["epochs"] < 1:
        raise ContractError("epochs must be >= 1")
    pool = train_pool(spec, train, opts["num_experts"], opts["epochs"], opts["step_size"],
                      opts["batch_size"], opts["seed"])
    outputs = []
    for k, traj in enumerate(pool):
        name = f"expert_{k:03d}.trj"
        save_trajectory(traj, out / name)
        outputs += [name, f"expert_{k:03d}.json"]
    return outputs, None


def _dataset_path(path, split: str) -> Path:
    """Accept a dataset file, a gen-data output directory or its manifest."""
    path = Path(path)
    if path.is_dir():
        return path / f"{split}.rds"
    if path.suffix == ".json" and path.is_file():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a JSON manifest: {exc}") from None
        if not isinstance(manifest, dict) or manifest.get("command") != "gen-data":
            raise ConfigError(f"{path} is not a gen-data manifest")
        return path.parent / f"{split}.rds"
    return path


def _load_real(path, split):
    return load_real_dataset(_dataset_path(path, split))


def _load_pool(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"expert directory {directory} does not exist")
    files = sorted(directory.glob("*.trj"))
    if not files:
        raise FileNotFoundError(f"no .trj files in {directory}")
    return [load_trajectory(f) for f in files]


def cmd_condense(opts, out):
    pool = _load_pool(opts["experts"])
    train = _load_real(opts["train"], "train")
    config = _condense_config(opts)
    _, final, records = condense_from_real(train, pool, config)
    save_synthetic(final, out / "synthetic.sds")
    write_sharpness_csv(records, out / "sharpness.csv")
    return ["synthetic.sds", "sharpness.csv"], config.run_label()


def cmd_eval(opts, out):
    test = _load_real(opts["test"], "test")
    paths = opts["synthetic"] if isinstance(opts["synthetic"], list) else [opts["synthetic"]]
    synthetics = [load_synthetic(p) for p in paths]
    reports = []
    for path, syn in zip(paths, synthetics):
        spec = _model_spec(opts, syn.d, test.num_classes)
        rep = train_eval(spec, syn, test, opts["epochs"], opts["repeats"], opts["seed"], opts["step_size"])
        rep.synthetic_id = f"{Path(path).name}:{syn.provenance}"
        reports.append(rep)
    (out / "eval.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    write_reports_csv(reports, out / "eval.csv")
    return ["eval.json", "eval.csv"], None


def cmd_cross_eval(opts, out):
    test = _load_real(opts["test"], "test")
    syn = load_synthetic(opts["synthetic"])
    specs = [_arch_from_token(t, syn.d, test.num_classes, opts["activation"]) for t in opts["archs"]]
    reports = cross_arch_eval(specs, syn, test, opts["epochs"], opts["repeats"], opts["seed"], opts["step_size"])
    (out / "cross_eval.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    write_reports_csv(reports, out / "cross_eval.csv")
    return ["cross_eval.json", "cross_eval.csv"], None


def cmd_continual(opts, out):
    train = _load_real(opts["train"], "train")
    test = _load_real(opts["test"], "test")
    spec = _model_spec(opts, train.d, train.num_classes)
    expert = {k: opts[f"expert_{k}"] for k in _EXPERT_OPTS}
    ours, base = continual_experiment(train, test, spec, opts["tasks"], _condense_config(opts), expert,
                                      opts["epochs"], opts["repeats"], opts["seed"])
    ours.to_json(out / "continual_condensed.json")
    ours.to_csv(out / "continual_condensed.csv")
    base.to_json(out / "continual_random.json")
    base.to_csv(out / "continual_random.csv")
    return ["continual_condensed.json", "continual_condensed.csv",
            "continual_random.json", "continual_random.csv"], None


def cmd_bench(opts, out):
    mode = opts["mode"]
    if mode not in benchmod.MODES:
        raise ConfigError(f"unknown bench mode {mode!r}; choose from {', '.join(benchmod.MODES)}")
    N = opts["inner_steps"]
    iota = opts["iota"] if opts["iota"] is not None else (2 * N) // 3
    name = f"bench_{mode}.csv"
    if mode == "hypergrad-error":
        spec = ModelSpec.softmax_regression(3, 2)
        iotas = sorted({int(round(N * f)) for f in (5 / 6, 4 / 6, 3 / 6, 2 / 6, 1 / 6)} | {0}, reverse=True)
        report = benchmod.truncation_error_benchmark(spec, N, iotas, opts["ridge"], range(opts["seeds"]))
        report.to_csv(out / name)
        return [name], None
    if mode == "divergence":
        spec = ModelSpec.softmax_regression(3, 2)
        report = benchmod.divergence_benchmark(spec, N, opts["alphas"], opts["rhos"], range(opts["seeds"]))
        report.to_csv(out / name)
        return [name], None

    from .condense import init_synthetic
    from .rng import generator

    train = make_gaussian_mixture(opts["classes"], opts["dim"], opts["separation"],
                                  opts["n_per_class"], opts["seed"], "train")
    spec = _model_spec(opts, train.d, train.num_classes)
    pool = train_pool(spec, train, opts["expert_num_experts"], opts["expert_epochs"],
                      opts["expert_step_size"], opts["expert_batch_size"], opts["seed"])
    config = _condense_config({**opts, "iota": iota})
    init = init_synthetic(train, config.ipc, config.init_mode, generator(config.seed, "init_synthetic"),
                          config.init_alpha)
    if mode == "timing":
        rows = benchmod.timing_benchmark(pool, init, config, opts["steps"], opts["seed"])
        mem = {(r["method"], r["pass"]): r["retained_states"]
               for r in benchmod.memory_benchmark(pool, init, config, opts["seed"])}
        for row in rows:
            row["retained_states"] = mem[(row["method"], 1)]
        # wall-clock data is not reproducible; keep it out of the hashed outputs
        _write_rows_csv(out / name, rows)
        return [], None
    if mode == "memory":
        _write_rows_csv(out / name, benchmod.memory_benchmark(pool, init, config, opts["seed"]))
        return [name], None
    rows = benchmod.lr_grad_compare(pool, init, config, opts["steps"], opts["seed"])
    _write_rows_csv(out / name, rows)
    summary = benchmod.summarize_lr_compare(rows)
    (out / "bench_lr-grad-compare_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [name, "bench_lr-grad-compare_summary.json"], None


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-experts": cmd_train_experts,
    "condense": cmd_condense,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "continual": cmd_continual,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.command
    try:
        opts = resolve(command, args)
        out = _out_dir(command, args)
        outputs, label = HANDLERS[command](opts, out)
        _write_manifest(out, command, opts, outputs, label)
    except (ConfigError, ContractError, argparse.ArgumentTypeError) as exc:
        print(f"satm {command}: configuration error: {exc}", file=sys.stderr)
        print(f"usage: satm {command} [--config PATH] [options]  (see satm {command} --help)", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"satm {command}: I/O or format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"satm {command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"satm {command}: wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
