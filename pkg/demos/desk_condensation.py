"""Condense a 4-class Gaussian mixture to one image per class and compare the
result with a random real subset and with plain trajectory matching."""
from dataclasses import replace

import numpy as np

from satm.condense import CondenseConfig
from satm.data import make_gaussian_mixture
from satm.diffmodels import ModelSpec
from satm.evalharness import train_eval
from satm.pipeline import condense_from_real, train_pool


def main():
    spec = ModelSpec.softmax_regression(10, 4)
    train = make_gaussian_mixture(4, 10, 4.0, 200, 0, "train")
    test = make_gaussian_mixture(4, 10, 4.0, 200, 0, "test")
    pool = train_pool(spec, train, 5, 10, 0.1, 32, 0)
    print(f"{len(pool)} experts, {len(pool[0].checkpoints)} checkpoints each")

    cfg = CondenseConfig(inner_steps=20, expert_span=2, max_start=4, truncate_index=10, rho=0.01, gamma=0.01,
                         outer_lr=3.0, lr_lr=1e-5, outer_iterations=500, init_alpha=0.01)
    plain = replace(cfg, rho=0.0, gamma=0.0, truncate_index=0, reuse_index=0)

    init, ours, records = condense_from_real(train, pool, cfg)
    _, mtt, _ = condense_from_real(train, pool, plain)
    for name, ds in (("random real subset", init), ("trajectory matching", mtt), ("sharpness-aware", ours)):
        rep = train_eval(spec, ds, test, 300, 10, seed=1)
        print(f"{name:>20}: {100 * rep.mean_accuracy:.2f} +- {100 * rep.std_accuracy:.2f}  (alpha={ds.inner_lr:.4f})")

    sharp = np.array([r.sharpness for r in records])
    print(f"sharpness, first 50 steps {sharp[:50].mean():.3e}, last 50 steps {sharp[-50:].mean():.3e}")


if __name__ == "__main__":
    main()
