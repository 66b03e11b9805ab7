"""Compare the numba kernels with their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py [--repeat N] [--no-step]

The kernel table calls both variants directly. The train-step rows run one
forward/backward pass of the default model in a subprocess per setting of
SURGVAE_NUMBA, which is how the fallback is selected in normal use.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from surgvae import _accel

STEP_SNIPPET = """
import time, numpy as np
from surgvae.data import SynthConfig, synth_generate, fit_normalizer, apply_normalizer, stratified_folds
from surgvae.model import ModelConfig, init_params
from surgvae.losses import LossWeights
from surgvae.training import make_batches, batch_eps, train_step
raw = synth_generate(SynthConfig(rows_per_group=400)).dataset
ds = apply_normalizer(raw, fit_normalizer(raw))
folds = stratified_folds(ds, 5)
cfg = ModelConfig(n_features=ds.n_features)
params = init_params(cfg)
rows = make_batches(ds, folds, 0, 64, 0)[0]
eps = batch_eps(0, 1, 0, (rows.size, cfg.d))
train_step(params, ds, rows, eps, LossWeights(), 1000)
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    train_step(params, ds, rows, eps, LossWeights(), 1000)
    best = min(best, time.perf_counter() - t)
print(best)
"""


def best_of(fn, repeat):
    fn()  # warm-up (triggers jit compilation)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(64, 128, 2)) for _ in range(3))
    _, p = _accel.attention_forward_numpy(q, k, v)
    gout = rng.normal(size=q.shape)
    x = rng.normal(size=(1000, 32))
    sq = (x**2).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    cond, _ = _accel.tsne_affinities_numpy(d2, 30.0)
    P = np.maximum((cond + cond.T) / 2000.0, 1e-12)
    y = rng.normal(size=(1000, 2))
    return [
        ("attention forward 64x128x2", lambda m: getattr(_accel, f"attention_forward_{m}")(q, k, v)),
        ("attention backward 64x128x2", lambda m: getattr(_accel, f"attention_backward_{m}")(q, k, v, p, gout)),
        ("t-SNE affinities n=1000", lambda m: getattr(_accel, f"tsne_affinities_{m}")(d2, 30.0)),
        ("t-SNE gradient n=1000", lambda m: getattr(_accel, f"tsne_grad_{m}")(y, P)),
    ]


def step_time(flag, repeat):
    env = dict(os.environ, SURGVAE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end train-step rows")
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'case':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, run in kernel_cases():
        t_np = best_of(lambda: run("numpy"), args.repeat)
        t_nb = best_of(lambda: run("numba"), args.repeat)
        print(f"{name:32s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")
    if not args.no_step:
        t_np = step_time("0", args.repeat)
        t_nb = step_time("1", args.repeat)
        print(f"{'train step, batch 64, F=128':32s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
