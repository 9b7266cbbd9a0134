"""Training throughput of BN against MN at several K on one network."""

import csv
import statistics
import time
from pathlib import Path

import numpy as np

from ..smallnet import OptimizerSpec, build_net
from ..smallnet.optim import Optimizer
from ..smallnet.train import train_step
from .config import fill_slots

CONV_NET = [
    {"kind": "conv", "out": 16, "kernel": 3, "pad": 1},
    {"kind": "norm"},
    {"kind": "relu"},
    {"kind": "maxpool", "kernel": 2},
    {"kind": "conv", "out": 32, "kernel": 3, "pad": 1},
    {"kind": "norm"},
    {"kind": "relu"},
    {"kind": "maxpool", "kernel": 2},
    {"kind": "conv", "out": 32, "kernel": 3, "pad": 1},
    {"kind": "norm"},
    {"kind": "relu"},
    {"kind": "avgpool", "kernel": 4},
    {"kind": "dense", "units": 10},
]


def _timed_steps(net, opt, x, y, steps):
    t0 = time.perf_counter()
    for _ in range(steps):
        train_step(net, opt, x, y, 1e-3)
    return steps / (time.perf_counter() - t0)


def measure_throughput(network=CONV_NET, input_shape=(3, 16, 16), ks=(2, 3, 4, 5), batch=128,
                       steps=8, repeats=3, em_iters=2, subsample=0.25, slots=(1,), seed=0):
    """Median iterations/sec per variant over ``repeats`` rounds."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch,) + tuple(input_shape))
    y = rng.integers(0, network[-1]["units"], size=batch)
    variants = [("bn", 0, {"kind": "bn"})] + [
        (f"mn{k}", k, {"kind": "mn", "K": k, "em_iters": em_iters, "subsample": subsample}) for k in ks
    ]
    nets = {}
    for name, _, norm in variants:
        net = build_net(fill_slots(network, norm, slots), input_shape, seed=seed)
        opt = Optimizer(OptimizerSpec("rmsprop", lr=1e-3))
        train_step(net, opt, x, y, 1e-3)  # warm-up
        nets[name] = (net, opt)
    rates = {name: [] for name, _, _ in variants}
    for _ in range(repeats):
        for name, _, _ in variants:
            rates[name].append(_timed_steps(*nets[name], x, y, steps))
    return [{"variant": name, "K": k, "batch": batch, "iters_per_sec": statistics.median(rates[name])}
            for name, k, _ in variants]


def retention(rows):
    bn = next(r["iters_per_sec"] for r in rows if r["variant"] == "bn")
    return {r["K"]: r["iters_per_sec"] / bn for r in rows if r["variant"] != "bn"}


def write_cost(rows, out_dir):
    from .plots import plot_cost

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cost.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "K", "batch", "iters_per_sec"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    plot_cost(rows, out_dir / "cost.svg")
