"""Inference wall time against node count, with a log-log power-law fit."""

import logging
import time
from typing import Optional, Sequence

import numpy as np

from .dataset_io import pad_and_batch
from .error_utils import usage_error
from .geometry import PointCloudSample, preprocess_sample
from .model import init_params, model_forward
from .pydantic_models import BenchReport, BenchRow, ModelConfig, PreprocessConfig


def benchmark_cloud(n_nodes: int, rng: np.random.Generator, d_a: int = 1) -> PointCloudSample:
    """Sorted random segment chain on [0, 1]; geometry is fixed so only the node count varies."""
    nodes = np.sort(rng.uniform(0.0, 1.0, n_nodes))
    nodes = nodes + np.arange(n_nodes) * 1e-9
    cells = [(i, i + 1) for i in range(n_nodes - 1)]
    return PointCloudSample.from_cells(nodes, cells, 1, 1, rng.standard_normal((n_nodes, d_a)))


def fit_exponent(sizes: Sequence[int], seconds: Sequence[float]) -> Optional[float]:
    if len(sizes) < 2:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(sizes, dtype=np.float64)), np.log(np.asarray(seconds)), 1)
    return float(slope)


def run_benchmark(sizes: Sequence[int], config: Optional[ModelConfig] = None, seed: int = 0,
                  repeats: int = 3) -> BenchReport:
    """
    Time model_forward on clouds of each size (best of `repeats`, after one
    warm-up call). Preprocessing is excluded from the timings.
    """
    if not sizes or any(int(n) <= 1 for n in sizes):
        raise usage_error(f"benchmark sizes must be integers greater than 1, got {list(sizes)}")
    config = config or ModelConfig(dim=1, d_a=1, d_u=1, width=32, k_max=16, proj_width=32)
    if config.dim != 1:
        raise usage_error("the timing harness builds 1D clouds; set model.dim = 1")
    rng = np.random.default_rng(seed)
    model = init_params(config, seed)

    rows = []
    for n in sizes:
        sample = preprocess_sample(benchmark_cloud(int(n), rng, config.d_a), PreprocessConfig(intrinsic_dim=1))
        batch = pad_and_batch([sample])
        model_forward(model, batch)
        best = np.inf
        for _ in range(repeats):
            started = time.perf_counter()
            model_forward(model, batch)
            best = min(best, time.perf_counter() - started)
        rows.append(BenchRow(n_nodes=int(n), seconds=float(best)))
        logging.info(f"bench: {n} nodes in {best:.4f}s")
    exponent = fit_exponent([r.n_nodes for r in rows], [r.seconds for r in rows])
    return BenchReport(rows=rows, exponent=exponent)
