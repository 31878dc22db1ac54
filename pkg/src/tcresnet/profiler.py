"""Analytic parameter/FLOP accounting and single-threaded latency measurement.

FLOPs follow the 2 x multiply-accumulate convention for convolution and
fully connected layers, every kernel tap counted including padded ones.
Batch norm, ReLU, pooling, residual adds and softmax count as zero.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .models import ModelInstance, ModelSpec, forward, layer_table


@dataclass(frozen=True)
class CostRow:
    name: str
    out_shape: tuple[int, ...]
    params_all: int
    params_trainable: int
    flops: int


@dataclass
class CostReport:
    model: str
    rows: list[CostRow]

    @property
    def params_all(self) -> int:
        return sum(r.params_all for r in self.rows)

    @property
    def params_trainable(self) -> int:
        return sum(r.params_trainable for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "out_shape", "params_all", "params_trainable", "flops"])
        for r in self.rows:
            w.writerow([r.name, "x".join(map(str, r.out_shape)), r.params_all, r.params_trainable, r.flops])
        return buf.getvalue()

    def to_table(self) -> str:
        header = ("layer", "out_shape", "params_all", "params_trainable", "flops")
        body = [
            (r.name, "x".join(map(str, r.out_shape)), f"{r.params_all:,}", f"{r.params_trainable:,}", f"{r.flops:,}")
            for r in self.rows
        ]
        body.append(("TOTAL", "", f"{self.params_all:,}", f"{self.params_trainable:,}", f"{self.flops:,}"))
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(5)]

        def fmt(row):
            left = row[0].ljust(widths[0]) + "  " + row[1].ljust(widths[1])
            return left + "".join("  " + row[i].rjust(widths[i]) for i in range(2, 5))

        rule = "-" * len(fmt(header))
        return "\n".join([f"# {self.model}", fmt(header), rule, *map(fmt, body[:-1]), rule, fmt(body[-1])])


def _cost_rows(spec: ModelSpec) -> list[CostRow]:
    rows = []
    for layer in layer_table(spec):
        params_all = params_trainable = flops = 0
        if layer.kind == "conv":
            kh, kw = layer.kernel
            params_all = params_trainable = kh * kw * layer.c_in * layer.c_out
            h, w, _ = layer.out_shape
            flops = 2 * params_all * h * w
        elif layer.kind == "bn":
            params_all, params_trainable = 4 * layer.c_out, 2 * layer.c_out
        elif layer.kind == "fc":
            params_all = params_trainable = layer.c_in * layer.c_out
            flops = 2 * params_all
        rows.append(CostRow(layer.name, layer.out_shape, params_all, params_trainable, flops))
    return rows


def count_params(spec: ModelSpec) -> CostReport:
    """All parameters, moving batch-norm statistics included."""
    return CostReport(spec.name, _cost_rows(spec))


def count_flops(spec: ModelSpec) -> CostReport:
    return CostReport(spec.name, _cost_rows(spec))


def receptive_field(layers) -> list[int]:
    """Receptive field (in input frames) after each ``(kernel, stride)`` layer."""
    r, jump, out = 1, 1, []
    for kernel, stride in layers:
        r += (kernel - 1) * jump
        jump *= stride
        out.append(r)
    return out


def temporal_receptive_fields(spec: ModelSpec) -> dict[str, int]:
    """Time-axis receptive field of every conv on the main path of ``spec``."""
    convs = [
        (layer.name, layer.kernel[0], layer.stride[0])
        for layer in layer_table(spec)
        if layer.kind == "conv" and "shortcut" not in layer.name
    ]
    rf = receptive_field([(k, s) for _, k, s in convs])
    return {name: r for (name, _, _), r in zip(convs, rf)}


@dataclass
class LatencyReport:
    model: str
    runs: int
    warmup: int
    times_ms: list[float] = field(default_factory=list)
    threads: int = 1

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.times_ms)

    @property
    def stddev_ms(self) -> float:
        return statistics.pstdev(self.times_ms)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "runs": self.runs,
            "warmup": self.warmup,
            "times_ms": self.times_ms,
            "mean_ms": self.mean_ms,
            "stddev_ms": self.stddev_ms,
            "threads": self.threads,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def benchmark_latency(
    instance: ModelInstance, runs: int = 50, warmup: int = 5, features=None, seed: int = 0
) -> LatencyReport:
    """Time ``forward`` from MFCC input to logits on one thread.

    Feature extraction is excluded; ``features`` defaults to a random
    ``(t, f)`` matrix drawn from ``seed``. Garbage collection is paused
    while timing.
    """
    if instance.mode != "infer":
        raise ValueError("benchmark an infer-mode instance")
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    spec = instance.spec
    if features is None:
        features = np.random.default_rng(seed).normal(size=(spec.t, spec.f)).astype(np.float32)
    times = []
    # like timeit, keep the cyclic garbage collector out of the measurements
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            for _ in range(warmup):
                forward(instance, features)
            for _ in range(runs):
                t0 = time.perf_counter()
                forward(instance, features)
                times.append((time.perf_counter() - t0) * 1e3)
    finally:
        if gc_was_enabled:
            gc.enable()
    return LatencyReport(spec.name, runs, warmup, times, threads=1)
