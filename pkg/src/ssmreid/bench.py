"""Sequence-length scaling benchmark: selective scan vs quadratic attention.

Times the forward scan at a fixed channel width over growing token counts and
compares against a naive softmax self-attention of the same width, whose cost
grows quadratically.  The allocation proxy is the total CPU tensor memory the
profiler attributes to one forward pass.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import SsmParams, selective_scan


@dataclass
class BenchRow:
    tokens: int
    scan_ms: float
    scan_alloc_bytes: int
    attention_ms: float
    attention_alloc_bytes: int


def _naive_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scores = (q @ k.transpose(-1, -2)) / (q.shape[-1] ** 0.5)
    return torch.softmax(scores, dim=-1) @ v


def _time_op(op, repeats: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        op()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        op()
        samples.append((time.perf_counter() - start) * 1e3)
    return statistics.median(samples)


def _alloc_proxy(op) -> int:
    with torch.profiler.profile(
        activities=[torch.profiler.ProfilerActivity.CPU], profile_memory=True
    ) as prof:
        op()
    return sum(
        e.cpu_memory_usage for e in prof.key_averages() if e.cpu_memory_usage > 0
    )


def bench_scaling(
    token_counts: list[int],
    repeats: int = 20,
    inner_dim: int = 96,
    state_dim: int = 8,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> list[BenchRow]:
    """Median forward time and allocation proxy per token count."""
    torch.manual_seed(seed)
    params = SsmParams(inner_dim, state_dim, conv_width=4, dtype=dtype)
    rows = []
    for tokens in token_counts:
        if tokens < 1:
            raise ValueError("token counts must be >= 1")
        u = torch.randn(tokens, inner_dim, dtype=dtype)
        delta = torch.rand(tokens, inner_dim, dtype=dtype) * 0.1 + 0.01
        q = torch.randn(tokens, inner_dim, dtype=dtype)
        k = torch.randn(tokens, inner_dim, dtype=dtype)
        v = torch.randn(tokens, inner_dim, dtype=dtype)

        def scan_op():
            with torch.no_grad():
                selective_scan(u, delta, params, "forward")

        def attn_op():
            with torch.no_grad():
                _naive_attention(q, k, v)

        rows.append(
            BenchRow(
                tokens=tokens,
                scan_ms=_time_op(scan_op, repeats),
                scan_alloc_bytes=_alloc_proxy(scan_op),
                attention_ms=_time_op(attn_op, repeats),
                attention_alloc_bytes=_alloc_proxy(attn_op),
            )
        )
    return rows


def write_bench_csv(rows: list[BenchRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["tokens", "scan_ms", "scan_alloc_bytes", "attention_ms",
             "attention_alloc_bytes"]
        )
        for row in rows:
            writer.writerow(
                [row.tokens, f"{row.scan_ms:.6f}", row.scan_alloc_bytes,
                 f"{row.attention_ms:.6f}", row.attention_alloc_bytes]
            )


def doubling_ratios(rows: list[BenchRow]) -> dict[int, tuple[float, float]]:
    """t(2N)/t(N) for scan and attention, keyed by N, where both sizes ran."""
    by_tokens = {row.tokens: row for row in rows}
    ratios = {}
    for tokens, row in by_tokens.items():
        double = by_tokens.get(2 * tokens)
        if double is not None:
            ratios[tokens] = (
                double.scan_ms / row.scan_ms,
                double.attention_ms / row.attention_ms,
            )
    return ratios
