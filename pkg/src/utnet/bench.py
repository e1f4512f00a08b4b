"""Timing and buffer-size benchmark for standard versus efficient attention.

The timed kernel runs outside the autodiff engine (forward only, no graph)
and processes one head at a time with an in-place softmax, so the largest
transient is exactly one n x n (standard) or n x k (efficient) f64 matrix.
Batch size is 1, which makes the per-call buffer total ``heads * n * k * 8``
bytes.
"""

from __future__ import annotations

import csv
import io
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionWeights, note_buffer, track_buffers
from .errors import ConfigError
from .tensor import Tensor

VARIANTS = ("standard", "efficient")
DEFAULT_SIZES = (16, 32, 64, 128)
DEFAULT_CAP_BYTES = 3 * 2**30  # largest single attention matrix the guard allows
MIN_SAMPLE_SECONDS = 1e-3


class MemoryGuardError(ConfigError):
    """An attention matrix would exceed the configured byte cap."""


@dataclass
class BenchRecord:
    variant: str
    H: int
    n: int
    k: int
    heads: int
    d: int
    seconds: float  # median wall time per forward call
    repeats: int
    inner: int  # calls per timed sample (raised when a call is below timer resolution)
    buffer_bytes: int  # sum of attention-matrix bytes over heads, one call
    peak_buffer_bytes: int  # largest single attention matrix
    flops: int

    def to_row(self) -> dict:
        row = asdict(self)
        row["seconds"] = repr(self.seconds)
        return row


def flops_model(variant: str, n: int, k: int, d: int, heads: int) -> int:
    """Analytic count of the attention core (logits, softmax, weighted sum).

    standard:  heads * (2 n^2 d + n^2 + 2 n^2 d)
    efficient: heads * (2 n k d + n k + 2 n k d)
    """
    if min(n, k, d, heads) < 1:
        raise ConfigError("flops_model needs positive n, k, d and heads")
    if variant == "standard":
        m = n
    elif variant == "efficient":
        m = k
    else:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return heads * (2 * n * m * d + n * m + 2 * n * m * d)


def buffer_bytes(variant: str, n: int, k: int, heads: int) -> int:
    return heads * n * (n if variant == "standard" else k) * 8


def check_memory(variant: str, n: int, k: int, cap_bytes: int) -> None:
    need = n * (n if variant == "standard" else k) * 8
    if need > cap_bytes:
        raise MemoryGuardError(
            f"{variant} attention at n={n} needs a {need:,}-byte matrix per head, above the cap of {cap_bytes:,} bytes"
        )


def _conv1x1(x: np.ndarray, w: Tensor) -> np.ndarray:
    B, C, H, W = x.shape
    return np.matmul(w.data[:, :, 0, 0], x.reshape(B, C, H * W)).reshape(B, -1, H, W)


def attention_kernel(
    x: np.ndarray,
    w: AttentionWeights,
    cfg: AttentionConfig,
    variant: str,
    cap_bytes: int = DEFAULT_CAP_BYTES,
) -> np.ndarray:
    """Forward-only multi-head attention, one head at a time (no relative logits)."""
    B, C, H, W = x.shape
    q, k, v = (_conv1x1(x, m) for m in (w.w_q, w.w_k, w.w_v))
    if variant == "efficient":
        s = cfg.reduced_for(H, W)
        with T.no_grad():
            if cfg.projection == "bilinear":
                k, v = (T.bilinear_resize(Tensor(a), s, s).data for a in (k, v))
            else:
                k, v = (T.adaptive_max_pool_2d(Tensor(a), s, s).data for a in (k, v))
    elif variant != "standard":
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    n, m = H * W, k.shape[2] * k.shape[3]
    check_memory(variant, n, m, cap_bytes)
    heads, d = cfg.heads, C // cfg.heads
    q = q.reshape(B, heads, d, n) * (1.0 / math.sqrt(d))
    k = k.reshape(B, heads, d, m)
    v = v.reshape(B, heads, d, m)
    out = np.empty((B, heads, d, n))
    for h in range(heads):
        logits = np.matmul(q[:, h].transpose(0, 2, 1), k[:, h])  # B x n x m
        note_buffer(variant, logits)
        logits -= logits.max(axis=-1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=-1, keepdims=True)
        out[:, h] = np.matmul(v[:, h], logits.transpose(0, 2, 1))
        del logits
    return _conv1x1(out.reshape(B, C, H, W), w.w_out)


def _time_call(fn, repeats: int, budget: float) -> tuple[float, int, int]:
    """Median seconds per call, repeats actually used, inner calls per sample."""
    fn()  # warmup
    t0 = time.perf_counter()
    fn()
    once = time.perf_counter() - t0
    inner = 1
    if once < MIN_SAMPLE_SECONDS:
        inner = int(math.ceil(MIN_SAMPLE_SECONDS / max(once, 1e-7))) * 2
    per_sample = once * inner
    repeats = max(3, min(repeats, int(budget / max(per_sample, 1e-9))))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples), repeats, inner


def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "processor": platform.processor() or platform.machine(),
    }


def _refuse_parallel() -> None:
    if os.environ.get("PYTEST_XDIST_WORKER"):
        raise ConfigError("bench must not run inside a parallel test worker; timings would be meaningless")


def run_bench(
    sizes=DEFAULT_SIZES,
    cfg: AttentionConfig | None = None,
    repeats: int = 20,
    variants=VARIANTS,
    channels: int = 32,
    seed: int = 0,
    cap_bytes: int = DEFAULT_CAP_BYTES,
    budget_seconds: float = 20.0,
) -> list[BenchRecord]:
    """Time each variant at each map size H = W on a 1 x channels x H x W input.

    ``budget_seconds`` bounds the timed samples per (variant, size); the
    repeat count is lowered (never below 3) to respect it.
    """
    _refuse_parallel()
    sizes = list(sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ConfigError(f"sizes must be strictly ascending, got {sizes}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    cfg = (cfg or AttentionConfig(use_relpos=False)).with_channels(channels)
    rng = np.random.default_rng(seed)
    w = AttentionWeights.init(cfg, rng)
    records = []
    for H in sizes:
        x = rng.standard_normal((1, channels, H, H))
        for variant in variants:
            s = cfg.reduced_for(H, H)
            n, k = H * H, (H * H if variant == "standard" else s * s)
            check_memory(variant, n, k, cap_bytes)
            with track_buffers() as log:
                attention_kernel(x, w, cfg, variant, cap_bytes)
            secs, used, inner = _time_call(lambda: attention_kernel(x, w, cfg, variant, cap_bytes), repeats, budget_seconds)
            records.append(BenchRecord(
                variant=variant, H=H, n=n, k=k, heads=cfg.heads, d=cfg.head_dim,
                seconds=secs, repeats=used, inner=inner,
                buffer_bytes=log.total_bytes, peak_buffer_bytes=log.peak_bytes,
                flops=flops_model(variant, n, k, cfg.head_dim, cfg.heads),
            ))
    return records


def loglog_slope(records: list[BenchRecord], variant: str) -> float:
    """Least-squares slope of log(seconds) against log(n)."""
    pts = [(r.n, r.seconds) for r in records if r.variant == variant]
    if len(pts) < 2:
        raise ConfigError(f"need at least two sizes for a slope, have {len(pts)} for {variant}")
    n, t = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    return float(np.polyfit(n, t, 1)[0])


def records_csv(records: list[BenchRecord], cfg: AttentionConfig | None = None) -> str:
    buf = io.StringIO()
    for key, val in machine_info().items():
        buf.write(f"# {key}: {val}\n")
    if cfg is not None:
        buf.write(f"# reduced_size: {cfg.reduced_size}\n# projection: {cfg.projection}\n")
    buf.write("# timing: median wall seconds per single-threaded forward call, batch 1\n")
    for v in sorted({r.variant for r in records}):
        if sum(r.variant == v for r in records) >= 2:
            buf.write(f"# slope_{v}: {loglog_slope(records, v):.4f}\n")
    notes = [r for r in records if r.inner > 1]
    for r in notes:
        buf.write(f"# note: {r.variant} H={r.H} below timer resolution, {r.inner} calls per sample\n")
    w = csv.DictWriter(buf, fieldnames=list(BenchRecord.__dataclass_fields__), lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.to_row())
    return buf.getvalue()
