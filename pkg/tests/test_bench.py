import csv
import io

import numpy as np
import pytest

from oracles import mhsa_oracle
from utnet import attention as A
from utnet import bench as B
from utnet.errors import ConfigError


def test_flops_model_small_cases():
    # 2 n m d for logits, n m for softmax, 2 n m d for the weighted sum
    assert B.flops_model("standard", n=4, k=1, d=2, heads=1) == 64 + 16 + 64
    assert B.flops_model("efficient", n=4, k=1, d=2, heads=3) == 3 * (16 + 4 + 16)
    assert B.flops_model("standard", 1024, 64, 8, 4) == 1024 / 64 * B.flops_model("efficient", 1024, 64, 8, 4)
    assert B.flops_model("efficient", 256, 256, 8, 4) == B.flops_model("standard", 256, 64, 8, 4)
    assert B.flops_model("efficient", 512, 64, 8, 4) == 2 * B.flops_model("efficient", 256, 64, 8, 4)
    assert B.flops_model("standard", 512, 64, 8, 4) == 4 * B.flops_model("standard", 256, 64, 8, 4)
    assert B.flops_model("standard", 16384, 64, 8, 4) == 256 * B.flops_model("efficient", 16384, 64, 8, 4)
    with pytest.raises(ConfigError):
        B.flops_model("other", 1, 1, 1, 1)
    with pytest.raises(ConfigError):
        B.flops_model("standard", 0, 1, 1, 1)


def test_buffer_bytes_values():
    assert B.buffer_bytes("standard", 32 * 32, 64, heads=4) == 33_554_432
    assert B.buffer_bytes("efficient", 32 * 32, 64, heads=4) == 2_097_152
    assert B.buffer_bytes("standard", 1024, 64, 4) // B.buffer_bytes("efficient", 1024, 64, 4) == 16


@pytest.mark.parametrize("variant", B.VARIANTS)
@pytest.mark.parametrize("seed", range(3))
def test_kernel_matches_loop_oracle(variant, seed):
    cfg = A.AttentionConfig(heads=2, reduced_size=3, use_relpos=False).with_channels(4)
    rng = np.random.default_rng(seed)
    w = A.AttentionWeights.init(cfg, rng)
    x = rng.standard_normal((1, 4, 5, 6))
    got = B.attention_kernel(x, w, cfg, variant)
    assert np.abs(got - mhsa_oracle(x, w, cfg, variant)).max() < 1e-12


def test_kernel_buffers_are_one_head_at_a_time():
    cfg = A.AttentionConfig(heads=4, reduced_size=8, use_relpos=False).with_channels(32)
    w = A.AttentionWeights.init(cfg, np.random.default_rng(0))
    x = np.zeros((1, 32, 32, 32))
    for variant, k in (("standard", 1024), ("efficient", 64)):
        with A.track_buffers() as log:
            B.attention_kernel(x, w, cfg, variant)
        assert log.peak_bytes == 1024 * k * 8
        assert log.total_bytes == B.buffer_bytes(variant, 1024, k, 4)


def test_memory_guard_refuses_standard_but_not_efficient():
    cap = 64 * 2**20
    with pytest.raises(B.MemoryGuardError, match="cap"):
        B.run_bench(sizes=(128,), variants=("standard",), cap_bytes=cap, repeats=1)
    recs = B.run_bench(sizes=(128,), variants=("efficient",), cap_bytes=cap, repeats=3, budget_seconds=1)
    assert recs[0].peak_buffer_bytes == 128 * 128 * 64 * 8 <= cap


def test_default_cap_admits_128_standard():
    B.check_memory("standard", 128 * 128, 128 * 128, B.DEFAULT_CAP_BYTES)
    with pytest.raises(B.MemoryGuardError):
        B.check_memory("standard", 256 * 256, 256 * 256, B.DEFAULT_CAP_BYTES)


def test_run_bench_argument_checks(monkeypatch):
    with pytest.raises(ConfigError):
        B.run_bench(sizes=(32, 16))
    with pytest.raises(ConfigError):
        B.run_bench(sizes=(16,), repeats=0)
    monkeypatch.setenv("PYTEST_XDIST_WORKER", "gw0")
    with pytest.raises(ConfigError, match="parallel"):
        B.run_bench(sizes=(16,))


def test_loglog_slope_exact_on_power_law():
    recs = [B.BenchRecord("x", 0, n, 1, 1, 1, 3e-9 * n**1.5, 3, 1, 0, 0, 0) for n in (16, 64, 256)]
    assert abs(B.loglog_slope(recs, "x") - 1.5) < 1e-12
    with pytest.raises(ConfigError):
        B.loglog_slope(recs[:1], "x")


def test_small_run_and_csv():
    cfg = A.AttentionConfig(use_relpos=False)
    recs = B.run_bench(sizes=(8, 16), cfg=cfg, repeats=3, budget_seconds=0.5)
    assert [(r.variant, r.H) for r in recs] == [("standard", 8), ("efficient", 8), ("standard", 16), ("efficient", 16)]
    assert all(r.seconds > 0 and r.repeats >= 3 for r in recs)
    assert recs[2].buffer_bytes == B.buffer_bytes("standard", 256, 256, cfg.heads)
    assert recs[3].k == 64 and recs[1].k == 64  # s = min(r, H, W) = 8 at both sizes
    text = B.records_csv(recs, cfg)
    assert "# slope_standard:" in text and "# cpu_count:" in text
    rows = list(csv.DictReader(io.StringIO("\n".join(l for l in text.splitlines() if not l.startswith("#")))))
    assert len(rows) == 4 and int(rows[2]["buffer_bytes"]) == recs[2].buffer_bytes
