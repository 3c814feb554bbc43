import numpy as np
import pytest

from quantspec import roofline as rl
from quantspec.cli import default_hardware_path
from quantspec.errors import ConfigError


@pytest.fixture(scope="module")
def hw():
    return rl.HardwareSpec.from_json(default_hardware_path())


DIMS = rl.LLAMA2_7B
D = DIMS.hidden


class TestPrefillCounts:
    def test_intensity_doubles_with_context_when_attention_dominates(self):
        i1 = rl.count_prefill(rl.WorkloadPoint(batch=1, context_len=64 * D), DIMS).aggregate.intensity
        i2 = rl.count_prefill(rl.WorkloadPoint(batch=1, context_len=128 * D), DIMS).aggregate.intensity
        assert i2 / i1 == pytest.approx(2.0, rel=0.10)

    def test_intensity_scales_with_batch_at_short_context(self):
        # B*S must stay small enough that weight bytes dominate activation
        # bytes, otherwise the doubling drifts off x2
        s = D // 64
        i1 = rl.count_prefill(rl.WorkloadPoint(batch=1, context_len=s), DIMS).aggregate.intensity
        i2 = rl.count_prefill(rl.WorkloadPoint(batch=2, context_len=s), DIMS).aggregate.intensity
        assert i2 / i1 == pytest.approx(2.0, rel=0.10)

    def test_attention_intensity_batch_invariant(self):
        vals = [
            rl.count_prefill(rl.WorkloadPoint(batch=b, context_len=4096), DIMS).attention.intensity
            for b in (1, 2, 4, 8, 16, 32, 64, 128, 256)
        ]
        assert (max(vals) - min(vals)) / min(vals) < 0.01

    def test_linear_flops_formula(self):
        w = rl.WorkloadPoint(batch=3, context_len=100)
        counts = rl.count_prefill(w, DIMS)
        assert counts.linear.flops == 2.0 * 3 * 100 * DIMS.linear_weight_count()

    def test_causal_halving(self):
        w = rl.WorkloadPoint(batch=1, context_len=256)
        counts = rl.count_prefill(w, DIMS)
        assert counts.attention.flops == 0.5 * 4.0 * 256 * 256 * D * DIMS.num_layers


class TestDecodeCounts:
    def test_intensity_approaches_two_over_bytes_kv(self):
        for bytes_kv, want in ((2.0, 1.0), (1.0, 2.0), (0.5, 4.0)):
            w = rl.WorkloadPoint(batch=1, context_len=4_000_000, bytes_kv=bytes_kv)
            intensity = rl.count_decode(w, DIMS).aggregate.intensity
            assert intensity == pytest.approx(want, rel=0.02)

    def test_flat_in_context_length(self):
        vals = [
            rl.count_decode(rl.WorkloadPoint(batch=1, context_len=s), DIMS).aggregate.intensity
            for s in (64 * D, 128 * D, 256 * D)
        ]
        assert (max(vals) - min(vals)) / min(vals) < 0.05

    def test_scales_with_batch_at_short_context(self):
        s = D // 8
        i1 = rl.count_decode(rl.WorkloadPoint(batch=2, context_len=s), DIMS).aggregate.intensity
        i2 = rl.count_decode(rl.WorkloadPoint(batch=4, context_len=s), DIMS).aggregate.intensity
        assert i2 / i1 == pytest.approx(2.0, rel=0.10)

    def test_attention_intensity_batch_invariant(self):
        vals = [
            rl.count_decode(rl.WorkloadPoint(batch=b, context_len=16384), DIMS).attention.intensity
            for b in (1, 2, 4, 8, 16, 32, 64, 128, 256)
        ]
        assert (max(vals) - min(vals)) / min(vals) < 0.01

    def test_generation_length_multiplies_counts(self):
        w1 = rl.WorkloadPoint(batch=2, context_len=1024, gen_len=1)
        w5 = rl.WorkloadPoint(batch=2, context_len=1024, gen_len=5)
        c1 = rl.count_decode(w1, DIMS)
        c5 = rl.count_decode(w5, DIMS)
        assert c5.aggregate.flops == pytest.approx(5 * c1.aggregate.flops)
        assert c5.aggregate.mops == pytest.approx(5 * c1.aggregate.mops)

    def test_halving_kv_bytes_doubles_attention_intensity(self):
        w16 = rl.WorkloadPoint(batch=1, context_len=131072, bytes_kv=2.0)
        w8 = rl.WorkloadPoint(batch=1, context_len=131072, bytes_kv=1.0)
        w4 = rl.WorkloadPoint(batch=1, context_len=131072, bytes_kv=0.5)
        i16 = rl.count_decode(w16, DIMS).attention.intensity
        i8 = rl.count_decode(w8, DIMS).attention.intensity
        i4 = rl.count_decode(w4, DIMS).attention.intensity
        assert i8 / i16 == pytest.approx(2.0, rel=0.02)
        assert i4 / i16 == pytest.approx(4.0, rel=0.05)


class TestClassify:
    def test_boundary_convention(self, hw):
        at_ridge = rl.RooflinePoint(flops=hw.ridge * 1e9, mops=1e9)
        assert rl.classify(at_ridge, hw).bound == "compute"
        below = rl.RooflinePoint(flops=hw.ridge * 1e9 - 1, mops=1e9)
        assert rl.classify(below, hw).bound == "memory"

    def test_memory_bound_latency_is_bandwidth_time(self, hw):
        point = rl.RooflinePoint(flops=1e9, mops=1e9)  # intensity 1 << ridge
        cls = rl.classify(point, hw)
        assert cls.bound == "memory"
        assert cls.latency == point.mops / hw.peak_bw

    def test_decode_grid_memory_bound(self, hw):
        for b in (1, 4, 16, 64, 256):
            for s in (1024, 8192, 65536, 262144):
                counts = rl.count_decode(rl.WorkloadPoint(batch=b, context_len=s), DIMS)
                assert rl.classify(counts.aggregate, hw).bound == "memory"

    def test_prefill_grid_compute_bound(self, hw):
        for b in (1, 4, 16, 64, 256):
            for s in (1024, 8192, 65536, 262144):
                counts = rl.count_prefill(rl.WorkloadPoint(batch=b, context_len=s), DIMS)
                assert rl.classify(counts.aggregate, hw).bound == "compute"

    def test_attention_fraction_rises_with_context(self, hw):
        short = rl.attention_latency_fraction(
            rl.count_decode(rl.WorkloadPoint(batch=1, context_len=512), DIMS), hw
        )
        long = rl.attention_latency_fraction(
            rl.count_decode(rl.WorkloadPoint(batch=1, context_len=262144), DIMS), hw
        )
        assert 0.0 < short < long <= 1.0


class TestKvMemory:
    def test_fig4_ratio(self, hw):
        rows = rl.kv_memory_sweep([16], [262144], DIMS, hw)
        assert rows[0].ratio == pytest.approx(160.0, rel=0.15)

    def test_tiny_workload_ratio(self, hw):
        rows = rl.kv_memory_sweep([1], [1], DIMS, hw)
        assert rows[0].ratio < 1e-3
        assert rows[0].fits

    def test_int4_draft_bytes_quarter_of_fp16(self, hw):
        fp16 = rl.kv_cache_bytes(4, 32768, DIMS, bytes_kv=2.0)
        int4 = rl.kv_cache_bytes(4, 32768, DIMS, bytes_kv=0.5)
        assert int4 == fp16 / 4

    def test_capacity_flag(self, hw):
        rows = rl.kv_memory_sweep([256], [262144], DIMS, hw)
        assert not rows[0].fits


class TestSpeedupModel:
    def test_full_acceptance_closed_form(self):
        # E = gamma+1; with draft cost 1 and verify cost 0.5 (in AR units)
        assert rl.speedup_model(1.0, 1, 1.0, 0.5) == pytest.approx(2.0 / 1.5)

    def test_zero_acceptance_slower_than_ar(self):
        assert rl.speedup_model(0.0, 4, 1.0, 1.0) == pytest.approx(1.0 / 5.0)
        assert rl.speedup_model(0.0, 1, 0.25, 1.0) < 1.0

    def test_int4_int8_ratio_example(self):
        got = rl.speedup_model(0.9, 6, 0.25, 0.5)
        expected_tokens = (1 - 0.9**7) / (1 - 0.9)
        assert got == pytest.approx(expected_tokens / (6 * 0.25 + 0.5))

    def test_monotone_in_acceptance(self):
        vals = [rl.speedup_model(a, 4, 0.3, 0.6) for a in np.linspace(0, 1, 21)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_monotone_decreasing_in_draft_cost(self):
        vals = [rl.speedup_model(0.9, 4, c, 0.6) for c in np.linspace(0.1, 1.0, 10)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(ConfigError):
            rl.speedup_model(1.5, 4, 1.0, 1.0)
        with pytest.raises(ConfigError):
            rl.speedup_model(0.5, 0, 1.0, 1.0)


class TestAblationCostModel:
    def test_neither_is_exactly_one(self, hw):
        got = rl.modeled_ablation_speedup(
            1.0, 4, dims=DIMS, batch=1, context_len=8192, hw=hw, kv_quant=False, weight_quant=False
        )
        assert got == pytest.approx(1.0)

    def test_short_context_prefers_weight_quant(self, hw):
        kwargs = dict(dims=DIMS, batch=1, context_len=D // 8, hw=hw)
        kv = rl.modeled_ablation_speedup(0.9, 4, kv_quant=True, weight_quant=False, **kwargs)
        wt = rl.modeled_ablation_speedup(0.9, 4, kv_quant=False, weight_quant=True, **kwargs)
        assert wt > kv

    def test_long_context_prefers_kv_quant(self, hw):
        kwargs = dict(dims=DIMS, batch=1, context_len=128 * D, hw=hw)
        kv = rl.modeled_ablation_speedup(0.9, 4, kv_quant=True, weight_quant=False, **kwargs)
        wt = rl.modeled_ablation_speedup(0.9, 4, kv_quant=False, weight_quant=True, **kwargs)
        assert kv > wt


def test_hardware_spec_validation():
    with pytest.raises(ConfigError):
        rl.HardwareSpec(name="x", peak_flops=0.0, peak_bw=1.0, vram_bytes=1.0)


def test_dims_preset_lookup():
    assert rl.dims_preset("llama2-7b") is rl.LLAMA2_7B
    with pytest.raises(ConfigError):
        rl.dims_preset("nope")
