"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import hashlib
import json
import time

import numpy as np
from scipy import stats

from conftest import TOY_CONFIG, make_prompt
from quantspec import roofline as rl
from quantspec.cache import CacheLayout, HierarchicalKVCache
from quantspec.cli import default_hardware_path, main as cli_main
from quantspec.model import chunked_attention, init_weights
from quantspec.quant import (
    dequant_group_draft,
    dequant_group_target,
    hierarchical_encode,
)
from quantspec.specdec import (
    SpecConfig,
    SpeculativeDecoder,
    autoregressive_decode,
    sample_index,
    speculative_sample_step,
)

G = 16  # toy-scale cache group size (= head_dim, an explicitly supported choice)


def report(num: int, name: str, ok: bool, elapsed: float, budget: float) -> None:
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[acceptance] criterion {num} ({name}): {status} ({elapsed:.2f}s / budget {budget:.0f}s)")
    assert ok, f"criterion {num} ({name}) failed"
    assert elapsed < budget, f"criterion {num} exceeded its {budget}s budget ({elapsed:.2f}s)"


def test_criterion_1_hierarchical_algebra():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    identity_ok = True
    strict = 0
    nondegenerate = 0
    for _ in range(1000):
        size = int(rng.integers(8, 129))
        group = rng.standard_normal(size) * rng.uniform(0.05, 8.0) + rng.uniform(-3, 3)
        (uc, up), (lc, lp) = hierarchical_encode(group)
        recon = dequant_group_target(uc, up, lc, lp)
        combined = (16.0 * uc.astype(np.float64) + lc.astype(np.float64)) * (
            up.scale / 16.0
        ) + up.zero_point
        if np.abs(recon - combined).max() > 1e-7:
            identity_ok = False
        draft_mae = np.abs(group - dequant_group_draft(uc, up)).mean()
        target_mae = np.abs(group - recon).mean()
        if target_mae > draft_mae + 1e-12:
            identity_ok = False
        if draft_mae > 0:
            nondegenerate += 1
            if target_mae < draft_mae:
                strict += 1
    ok = identity_ok and strict >= 0.99 * nondegenerate
    report(1, "hierarchical algebra", ok, time.perf_counter() - start, 5.0)


def test_criterion_2_error_bounds():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    ok = True
    for _ in range(1000):
        size = int(rng.integers(8, 129))
        group = rng.standard_normal(size) * rng.uniform(0.05, 8.0)
        (uc, up), (lc, lp) = hierarchical_encode(group)
        draft_err = np.abs(group - dequant_group_draft(uc, up))
        if draft_err.max() > up.scale / 2 + 1e-6:
            ok = False
        target_err = np.abs(group - dequant_group_target(uc, up, lc, lp))
        residual = group - dequant_group_draft(uc, up)
        unclamped = np.round(residual / lp.scale) <= 7  # only high-side clamping exists
        if np.any(target_err[unclamped] > up.scale / 32 + 1e-6):
            ok = False
    report(2, "error bounds", ok, time.perf_counter() - start, 5.0)


def test_criterion_3_greedy_losslessness():
    start = time.perf_counter()
    weights = init_weights(TOY_CONFIG, seed=7)
    ok = True
    for i in range(50):
        prompt = make_prompt(80, seed=1000 + i)
        oracle = autoregressive_decode(weights, prompt, 90, group_size=G)
        for gamma in (1, 2, 4, 6):
            spec = SpecConfig(gamma=gamma, decode_len=90)
            res = SpeculativeDecoder(weights, spec, group_size=G).run(prompt)
            if res.tokens != oracle:
                ok = False
    report(3, "greedy losslessness", ok, time.perf_counter() - start, 120.0)


def test_criterion_4_stochastic_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    p = np.array([0.22, 0.05, 0.13, 0.02, 0.3, 0.08, 0.12, 0.08])
    q = np.array([0.05, 0.25, 0.05, 0.15, 0.1, 0.2, 0.1, 0.1])
    n = 100_000
    counts = np.zeros(8, dtype=np.int64)
    for _ in range(n):
        g = sample_index(q, rng)
        token, _ = speculative_sample_step(p, q, g, rng)
        counts[token] += 1
    pvalue = stats.chisquare(counts, f_exp=p * n).pvalue
    report(4, "stochastic correctness", pvalue > 0.01, time.perf_counter() - start, 30.0)


def test_criterion_5_buffer_state_machine():
    start = time.perf_counter()
    g = 8
    layout = CacheLayout(num_layers=1, num_heads=1, head_dim=4, group_size=g)
    kv = layout.kv_dim
    rng = np.random.default_rng(55)

    def row(idx: int) -> np.ndarray:
        return np.full(kv, float(idx), dtype=np.float32)

    prefill_n = 3 * g - 2
    keys = [np.stack([row(i) for i in range(prefill_n)])]
    vals = [np.stack([-row(i) for i in range(prefill_n)])]
    cache = HierarchicalKVCache.from_prefill(layout, keys, vals)
    shadow = list(range(prefill_n))
    next_idx = prefill_n
    ok = True

    def check_views() -> bool:
        k, v = cache.target_view(0).concat()
        idx = np.asarray(shadow, dtype=np.float64)
        # keys carry the token index; per-channel groups of g consecutive
        # tokens keep the reconstruction within S/2 < 0.5
        if not np.array_equal(np.round(k.mean(axis=1)), idx):
            return False
        if not np.array_equal(np.round(-v.mean(axis=1)), idx):
            return False
        # the fp region is bit-exact
        n_fp = cache.fp_token_count
        return bool(np.all(k[-n_fp:] == np.asarray(idx[-n_fp:], np.float32)[:, None]))

    for step in range(10_000):
        gamma_req = int(rng.integers(1, g + 1))  # random gamma <= G
        gamma_step = max(0, min(gamma_req, cache.fp2_space() - 1))
        appended = 0
        # draft appends, then verify rollback + re-append + bonus forward,
        # mirroring the engine's buffer choreography
        for _ in range(gamma_step):
            cache.append_decode_token(0, row(next_idx + appended), -row(next_idx + appended))
            appended += 1
        cache.rollback(gamma_step)
        for j in range(gamma_step + 1):
            cache.append_decode_token(0, row(next_idx + j), -row(next_idx + j))
        v = int(rng.integers(0, gamma_step + 1)) if gamma_step else 0  # random rejection point
        reject = gamma_step - v
        cache.rollback(reject)
        shadow.extend(range(next_idx, next_idx + gamma_step + 1 - reject))
        next_idx += gamma_step + 1 - reject
        cache.flush_if_full()
        if not (g <= cache.fp_token_count <= 2 * g):
            ok = False
        if cache.quantized_token_count % g != 0:
            ok = False
        if cache.seq_len != len(shadow):
            ok = False
        if step % 500 == 0 and not check_views():
            ok = False
    ok = ok and check_views()
    report(5, "buffer state machine", ok, time.perf_counter() - start, 60.0)


def test_criterion_6_chunked_attention():
    start = time.perf_counter()
    rng = np.random.default_rng(66)
    dim = 32
    n = 512
    q = rng.standard_normal(dim).astype(np.float32)
    k = rng.standard_normal((n, dim)).astype(np.float32)
    v = rng.standard_normal((n, dim)).astype(np.float32)
    scale = 1.0 / np.sqrt(dim)
    scores = (k.astype(np.float64) @ q.astype(np.float64)) * scale
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    want = (w @ v.astype(np.float64)).astype(np.float32)
    ok = True
    for _ in range(200):
        n_cuts = int(rng.integers(0, 8))
        cuts = np.sort(rng.choice(np.arange(1, n), size=n_cuts, replace=False)) if n_cuts else []
        chunks = []
        prev = 0
        for c in list(cuts) + [n]:
            chunks.append((k[prev:c], v[prev:c]))
            prev = c
        got = chunked_attention(q, chunks)
        if np.abs(got - want).max() > 1e-5:
            ok = False
    report(6, "chunked attention", ok, time.perf_counter() - start, 30.0)


def test_criterion_7_roofline():
    start = time.perf_counter()
    hw = rl.HardwareSpec.from_json(default_hardware_path())
    dims = rl.LLAMA2_7B
    d = dims.hidden

    # (a) decode aggregate intensity flat in context length
    decode_int = [
        rl.count_decode(rl.WorkloadPoint(batch=1, context_len=s), dims).aggregate.intensity
        for s in (64 * d, 128 * d, 256 * d)
    ]
    ok_a = (max(decode_int) - min(decode_int)) / min(decode_int) < 0.05

    # (b) attention intensity invariant across batch doublings
    ok_b = True
    for phase in (rl.count_prefill, rl.count_decode):
        vals = [
            phase(rl.WorkloadPoint(batch=b, context_len=8192), dims).attention.intensity
            for b in (1, 2, 4, 8, 16, 32, 64, 128, 256)
        ]
        if (max(vals) - min(vals)) / min(vals) >= 0.01:
            ok_b = False

    # (c) full decode grid memory-bound, full prefill grid compute-bound
    ok_c = True
    for b in (1, 2, 4, 8, 16, 32, 64, 128, 256):
        for s in (1024, 4096, 16384, 65536, 262144):
            w = rl.WorkloadPoint(batch=b, context_len=s)
            if rl.classify(rl.count_decode(w, dims).aggregate, hw).bound != "memory":
                ok_c = False
            if rl.classify(rl.count_prefill(w, dims).aggregate, hw).bound != "compute":
                ok_c = False

    # (d) KV/weights byte ratio at (B=16, S=262144, fp16)
    ratio = rl.kv_memory_sweep([16], [262144], dims, hw)[0].ratio
    ok_d = abs(ratio - 160.0) / 160.0 <= 0.15

    report(7, "roofline", ok_a and ok_b and ok_c and ok_d, time.perf_counter() - start, 10.0)


def test_criterion_8_byte_reduction_mechanism():
    start = time.perf_counter()
    weights = init_weights(TOY_CONFIG, seed=7)
    prompt = make_prompt(6 * G, seed=88)  # leaves a quantized region behind
    spec = SpecConfig(gamma=4, decode_len=40)
    res = SpeculativeDecoder(weights, spec, group_size=G).run(prompt)
    ok = False
    for s in res.trace.steps:
        n_d = len(s.drafted)
        if not n_d or not s.quantized_elements:
            continue
        # per-forward quantized-code bytes; params are tracked separately
        draft = s.draft_quantized_bytes / n_d
        target = s.target_quantized_bytes / (n_d + 1)
        fp16_ref = 2.0 * s.quantized_elements / (n_d + 1)
        if draft == 0:
            continue
        r1 = target / draft
        r2 = fp16_ref / draft
        if abs(r1 - 2.0) <= 0.2 and abs(r2 - 4.0) <= 0.4:
            ok = True
        else:
            ok = False
            break
    report(8, "byte-reduction mechanism", ok, time.perf_counter() - start, 30.0)


def test_criterion_9_cost_model_regime_trends():
    start = time.perf_counter()
    hw = rl.HardwareSpec.from_json(default_hardware_path())
    dims = rl.LLAMA2_7B
    d = dims.hidden
    alpha, gamma = 0.9, 4

    def speedups(context_len):
        kv = rl.modeled_ablation_speedup(
            alpha, gamma, dims=dims, batch=1, context_len=context_len, hw=hw,
            kv_quant=True, weight_quant=False,
        )
        wt = rl.modeled_ablation_speedup(
            alpha, gamma, dims=dims, batch=1, context_len=context_len, hw=hw,
            kv_quant=False, weight_quant=True,
        )
        return kv, wt

    kv_short, wt_short = speedups(d // 8)
    kv_long, wt_long = speedups(128 * d)
    ok = wt_short > kv_short and kv_long > wt_long
    report(9, "cost-model regime trends", ok, time.perf_counter() - start, 5.0)


def test_criterion_10_cli_determinism(tmp_path):
    start = time.perf_counter()
    cfg = {
        "seed": 17,
        "model": {
            "num_layers": 2,
            "num_heads": 2,
            "head_dim": 8,
            "mlp_hidden": 48,
            "vocab": 32,
            "max_positions": 512,
        },
        "prompt": {"length": 40},
        "spec": {"gamma": 3, "decode_len": 12, "sampling": "stochastic", "temperature": 0.9},
        "quant": {"kv_quant": True, "weight_quant": True, "group_size": 8},
        "roofline": {"batches": [1, 8], "context_lens": [1024, 65536], "phases": ["prefill", "decode"]},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    ok = True
    for command, extra in (
        ("run", []),
        ("gamma-sweep", ["--gamma", "1,3"]),
        ("ablate", []),
        ("roofline", []),
        ("gen-model", []),
    ):
        digests = []
        for tag in ("a", "b"):
            out = tmp_path / f"{command}-{tag}"
            code = cli_main(
                [command, "--config", str(cfg_path), "--out", str(out), *extra]
            )
            if code != 0:
                ok = False
            payload = b""
            for f in sorted(out.iterdir()):
                data = f.read_bytes()
                if f.name == "manifest.json":
                    data = data.replace(str(out).encode(), b"OUT")
                payload += f.name.encode() + b"\x00" + data
            digests.append(hashlib.sha256(payload).hexdigest())
        if digests[0] != digests[1]:
            ok = False
    report(10, "CLI determinism", ok, time.perf_counter() - start, 120.0)
