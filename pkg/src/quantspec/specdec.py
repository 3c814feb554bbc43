"""The draft/verify/correct loop.

A single model plays both roles: the draft decodes against the coarse
4-bit cache view (optionally with INT4 weights) and the target verifies
against the two-plane view with full-precision weights.  Each cycle drafts
up to gamma tokens, re-runs them through the target (which also rewrites
their buffered K/V), accepts a prefix, corrects or appends a bonus token,
rolls back the rejected suffix, and flushes the recent-token buffer when it
fills.

Under greedy selection the emitted sequence is token-identical to plain
autoregressive decoding with the target view: every target forward sees
exactly the cache partition an autoregressive run would produce at the same
position.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cache import FpKVCache, HierarchicalKVCache
from .errors import ConfigError, DataError
from .model import ModelWeights, QuantizedModelWeights, StepCost, decode_step, prefill, quantize_model_weights

log = logging.getLogger(__name__)

GREEDY = "greedy"
STOCHASTIC = "stochastic"

RESIDUAL_EPS = 1e-12


@dataclass(frozen=True)
class SpecConfig:
    """Knobs of one speculative decode session."""

    gamma: int
    decode_len: int
    sampling: str = GREEDY
    temperature: float = 1.0
    seed: int = 0
    weight_mode: str = "fp"  # draft weights: "fp" | "int4"

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.decode_len < 1:
            raise ConfigError(f"decode length must be >= 1, got {self.decode_len}")
        if self.sampling not in (GREEDY, STOCHASTIC):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.sampling == STOCHASTIC and self.temperature <= 0:
            raise ConfigError("stochastic sampling needs a positive temperature")
        if self.weight_mode not in ("fp", "int4"):
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")


@dataclass
class StepRecord:
    """One draft/verify cycle."""

    step: int
    drafted: list[int]
    accept_flags: list[bool]
    corrected: int | None
    bonus: int | None
    flushed: bool
    draft_bytes: float
    target_bytes: float
    draft_quantized_bytes: float
    target_quantized_bytes: float
    quantized_elements: int
    draft_flops: float
    target_flops: float
    emitted: list[int]

    @property
    def accepted(self) -> int:
        return sum(self.accept_flags)

    def to_json_obj(self) -> dict:
        return {
            "step": self.step,
            "drafted": self.drafted,
            "accepted": self.accepted,
            "corrected": self.corrected,
            "bonus": self.bonus,
            "flushed": self.flushed,
            "draft_bytes": self.draft_bytes,
            "target_bytes": self.target_bytes,
        }


@dataclass
class SpecDecodeTrace:
    steps: list[StepRecord] = field(default_factory=list)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(s.to_json_obj(), sort_keys=True) + "\n" for s in self.steps)

    @property
    def emitted_tokens(self) -> int:
        return sum(len(s.emitted) for s in self.steps)


@dataclass
class Metrics:
    acceptance_rate: float
    mean_tokens_per_verification: float
    drafted_tokens: int
    accepted_tokens: int
    verification_steps: int
    emitted_tokens: int
    peak_cache_bytes: float = 0.0
    modeled_speedup: float | None = None


@dataclass
class RunResult:
    tokens: list[int]
    trace: SpecDecodeTrace
    metrics: Metrics


# ---------------------------------------------------------------------------
# Sampling primitives
# ---------------------------------------------------------------------------


def softmax_probs(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Float64 probabilities of logits/temperature."""
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; deterministic under a fixed generator state."""
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    return int(np.searchsorted(cum, u, side="right").clip(0, probs.size - 1))


def speculative_sample_step(
    p: np.ndarray, q: np.ndarray, draft_token: int, rng: np.random.Generator
) -> tuple[int, bool]:
    """Accept/correct one drafted token so the emitted token follows ``p``.

    Accepts with probability min(1, p[g]/q[g]); on rejection samples from
    the normalized positive part of p - q.  A zero-mass residual (p == q at
    the rejection point) falls back to sampling from p directly.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    qg = q[draft_token]
    accept_prob = min(1.0, p[draft_token] / qg) if qg > 0.0 else 0.0
    if rng.random() < accept_prob:
        return draft_token, True
    residual = np.maximum(p - q, 0.0)
    mass = residual.sum()
    if mass <= RESIDUAL_EPS:
        log.debug("zero-mass residual at rejection; sampling the target distribution directly")
        return sample_index(p, rng), False
    return sample_index(residual / mass, rng), False


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class SpeculativeDecoder:
    """One decode session: weights, quantization toggles, RNG and trace.

    Sessions are independent; nothing is shared between instances.
    """

    def __init__(
        self,
        weights: ModelWeights,
        spec: SpecConfig,
        *,
        kv_quant: bool = True,
        group_size: int = 128,
        sensitive_layers: frozenset[int] = frozenset(),
        weight_group_size: int = 32,
    ):
        self.weights = weights
        self.spec = spec
        self.kv_quant = kv_quant
        self.group_size = group_size
        self.sensitive_layers = frozenset(sensitive_layers)
        if kv_quant and spec.gamma > group_size:
            raise ConfigError(
                f"gamma ({spec.gamma}) must not exceed the cache group size ({group_size})"
            )
        self.draft_weights: QuantizedModelWeights | None = None
        if spec.weight_mode == "int4":
            self.draft_weights = quantize_model_weights(weights, weight_group_size)

    # -- sampling ----------------------------------------------------------

    def _select(self, logits: np.ndarray, rng: np.random.Generator) -> int:
        if self.spec.sampling == GREEDY:
            return int(np.argmax(logits))
        return sample_index(softmax_probs(logits, self.spec.temperature), rng)

    # -- phases ------------------------------------------------------------

    def _draft_step(self, cache, token: int) -> tuple[np.ndarray, StepCost]:
        # on an FpKVCache the draft view is plain float32 storage, so the
        # lossless configuration runs through the very same path
        return decode_step(
            self.weights,
            token,
            cache,
            view="draft",
            weight_mode=self.spec.weight_mode,
            draft_weights=self.draft_weights,
        )

    def _target_step(self, cache, token: int) -> tuple[np.ndarray, StepCost]:
        return decode_step(self.weights, token, cache, view="target", weight_mode="fp")

    def draft_phase(
        self, cache, pending: int, gamma_step: int, rng: np.random.Generator
    ) -> tuple[list[int], list[np.ndarray], StepCost]:
        """Draft ``gamma_step`` tokens starting after ``pending``.

        Feeds pending plus the first gamma_step-1 drafts, so the buffer
        gains gamma_step provisional rows.
        """
        cost = StepCost()
        drafts: list[int] = []
        logits_list: list[np.ndarray] = []
        token = pending
        for _ in range(gamma_step):
            logits, c = self._draft_step(cache, token)
            cost.add(c)
            g = self._select(logits, rng)
            drafts.append(g)
            logits_list.append(logits)
            token = g
        return drafts, logits_list, cost

    def verify_phase(
        self,
        cache,
        pending: int,
        drafts: list[int],
        draft_logits: list[np.ndarray],
        rng: np.random.Generator,
    ) -> tuple[list[bool], int | None, int | None, StepCost]:
        """Target pass over pending + drafts; returns flags and the extra token.

        The provisional draft-written K/V rows are dropped and re-appended
        with target-computed values, then the rejected suffix is rolled
        back.  Returns (accept_flags, corrected, bonus, cost).
        """
        gamma_step = len(drafts)
        cache.rollback(gamma_step)  # drop the draft's provisional rows
        cost = StepCost()
        target_logits: list[np.ndarray] = []
        for token in [pending, *drafts]:
            logits, c = self._target_step(cache, token)
            cost.add(c)
            target_logits.append(logits)
        # target_logits[i] is the distribution for the position of drafts[i];
        # the final entry is the bonus position
        accept_flags: list[bool] = []
        corrected: int | None = None
        bonus: int | None = None
        for i, g in enumerate(drafts):
            if self.spec.sampling == GREEDY:
                ok = g == int(np.argmax(target_logits[i]))
                if ok:
                    accept_flags.append(True)
                    continue
                corrected = int(np.argmax(target_logits[i]))
            else:
                p = softmax_probs(target_logits[i], self.spec.temperature)
                q = softmax_probs(draft_logits[i], self.spec.temperature)
                token, ok = speculative_sample_step(p, q, g, rng)
                if ok:
                    accept_flags.append(True)
                    continue
                corrected = token
            accept_flags.append(False)
            break
        v = sum(accept_flags)
        if corrected is None:
            bonus = self._select(target_logits[gamma_step], rng)
        cache.rollback(gamma_step - v)
        return accept_flags, corrected, bonus, cost

    # -- full loop -----------------------------------------------------------

    def _prefill(self, prompt) -> tuple[np.ndarray, FpKVCache | HierarchicalKVCache]:
        mode = "hierarchical" if self.kv_quant else "fp"
        return prefill(
            self.weights,
            prompt,
            mode,
            group_size=self.group_size,
            sensitive_layers=self.sensitive_layers,
        )

    def run(self, prompt) -> RunResult:
        """Generate ``decode_len`` tokens after the prompt.

        The first token comes from the prefill logits; the rest from
        draft/verify cycles.  Deterministic under a fixed config seed.
        """
        spec = self.spec
        rng = np.random.default_rng(spec.seed)
        logits, cache = self._prefill(prompt)
        first = self._select(logits, rng)
        emitted: list[int] = [first]
        pending = first
        trace = SpecDecodeTrace()
        step_idx = 0

        while len(emitted) < spec.decode_len:
            remaining = spec.decode_len - len(emitted)
            # the verify pass appends gamma_step+1 rows (drafted positions
            # plus the bonus forward), so leave one slot of headroom
            gamma_step = min(spec.gamma, cache.fp2_space() - 1, remaining)
            gamma_step = max(gamma_step, 0)
            if gamma_step == 0:
                logits, cost = self._target_step(cache, pending)
                token = self._select(logits, rng)
                record = StepRecord(
                    step=step_idx,
                    drafted=[],
                    accept_flags=[],
                    corrected=token,
                    bonus=None,
                    flushed=cache.flush_if_full(),
                    draft_bytes=0.0,
                    target_bytes=cost.total_bytes,
                    draft_quantized_bytes=0.0,
                    target_quantized_bytes=cost.kv_quantized_bytes,
                    quantized_elements=cost.kv_quantized_elements,
                    draft_flops=0.0,
                    target_flops=cost.flops,
                    emitted=[token],
                )
                emitted.append(token)
                pending = token
            else:
                drafts, draft_logits, dcost = self.draft_phase(cache, pending, gamma_step, rng)
                flags, corrected, bonus, tcost = self.verify_phase(
                    cache, pending, drafts, draft_logits, rng
                )
                v = sum(flags)
                step_tokens = drafts[:v] + ([corrected] if corrected is not None else [bonus])
                step_tokens = step_tokens[:remaining]
                record = StepRecord(
                    step=step_idx,
                    drafted=drafts,
                    accept_flags=flags,
                    corrected=corrected,
                    bonus=bonus,
                    flushed=cache.flush_if_full(),
                    draft_bytes=dcost.total_bytes,
                    target_bytes=tcost.total_bytes,
                    draft_quantized_bytes=dcost.kv_quantized_bytes,
                    target_quantized_bytes=tcost.kv_quantized_bytes,
                    quantized_elements=tcost.kv_quantized_elements,
                    draft_flops=dcost.flops,
                    target_flops=tcost.flops,
                    emitted=step_tokens,
                )
                emitted.extend(step_tokens)
                pending = corrected if corrected is not None else bonus
            trace.steps.append(record)
            step_idx += 1

        drafted = sum(len(s.drafted) for s in trace.steps)
        accepted = sum(s.accepted for s in trace.steps)
        per_step = [len(s.emitted) for s in trace.steps]
        metrics = Metrics(
            acceptance_rate=accepted / drafted if drafted else 1.0,
            mean_tokens_per_verification=float(np.mean(per_step)) if per_step else 0.0,
            drafted_tokens=drafted,
            accepted_tokens=accepted,
            verification_steps=len(trace.steps),
            emitted_tokens=len(emitted),
            peak_cache_bytes=cache.memory_report().total,
        )
        return RunResult(tokens=emitted, trace=trace, metrics=metrics)


def autoregressive_decode(
    weights: ModelWeights,
    prompt,
    decode_len: int,
    *,
    kv_quant: bool = True,
    group_size: int = 128,
    sensitive_layers: frozenset[int] = frozenset(),
    sampling: str = GREEDY,
    temperature: float = 1.0,
    seed: int = 0,
) -> list[int]:
    """Plain one-token-at-a-time decoding with the target-view cache.

    This is the reference the speculative loop must match token-for-token
    under greedy selection.
    """
    mode = "hierarchical" if kv_quant else "fp"
    logits, cache = prefill(
        weights, prompt, mode, group_size=group_size, sensitive_layers=sensitive_layers
    )
    rng = np.random.default_rng(seed)

    def select(lg):
        if sampling == GREEDY:
            return int(np.argmax(lg))
        return sample_index(softmax_probs(lg, temperature), rng)

    out = [select(logits)]
    view = "target" if kv_quant else "fp"
    while len(out) < decode_len:
        logits, _ = decode_step(weights, out[-1], cache, view=view)
        cache.flush_if_full()
        out.append(select(logits))
    return out
