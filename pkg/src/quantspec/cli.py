"""Experiment harness: run | gamma-sweep | ablate | roofline | gen-model.

Every command resolves a configuration (defaults <- JSON config file <-
command-line flags), writes a manifest copy of the resolved configuration
next to its outputs, and is byte-deterministic under a fixed seed.  Log
verbosity comes from the QUANTSPEC_LOG environment variable (error, info or
debug).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import roofline
from .errors import QuantSpecError
from .model import ModelConfig, init_weights, load_weights, save_weights
from .specdec import Metrics, RunResult, SpecConfig, SpeculativeDecoder

log = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# group size 128 gives the full-precision region its default 2*128 = 256
# token capacity; the 384-token default prompt leaves two quantized blocks
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/out",
    "model": {
        "num_layers": 2,
        "num_heads": 4,
        "head_dim": 16,
        "mlp_hidden": 176,
        "vocab": 64,
        "max_positions": 2048,
    },
    "weights_path": None,
    "prompt": {"length": 384},
    "spec": {"gamma": 4, "decode_len": 90, "sampling": "greedy", "temperature": 1.0},
    "quant": {
        "kv_quant": True,
        "weight_quant": False,
        "group_size": 128,
        "weight_group_size": 32,
        "sensitive_layers": [],
    },
    "hardware": None,
    "cost_model": {"batch": 1, "context_len": 32768, "dims": "llama2-7b"},
    "roofline": {
        "batches": [1, 4, 16, 64, 256],
        "context_lens": [1024, 4096, 16384, 65536, 262144],
        "phases": ["prefill", "decode"],
    },
}

ABLATION_MODES = (
    ("neither", False, False),
    ("kv_only", True, False),
    ("weight_only", False, True),
    ("both", True, True),
)


def setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("QUANTSPEC_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def default_hardware_path() -> Path:
    return Path(str(resources.files("quantspec").joinpath("configs/a6000.json")))


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = _deep_merge(cfg, json.load(f))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    if getattr(args, "context_len", None) is not None:
        cfg["prompt"]["length"] = args.context_len
    if getattr(args, "gamma", None) is not None and not isinstance(args.gamma, list):
        cfg["spec"]["gamma"] = args.gamma
    if getattr(args, "kv_quant", None) is not None:
        cfg["quant"]["kv_quant"] = args.kv_quant
    if getattr(args, "weight_quant", None) is not None:
        cfg["quant"]["weight_quant"] = args.weight_quant
    if getattr(args, "hardware", None):
        cfg["hardware"] = args.hardware
    return cfg


def _load_hardware(cfg: dict) -> roofline.HardwareSpec:
    path = cfg.get("hardware") or default_hardware_path()
    return roofline.HardwareSpec.from_json(path)


def _build_weights(cfg: dict):
    if cfg.get("weights_path"):
        return load_weights(cfg["weights_path"])
    m = cfg["model"]
    config = ModelConfig(
        num_layers=m["num_layers"],
        num_heads=m["num_heads"],
        head_dim=m["head_dim"],
        hidden=m["num_heads"] * m["head_dim"],
        mlp_hidden=m["mlp_hidden"],
        vocab=m["vocab"],
        max_positions=m["max_positions"],
    )
    # model init uses its own stream so prompt/sampling seeds stay independent
    return init_weights(config, seed=m.get("init_seed", cfg["seed"] + 2))


def _build_prompt(cfg: dict, vocab: int) -> np.ndarray:
    p = cfg["prompt"]
    rng = np.random.default_rng(p.get("seed", cfg["seed"] + 1))
    return rng.integers(0, vocab, size=int(p["length"]), dtype=np.int64)


def _spec_config(cfg: dict) -> SpecConfig:
    s, q = cfg["spec"], cfg["quant"]
    return SpecConfig(
        gamma=int(s["gamma"]),
        decode_len=int(s["decode_len"]),
        sampling=s.get("sampling", "greedy"),
        temperature=float(s.get("temperature", 1.0)),
        seed=int(cfg["seed"]),
        weight_mode="int4" if q["weight_quant"] else "fp",
    )


def _run_engine(cfg: dict) -> RunResult:
    weights = _build_weights(cfg)
    prompt = _build_prompt(cfg, weights.config.vocab)
    q = cfg["quant"]
    engine = SpeculativeDecoder(
        weights,
        _spec_config(cfg),
        kv_quant=bool(q["kv_quant"]),
        group_size=int(q["group_size"]),
        sensitive_layers=frozenset(q.get("sensitive_layers", [])),
        weight_group_size=int(q.get("weight_group_size", 32)),
    )
    return engine.run(prompt)


def _fill_modeled_speedup(cfg: dict, metrics: Metrics, hw: roofline.HardwareSpec) -> None:
    cm = cfg["cost_model"]
    dims = roofline.dims_preset(cm["dims"]) if isinstance(cm["dims"], str) else roofline.ModelDims(**cm["dims"])
    q = cfg["quant"]
    metrics.modeled_speedup = roofline.modeled_ablation_speedup(
        metrics.acceptance_rate,
        int(cfg["spec"]["gamma"]),
        dims=dims,
        batch=int(cm["batch"]),
        context_len=int(cm["context_len"]),
        hw=hw,
        kv_quant=bool(q["kv_quant"]),
        weight_quant=bool(q["weight_quant"]),
    )


def _write_manifest(out_dir: Path, cfg: dict) -> None:
    manifest = copy.deepcopy(cfg)
    manifest["hardware"] = str(cfg.get("hardware") or default_hardware_path())
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _csv_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_csv_value(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

METRICS_HEADER = [
    "acceptance_rate",
    "mean_tokens_per_verification",
    "modeled_speedup",
    "peak_cache_bytes",
    "drafted_tokens",
    "accepted_tokens",
    "verification_steps",
    "emitted_tokens",
]


def _metrics_row(m: Metrics) -> list:
    return [
        m.acceptance_rate,
        m.mean_tokens_per_verification,
        m.modeled_speedup if m.modeled_speedup is not None else "",
        m.peak_cache_bytes,
        m.drafted_tokens,
        m.accepted_tokens,
        m.verification_steps,
        m.emitted_tokens,
    ]


def cmd_run(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    hw = _load_hardware(cfg)
    result = _run_engine(cfg)
    _fill_modeled_speedup(cfg, result.metrics, hw)
    _write_manifest(out_dir, cfg)
    _write_csv(out_dir / "metrics.csv", METRICS_HEADER, [_metrics_row(result.metrics)])
    (out_dir / "trace.ndjson").write_text(result.trace.to_ndjson(), encoding="utf-8")
    (out_dir / "tokens.txt").write_text(" ".join(map(str, result.tokens)) + "\n", encoding="utf-8")
    log.info("run finished: acceptance=%.4f", result.metrics.acceptance_rate)
    return 0


def cmd_gamma_sweep(cfg: dict, gammas: list[int]) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    hw = _load_hardware(cfg)
    seen = sorted(set(int(g) for g in gammas))
    rows = []
    for gamma in seen:
        sub = copy.deepcopy(cfg)
        sub["spec"]["gamma"] = gamma
        result = _run_engine(sub)
        _fill_modeled_speedup(sub, result.metrics, hw)
        rows.append([gamma, result.metrics.acceptance_rate, result.metrics.modeled_speedup])
    best = max(range(len(rows)), key=lambda i: rows[i][2])
    table = [row + [1 if i == best else 0] for i, row in enumerate(rows)]
    _write_manifest(out_dir, cfg)
    _write_csv(out_dir / "gamma_sweep.csv", ["gamma", "acceptance_rate", "modeled_speedup", "best"], table)
    return 0


def cmd_ablate(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    hw = _load_hardware(cfg)
    rows = []
    for label, kv_q, w_q in ABLATION_MODES:
        sub = copy.deepcopy(cfg)
        sub["quant"]["kv_quant"] = kv_q
        sub["quant"]["weight_quant"] = w_q
        result = _run_engine(sub)
        _fill_modeled_speedup(sub, result.metrics, hw)
        rows.append([label, kv_q, w_q, result.metrics.acceptance_rate, result.metrics.modeled_speedup])
    _write_manifest(out_dir, cfg)
    _write_csv(
        out_dir / "ablate.csv",
        ["mode", "kv_quant", "weight_quant", "acceptance_rate", "modeled_speedup"],
        rows,
    )
    return 0


def cmd_roofline(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    hw = _load_hardware(cfg)
    cm = cfg["cost_model"]
    dims = roofline.dims_preset(cm["dims"]) if isinstance(cm["dims"], str) else roofline.ModelDims(**cm["dims"])
    grid = cfg["roofline"]
    rows = []
    for phase in grid["phases"]:
        counter = roofline.count_prefill if phase == "prefill" else roofline.count_decode
        for b in grid["batches"]:
            for s in grid["context_lens"]:
                counts = counter(roofline.WorkloadPoint(batch=int(b), context_len=int(s)), dims)
                frac = roofline.attention_latency_fraction(counts, hw)
                for component, point in (
                    ("linear", counts.linear),
                    ("attention", counts.attention),
                    ("aggregate", counts.aggregate),
                ):
                    cls = roofline.classify(point, hw)
                    rows.append(
                        [
                            phase,
                            int(b),
                            int(s),
                            component,
                            point.flops,
                            point.mops,
                            point.intensity,
                            cls.bound,
                            frac if component == "aggregate" else "",
                        ]
                    )
    _write_manifest(out_dir, cfg)
    _write_csv(
        out_dir / "roofline.csv",
        ["phase", "B", "S_L", "component", "flops", "mops", "intensity", "bound", "attention_fraction"],
        rows,
    )
    return 0


def cmd_gen_model(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = _build_weights(cfg)
    _write_manifest(out_dir, cfg)
    save_weights(out_dir / "model.qspw", weights)
    log.info("wrote %s", out_dir / "model.qspw")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _bool_flag(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--context-len", dest="context_len", type=int, default=None)
    p.add_argument("--hardware", type=str, default=None, help="hardware spec JSON")
    p.add_argument("--kv-quant", dest="kv_quant", type=_bool_flag, default=None)
    p.add_argument("--weight-quant", dest="weight_quant", type=_bool_flag, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantspec",
        description="Speculative-decoding experiments with a hierarchical 4-bit KV cache",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one speculative decode experiment")
    _add_common(p_run)
    p_run.add_argument("--gamma", type=int, default=None)

    p_sweep = sub.add_parser("gamma-sweep", help="repeat the experiment over a gamma list")
    _add_common(p_sweep)
    p_sweep.add_argument("--gamma", type=str, default="1,2,4,6", help="comma-separated list")

    p_abl = sub.add_parser("ablate", help="kv-only / weight-only / both / neither")
    _add_common(p_abl)

    p_roof = sub.add_parser("roofline", help="intensity grid CSV")
    _add_common(p_roof)

    p_gen = sub.add_parser("gen-model", help="write seeded random weights")
    _add_common(p_gen)

    return parser


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gamma-sweep":
            gammas = [int(tok) for tok in str(args.gamma).split(",") if tok.strip()]
            args.gamma = None
            cfg = resolve_config(args)
            return cmd_gamma_sweep(cfg, gammas)
        cfg = resolve_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "roofline":
            return cmd_roofline(cfg)
        if args.command == "gen-model":
            return cmd_gen_model(cfg)
        parser.error(f"unknown command {args.command!r}")
    except (QuantSpecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
