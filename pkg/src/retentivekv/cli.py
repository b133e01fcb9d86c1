"""Command-line front end: flat-file configs, experiment commands, reports.

Config files are plain `key = value` lines with `#` comments. The manifest
written next to every run's outputs is itself a valid config (header lines
are comments), so any output directory can be reproduced byte for byte with
`retentivekv <command> --config <out>/manifest.txt --out NEWDIR`.
"""

from __future__ import annotations

import argparse
import difflib
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, RetentiveKVError
from .harness import (
    WorkloadConfig,
    ablation_run,
    budget_sweep,
    calibrate_gate,
    entropy_shift_report,
    generate,
    run_episode,
)
from .kv_cache import Modality
from .numerics import RngStream
from .policies import AblationFlags, Budget, PolicyConfig, PolicyKind
from .retrieval import GateParams
from .state_space import StateMatrix

_WORKLOAD_KEYS = {
    "workload.d": ("d", int),
    "workload.grid_rows": ("grid_rows", int),
    "workload.grid_cols": ("grid_cols", int),
    "workload.images": ("images", int),
    "workload.text_len": ("text_len", int),
    "workload.decode_steps": ("decode_steps", int),
    "workload.planted": ("planted", int),
    "workload.defer_until": ("defer_until", int),
    "workload.seed": ("seed", int),
    "workload.layers": ("layers", int),
    "workload.salient": ("salient", int),
}

_POLICY_FIELDS = {
    "kind": str,
    "budget": float,
    "window": int,
    "sinks": int,
    "pool": int,
    "lambda": float,
    "tau_quantile": float,
    "gate_w": float,
    "gate_b": float,
    "em": bool,
    "ma": bool,
    "qr": bool,
}

_KIND_NAMES = {k.value: k for k in PolicyKind}

_REQUIRED_KEYS = ("workload.d", "workload.seed")


@dataclass
class ParsedConfig:
    workload: WorkloadConfig
    policies: list[PolicyConfig]
    sweep_budgets: list[float]
    seeds: list[int]


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _coerce(raw: str, typ, key: str, line_no: int):
    try:
        if typ is bool:
            return _parse_bool(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(
            f"line {line_no}: value for {key!r} is not a valid {typ.__name__}: {raw!r}"
        ) from exc


def _known_key_templates() -> list[str]:
    keys = list(_WORKLOAD_KEYS) + ["seeds", "sweep.budgets"]
    keys += [f"policy.<name>.{f}" for f in _POLICY_FIELDS]
    return keys


def _suggest(key: str) -> str:
    # Compare against templates with the policy name slot collapsed.
    probe = key
    parts = key.split(".")
    if len(parts) == 3 and parts[0] == "policy":
        probe = f"policy.<name>.{parts[2]}"
    matches = difflib.get_close_matches(probe, _known_key_templates(), n=1, cutoff=0.4)
    return f" (did you mean {matches[0]!r}?)" if matches else ""


def default_policies() -> list[PolicyConfig]:
    """Comparison roster used when a config defines no policies."""
    budget = Budget(0.2)
    return [
        PolicyConfig(PolicyKind.FULL_CACHE, name="full"),
        PolicyConfig(PolicyKind.SLIDING_WINDOW, budget=budget, name="window"),
        PolicyConfig(PolicyKind.HEAVY_HITTER, budget=budget, name="heavy"),
        PolicyConfig(PolicyKind.SNAPKV, budget=budget, name="snapkv"),
        PolicyConfig(PolicyKind.RETENTIVE, budget=budget, name="retentive"),
    ]


def parse_config(path: str | Path) -> ParsedConfig:
    """Parse a flat key = value config; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    workload_raw: dict[str, object] = {}
    policy_raw: dict[str, dict[str, object]] = {}
    policy_order: list[str] = []
    seeds: list[int] | None = None
    budgets: list[float] | None = None
    seen: set[str] = set()

    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in seen:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        seen.add(key)

        if key in _WORKLOAD_KEYS:
            name, typ = _WORKLOAD_KEYS[key]
            workload_raw[name] = _coerce(raw, typ, key, line_no)
        elif key == "seeds":
            seeds = [
                _coerce(part.strip(), int, key, line_no) for part in raw.split(",") if part.strip()
            ]
        elif key == "sweep.budgets":
            budgets = [
                _coerce(part.strip(), float, key, line_no) for part in raw.split(",") if part.strip()
            ]
        elif key.startswith("policy."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _POLICY_FIELDS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}{_suggest(key)}")
            _, name, field_name = parts
            if name not in policy_raw:
                policy_raw[name] = {}
                policy_order.append(name)
            policy_raw[name][field_name] = _coerce(raw, _POLICY_FIELDS[field_name], key, line_no)
        else:
            raise ConfigError(f"line {line_no}: unknown key {key!r}{_suggest(key)}")

    for required in _REQUIRED_KEYS:
        name, _ = _WORKLOAD_KEYS[required]
        if name not in workload_raw:
            raise ConfigError(f"missing required key {required!r}")

    grid_rows = workload_raw.pop("grid_rows", 4)
    grid_cols = workload_raw.pop("grid_cols", 4)
    workload = WorkloadConfig(grid=(grid_rows, grid_cols), **workload_raw)

    policies: list[PolicyConfig] = []
    for name in policy_order:
        raw_fields = policy_raw[name]
        kind_name = raw_fields.get("kind", "retentive")
        if kind_name not in _KIND_NAMES:
            raise ConfigError(
                f"policy {name!r}: unknown kind {kind_name!r}; valid: {sorted(_KIND_NAMES)}"
            )
        policies.append(
            PolicyConfig(
                kind=_KIND_NAMES[kind_name],
                budget=Budget(raw_fields.get("budget", 1.0)),
                window=raw_fields.get("window", 8),
                sinks=raw_fields.get("sinks", 4),
                pool=raw_fields.get("pool", 3),
                mix=raw_fields.get("lambda", 0.5),
                tau_quantile=raw_fields.get("tau_quantile", 0.5),
                gate=GateParams(raw_fields.get("gate_w", 1.0), raw_fields.get("gate_b", 0.0)),
                flags=AblationFlags(
                    entropy_metric=raw_fields.get("em", True),
                    modality_states=raw_fields.get("ma", True),
                    query_retrieval=raw_fields.get("qr", True),
                ),
                name=name,
            )
        )
    if not policies:
        policies = default_policies()
    return ParsedConfig(
        workload=workload,
        policies=policies,
        sweep_budgets=budgets if budgets is not None else [0.05, 0.2, 0.35, 0.5],
        seeds=seeds if seeds is not None else [workload.seed],
    )


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_echo(parsed: ParsedConfig) -> list[str]:
    """Canonical config lines reproducing the parsed state."""
    w = parsed.workload
    lines = [
        f"workload.d = {w.d}",
        f"workload.grid_rows = {w.grid[0]}",
        f"workload.grid_cols = {w.grid[1]}",
        f"workload.images = {w.images}",
        f"workload.text_len = {w.text_len}",
        f"workload.decode_steps = {w.decode_steps}",
        f"workload.planted = {w.planted}",
        f"workload.defer_until = {w.defer_until}",
        f"workload.seed = {w.seed}",
        f"workload.layers = {w.layers}",
        f"workload.salient = {w.salient}",
        "seeds = " + ",".join(str(s) for s in parsed.seeds),
        "sweep.budgets = " + ",".join(_fmt(b) for b in parsed.sweep_budgets),
    ]
    for cfg in parsed.policies:
        name = cfg.display_name()
        lines += [
            f"policy.{name}.kind = {cfg.kind.value}",
            f"policy.{name}.budget = {_fmt(cfg.budget.fraction)}",
            f"policy.{name}.window = {cfg.window}",
            f"policy.{name}.sinks = {cfg.sinks}",
            f"policy.{name}.pool = {cfg.pool}",
            f"policy.{name}.lambda = {_fmt(cfg.mix)}",
            f"policy.{name}.tau_quantile = {_fmt(cfg.tau_quantile)}",
            f"policy.{name}.gate_w = {_fmt(cfg.gate.w_r)}",
            f"policy.{name}.gate_b = {_fmt(cfg.gate.b_r)}",
            f"policy.{name}.em = {str(cfg.flags.entropy_metric).lower()}",
            f"policy.{name}.ma = {str(cfg.flags.modality_states).lower()}",
            f"policy.{name}.qr = {str(cfg.flags.query_retrieval).lower()}",
        ]
    return lines


def emit_reports(
    summary_rows: list[dict],
    columns: list[str],
    trace_records: list[dict],
    manifest_lines: list[str],
    output_dir: str | Path,
) -> list[Path]:
    """Write summary.csv, trace.jsonl, and manifest.txt into output_dir.

    Output is byte-stable: floats are rendered with repr and records carry
    no timestamps.
    """
    if not summary_rows:
        raise RetentiveKVError("emit_reports: empty summary table")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    summary_path = out / "summary.csv"
    lines = [",".join(columns)]
    for row in summary_rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    summary_path.write_text("\n".join(lines) + "\n")

    trace_path = out / "trace.jsonl"
    trace_path.write_text(
        "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in trace_records)
    )

    manifest_path = out / "manifest.txt"
    manifest_path.write_text("\n".join(manifest_lines) + "\n")
    return [summary_path, trace_path, manifest_path]


def _manifest(command: str, parsed: ParsedConfig) -> list[str]:
    return [
        "# retentivekv run manifest",
        f"# version = {__version__}",
        f"# command = {command}",
        "# rerun: retentivekv " + command + " --config <this file> --out DIR",
        *config_echo(parsed),
    ]


# --- selftest suites ------------------------------------------------------


def _suite_dual_form(decay_values: Sequence[float]) -> tuple[int, int]:
    """Iterated plain updates must match the closed-form decayed sum."""
    from .state_space import StateMatrix, explicit_sum_oracle

    passed = total = 0
    rng = RngStream(2024)
    for case in range(20):
        d = [2, 4, 8][case % 3]
        length = 1 + rng.integer(0, 16)
        decay = decay_values[case % len(decay_values)]
        pairs = [(rng.unit_vector(d), rng.unit_vector(d)) for _ in range(length)]
        total += 1
        try:
            state = StateMatrix(d)
            for k, v in pairs:
                state.plain_update(k, v, decay)
            expected = explicit_sum_oracle(pairs, decay)
            if float(np.max(np.abs(state.S - expected))) <= 1e-9:
                passed += 1
        except RetentiveKVError:
            pass
    return passed, total


def _suite_entropy_brute_force() -> tuple[int, int]:
    """cross_modal_entropy vs a direct Shannon-entropy computation."""
    from .retention import cross_modal_entropy

    passed = total = 0
    rng = RngStream(7)
    for _ in range(100):
        n = 2 + rng.integer(0, 12)
        raw = [rng.uniform() + 1e-9 for _ in range(n)]
        s = sum(raw)
        weights = [x / s for x in raw]
        mask = [rng.uniform() < 0.5 for _ in range(n)]
        if not any(mask):
            mask[rng.integer(0, n)] = True
        visual = [w for w, m in zip(weights, mask) if m]
        mass = sum(visual)
        direct = 0.0
        for w in visual:
            p = w / mass
            if p > 0:
                direct -= p * math.log(p)
        report = cross_modal_entropy(np.array(weights), mask, step=0)
        total += 1
        if abs(report.total - direct) <= 1e-12:
            passed += 1
    return passed, total


def _suite_budget_proportionality() -> tuple[int, int]:
    """Steady-state cache bytes track the budget; state bytes stay constant."""
    workload = WorkloadConfig(
        d=8, grid=(2, 2), images=1, text_len=24, decode_steps=12,
        planted=2, defer_until=6, seed=11,
    )
    episode = generate(workload)
    passed = total = 0
    results = {}
    for fraction in (0.25, 0.5):
        cfg = PolicyConfig(PolicyKind.RETENTIVE, budget=Budget(fraction), window=2)
        metrics = run_episode(cfg, episode)
        results[fraction] = metrics
    total += 1
    discrete = {
        f: results[f].peak_cache_bytes - results[f].state_bytes for f in results
    }
    final_len = workload.prompt_len() + workload.decode_steps
    per_entry = 2 * workload.d * 8
    window = 2
    expect = {
        f: (max(1, math.ceil(f * final_len - 1e-9))) * per_entry for f in results
    }
    if all(abs(discrete[f] - expect[f]) <= per_entry for f in results):
        passed += 1
    total += 1
    if results[0.25].state_bytes == results[0.5].state_bytes > 0:
        passed += 1
    return passed, total


def selftest(decay_values: Sequence[float] = (1.0, 0.5, 0.9)) -> int:
    """Run the invariant suites at small sizes; 0 only if everything passes.

    decay_values exists so tests can inject a corrupted decay and watch the
    dual-form suite fail.
    """
    suites = [
        ("dual-form", lambda: _suite_dual_form(decay_values)),
        ("entropy-brute-force", _suite_entropy_brute_force),
        ("budget-proportionality", _suite_budget_proportionality),
    ]
    status = 0
    for name, suite in suites:
        try:
            passed, total = suite()
        except RetentiveKVError as exc:
            print(f"suite {name}: error ({exc})")
            status = 1
            continue
        print(f"suite {name}: {passed}/{total} pass")
        if passed != total:
            status = 1
    return status


# --- commands -------------------------------------------------------------

_RUN_COLUMNS = [
    "policy", "budget", "recon_error", "retained_fraction",
    "state_count", "total_flops", "peak_cache_bytes", "mean_entropy",
]
_SWEEP_COLUMNS = [
    "policy", "budget", "mean_recon_error", "std_recon_error",
    "mean_flops", "mean_peak_bytes", "seeds",
]
_ABLATE_COLUMNS = ["flags", "mean_recon_error", "std_recon_error", "seeds"]
_ENTROPY_COLUMNS = [
    "layer", "policy_a", "policy_b", "mean_entropy_a", "mean_entropy_b",
    "mean_delta", "seeds",
]
_CALIBRATE_COLUMNS = ["w_r", "b_r", "episodes"]


def _cmd_run(parsed: ParsedConfig, out_dir: Path, jobs: int) -> None:
    episode = generate(parsed.workload)
    summary = []
    trace: list[dict] = []
    for cfg in parsed.policies:
        metrics = run_episode(cfg, episode, trace=trace)
        summary.append(
            {
                "policy": cfg.display_name(),
                "budget": cfg.budget.fraction,
                "recon_error": metrics.recon_error,
                "retained_fraction": metrics.retained_fraction,
                "state_count": metrics.state_count,
                "total_flops": metrics.total_flops,
                "peak_cache_bytes": metrics.peak_cache_bytes,
                "mean_entropy": float(np.mean(metrics.per_layer_entropy)),
            }
        )
    emit_reports(summary, _RUN_COLUMNS, trace, _manifest("run", parsed), out_dir)


def _cmd_sweep(parsed: ParsedConfig, out_dir: Path, jobs: int) -> None:
    rows = budget_sweep(
        parsed.policies, parsed.sweep_budgets, parsed.workload, parsed.seeds, jobs=jobs
    )
    trace = [dict(row) for row in rows]
    emit_reports(rows, _SWEEP_COLUMNS, trace, _manifest("sweep", parsed), out_dir)


def _cmd_ablate(parsed: ParsedConfig, out_dir: Path, jobs: int) -> None:
    base = next(
        (c for c in parsed.policies if c.kind is PolicyKind.RETENTIVE),
        PolicyConfig(PolicyKind.RETENTIVE, budget=Budget(0.2)),
    )
    rows = ablation_run(parsed.workload, parsed.seeds, base)
    emit_reports(rows, _ABLATE_COLUMNS, [dict(r) for r in rows], _manifest("ablate", parsed), out_dir)


def _cmd_entropy_report(parsed: ParsedConfig, out_dir: Path, jobs: int) -> None:
    policy_a = next(
        (c for c in parsed.policies if c.kind is PolicyKind.FULL_CACHE),
        PolicyConfig(PolicyKind.FULL_CACHE, name="full"),
    )
    policy_b = next(
        (c for c in parsed.policies if c.kind is not PolicyKind.FULL_CACHE),
        PolicyConfig(PolicyKind.HEAVY_HITTER, budget=Budget(0.1), name="heavy"),
    )
    per_layer: dict[int, list[dict]] = {}
    trace = []
    for seed in parsed.seeds:
        episode = generate(replace(parsed.workload, seed=seed))
        for row in entropy_shift_report(episode, policy_a, policy_b):
            per_layer.setdefault(row["layer"], []).append(row)
            trace.append({**row, "seed": seed})
    summary = []
    for layer in sorted(per_layer):
        rows = per_layer[layer]
        summary.append(
            {
                "layer": layer,
                "policy_a": policy_a.display_name(),
                "policy_b": policy_b.display_name(),
                "mean_entropy_a": float(np.mean([r["entropy_a"] for r in rows])),
                "mean_entropy_b": float(np.mean([r["entropy_b"] for r in rows])),
                "mean_delta": float(np.mean([r["delta"] for r in rows])),
                "seeds": len(rows),
            }
        )
    emit_reports(summary, _ENTROPY_COLUMNS, trace, _manifest("entropy-report", parsed), out_dir)


def _cmd_calibrate(parsed: ParsedConfig, out_dir: Path, jobs: int) -> None:
    base = next(
        (c for c in parsed.policies if c.kind is PolicyKind.RETENTIVE),
        PolicyConfig(PolicyKind.RETENTIVE, budget=Budget(0.2)),
    )
    params = calibrate_gate(parsed.workload, parsed.seeds, base)
    summary = [{"w_r": params.w_r, "b_r": params.b_r, "episodes": len(parsed.seeds)}]
    emit_reports(summary, _CALIBRATE_COLUMNS, [], _manifest("calibrate", parsed), out_dir)


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "entropy-report": _cmd_entropy_report,
    "calibrate": _cmd_calibrate,
}

_CONFIG_HELP = """config file keys (defaults in parentheses):
  workload.d (required)        head dimension
  workload.seed (required)     base RNG seed
  workload.grid_rows (4)       patch rows per image
  workload.grid_cols (4)       patch columns per image
  workload.images (2)          image count
  workload.text_len (16)       prompt text tokens
  workload.decode_steps (32)   decode loop length
  workload.planted (4)         deferred-critical visual tokens
  workload.defer_until (16)    step where planted tokens become targeted
  workload.layers (1)          independent simulated layers
  workload.salient (2)         early-salient visual tokens per image
  seeds (workload.seed)        comma list for sweep/ablate/entropy-report/calibrate
  sweep.budgets (0.05,0.2,0.35,0.5)  comma list of cache budgets
  policy.<name>.kind (retentive)     full|window|heavy|snapkv|retentive
  policy.<name>.budget (1.0)   retained cache fraction
  policy.<name>.window (8)     sliding window length
  policy.<name>.sinks (4)      attention sinks (window policy)
  policy.<name>.pool (3)       pooling width (snapkv)
  policy.<name>.lambda (0.5)   importance/uncertainty mix
  policy.<name>.tau_quantile (0.5)   absorb threshold quantile
  policy.<name>.gate_w (1.0)   gate weight
  policy.<name>.gate_b (0.0)   gate bias
  policy.<name>.em/ma/qr (true)      ablation flags (retentive)
If no policy.* keys are given, a default five-policy roster at budget 0.2 is
used."""


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="retentivekv",
        description="KV-cache compression simulator: continuous-state "
        "retention vs discrete eviction baselines.",
        epilog=_CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=[*_COMMANDS, "selftest"])
    parser.add_argument("--config", help="config file path")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override workload.seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    args = parser.parse_args(argv)

    if args.command == "selftest":
        return selftest()

    if args.config is None:
        print("error: --config is required for this command", file=sys.stderr)
        return 2
    try:
        parsed = parse_config(args.config)
        seed = args.seed
        if seed is None and "RETENTIVEKV_SEED" in os.environ:
            seed = int(os.environ["RETENTIVEKV_SEED"])
        if seed is not None:
            parsed = ParsedConfig(
                workload=replace(parsed.workload, seed=seed),
                policies=parsed.policies,
                sweep_budgets=parsed.sweep_budgets,
                seeds=[seed],
            )
        _COMMANDS[args.command](parsed, Path(args.out), args.jobs)
    except RetentiveKVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
