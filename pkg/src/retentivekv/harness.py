"""Synthetic multimodal workloads and the experiment loop.

Episodes plant deferred-critical visual tokens: their keys are orthogonal to
every prefill and early-decode query, so they accumulate little attention and
get evicted by importance-based policies, yet they receive a steady trickle
of diffuse cross-modal attention (high prospective uncertainty). From
`defer_until` onward the decode queries align with the planted keys, so the
full-cache oracle pivots to them and any policy that dropped them pays in
reconstruction error.

Reconstruction error against the full-cache oracle is the accuracy proxy;
compute is counted with a symbolic FLOP model (see policies.attend_flops) and
memory as steady-state decode bytes. All randomness flows from RngStream, so
every table is reproducible bit for bit from (config, seeds).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateFit, InfeasiblePlanting, OutOfRange
from .kv_cache import KVEntry, Modality, TokenMeta
from .numerics import RngStream, Vector, layer_norm, logistic
from .policies import (
    FullCachePolicy,
    Policy,
    PolicyConfig,
    PolicyKind,
    RetentiveKVPolicy,
    ablation_configs,
    build_policy,
)
from .retrieval import GateParams

# Query construction targets, all expressed as raw attention scores
# (q.k / sqrt(d)). Diffuse-phase queries combine a random spread, a strong
# pull toward a rotating early-salient visual token (which therefore stays a
# heavy hitter and keeps the retained-visual entropy signal alive), and a
# mild, even pull toward the planted keys.
#
# Prefill pull scores are calibrated iteratively against the actually
# computed causal accumulation spectrum so that, independent of prompt
# position and seed, salient tokens finish well above the heavy-hitter
# frontier and planted tokens finish just below it: important enough to top
# the eviction-candidate band, never important enough to be kept discretely.
_DIFFUSE_SCORE_SPREAD = 0.7
_SALIENT_SCORE = 3.2       # warm start for the salient calibration
_PREFILL_PLANT_SCORE = 1.0  # warm start for the planted calibration
_EARLY_PLANT_SCORE = 2.2
_LATE_ALIGN = 0.98         # cosine between a targeted query and its planted key
_LATE_SCORE = 10.0         # raw attention score of the targeted token
_MAX_QUERY_RETRIES = 128

# Accumulation placement: the frontier is the k-th largest non-pulled
# accumulation with k = ceil(_FRONTIER_FRACTION * prompt_len). Planted land
# in the gap just below the frontier (above every other candidate, below
# every heavy hitter); salient land at 2x the frontier.
_FRONTIER_FRACTION = 0.2
_PLANT_GAP_POSITION = 0.35  # 0 = at the next accum below, 1 = at the frontier
_SALIENT_FRONTIER_RATIO = 2.0
_CALIBRATION_ROUNDS = 4


@dataclass(frozen=True)
class WorkloadConfig:
    d: int = 16
    grid: tuple[int, int] = (4, 4)
    images: int = 2
    text_len: int = 16
    decode_steps: int = 32
    planted: int = 4
    defer_until: int = 16
    seed: int = 0
    layers: int = 1
    salient: int = 2  # early-salient visual tokens per image

    def visual_count(self) -> int:
        return self.grid[0] * self.grid[1] * self.images

    def prompt_len(self) -> int:
        return self.visual_count() + self.text_len

    def validate(self) -> None:
        if self.planted > self.visual_count():
            raise OutOfRange("more planted tokens than visual tokens")
        if self.planted > 0 and not 0 <= self.defer_until < self.decode_steps:
            raise OutOfRange("defer_until must fall inside the decode phase")
        if self.salient < 0 or (
            self.images > 0 and self.salient + self.planted > self.grid[0] * self.grid[1]
        ):
            raise OutOfRange("salient + planted tokens cannot fill a whole image")
        if self.planted > self.d - 1:
            raise InfeasiblePlanting(
                f"{self.planted} planted tokens exceed the {self.d - 1} "
                "orthogonal directions available"
            )


@dataclass
class LayerData:
    """Per-layer vectors; metadata is shared across layers."""

    keys: np.ndarray
    values: np.ndarray
    prefill_queries: np.ndarray
    decode_keys: np.ndarray
    decode_values: np.ndarray
    decode_queries: np.ndarray


@dataclass
class Episode:
    config: WorkloadConfig
    prompt_metas: list[TokenMeta]
    decode_metas: list[TokenMeta]
    planted_ids: frozenset[int]
    salient_ids: frozenset[int]
    layers: list[LayerData]

    def prompt_entries(self, layer: int) -> list[KVEntry]:
        data = self.layers[layer]
        return [
            KVEntry(meta, data.keys[i], data.values[i])
            for i, meta in enumerate(self.prompt_metas)
        ]

    def decode_entry(self, layer: int, step: int) -> KVEntry:
        data = self.layers[layer]
        return KVEntry(self.decode_metas[step], data.decode_keys[step], data.decode_values[step])


@dataclass
class EpisodeMetrics:
    recon_error: float
    retained_fraction: float
    state_count: int
    state_bytes: int
    total_flops: int
    peak_cache_bytes: int
    per_layer_entropy: list[float]


def _build_metas(config: WorkloadConfig) -> tuple[list[TokenMeta], list[TokenMeta]]:
    # Text precedes the images so visual tokens do not inherit the positional
    # accumulation advantage of early prompt positions.
    prompt: list[TokenMeta] = []
    tid = 0
    rows, cols = config.grid
    for _ in range(config.text_len):
        prompt.append(TokenMeta(tid, Modality.TEXT, tid))
        tid += 1
    for image in range(config.images):
        for r in range(rows):
            for c in range(cols):
                prompt.append(TokenMeta(tid, Modality.VISUAL, tid, (r, c), image))
                tid += 1
    decode = []
    for _ in range(config.decode_steps):
        decode.append(TokenMeta(tid, Modality.TEXT, tid))
        tid += 1
    return prompt, decode


def _orthonormal_set(rng: RngStream, d: int, count: int) -> np.ndarray:
    """Gram-Schmidt over random normal draws; rows are orthonormal."""
    basis = np.zeros((count, d))
    for i in range(count):
        while True:
            v = rng.normals(d)
            for j in range(i):
                v -= np.dot(v, basis[j]) * basis[j]
            norm = float(np.linalg.norm(v))
            if norm > 1e-8:
                basis[i] = v / norm
                break
    return basis


def _complement_unit(rng: RngStream, d: int, planted_basis: np.ndarray) -> Vector:
    """Unit vector orthogonal to every planted direction."""
    while True:
        v = rng.normals(d)
        for b in planted_basis:
            v -= np.dot(v, b) * b
        norm = float(np.linalg.norm(v))
        if norm > 1e-8:
            return v / norm


def _causal_accums(keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Accumulated attention each prompt token collects over a causal
    self-attention pass (query i attends positions 0..i)."""
    n, d = keys.shape
    scores = queries @ keys.T / math.sqrt(d)
    accums = np.zeros(n)
    for i in range(n):
        row = scores[i, : i + 1]
        e = np.exp(row - np.max(row))
        accums[: i + 1] += e / np.sum(e)
    return accums


def _calibrated_prefill_queries(
    keys: np.ndarray,
    planted_list: list[int],
    planted_key: dict[int, Vector],
    salient_list: list[int],
    salient_keys: list[Vector],
    spread: list[Vector],
) -> np.ndarray:
    """Prefill queries whose pull scores place pulled tokens at fixed points
    of the accumulation spectrum.

    A token's accumulation depends on its position (later tokens see fewer
    queries) and on the softmax denominators, so fixed pull scores cannot
    place all planted tokens uniformly. Instead the per-token scores are
    adjusted over a few rounds against the accumulations the queries actually
    produce: planted tokens converge to just below the heavy-hitter frontier,
    salient tokens to well above it.
    """
    n = len(spread)
    d = keys.shape[1]
    root_d = math.sqrt(d)
    frontier_rank = max(1, math.ceil(_FRONTIER_FRACTION * n))
    plant_scores = {tid: _PREFILL_PLANT_SCORE for tid in planted_list}
    salient_scores = {tid: _SALIENT_SCORE for tid in salient_list}

    def build() -> np.ndarray:
        plant_component = sum(
            (root_d * plant_scores[tid]) * planted_key[tid] for tid in planted_list
        ) if planted_list else 0.0
        queries = np.stack(spread) + plant_component
        for i in range(n):
            if salient_keys:
                idx = i % len(salient_keys)
                queries[i] = queries[i] + (
                    root_d * salient_scores[salient_list[idx]]
                ) * salient_keys[idx]
        return queries

    if not planted_list and not salient_list:
        return build()

    pulled = set(planted_list) | set(salient_list)
    for _ in range(_CALIBRATION_ROUNDS):
        accums = _causal_accums(keys, build())
        plain = sorted(
            (a for tid, a in enumerate(accums) if tid not in pulled), reverse=True
        )
        at = min(frontier_rank, len(plain)) - 1
        frontier = plain[at]
        below = plain[at + 1] if at + 1 < len(plain) else 0.5 * frontier
        plant_target = below + _PLANT_GAP_POSITION * (frontier - below)
        for tid in planted_list:
            plant_scores[tid] += min(2.0, max(-2.0, math.log(plant_target / max(accums[tid], 1e-9))))
        for tid in salient_list:
            target = _SALIENT_FRONTIER_RATIO * frontier
            salient_scores[tid] += min(2.0, max(-2.0, math.log(target / max(accums[tid], 1e-9))))
    return build()


def generate(config: WorkloadConfig) -> Episode:
    """Deterministic episode for the given config.

    Planted keys form an orthonormal set; all other keys live in its
    orthogonal complement and every vector is unit length. Diffuse-phase
    queries carry a mild, even pull toward the planted directions (never
    enough to win the argmax, which is re-drawn and then checked); targeted
    queries align with one planted key at cosine 0.95, which caps every
    competing score below the target's by construction.
    """
    config.validate()
    prompt_metas, decode_metas = _build_metas(config)
    pick_rng = RngStream(config.seed).fork(0xB10C)
    visual_ids = [m.token_id for m in prompt_metas if m.modality is Modality.VISUAL]
    planted_list = sorted(
        visual_ids[i] for i in pick_rng.choice(len(visual_ids), config.planted)
    )
    planted_ids = frozenset(planted_list)

    # Salient tokens are the first non-planted cells of each image: early
    # positions maximize the prefill window they can accumulate over.
    salient_list: list[int] = []
    for image in range(config.images):
        image_ids = [
            m.token_id
            for m in prompt_metas
            if m.modality is Modality.VISUAL
            and m.image_id == image
            and m.token_id not in planted_ids
        ]
        salient_list.extend(image_ids[: config.salient])

    layers = [
        _generate_layer(config, prompt_metas, decode_metas, planted_list, salient_list, layer)
        for layer in range(config.layers)
    ]
    return Episode(config, prompt_metas, decode_metas, planted_ids, frozenset(salient_list), layers)


def _generate_layer(
    config: WorkloadConfig,
    prompt_metas: list[TokenMeta],
    decode_metas: list[TokenMeta],
    planted_list: list[int],
    salient_list: list[int],
    layer: int,
) -> LayerData:
    d = config.d
    p = len(planted_list)
    rng = RngStream(config.seed).fork(layer)
    planted_basis = _orthonormal_set(rng, d, p) if p else np.zeros((0, d))
    planted_dir = (
        planted_basis.sum(axis=0) / math.sqrt(p) if p else np.zeros(d)
    )
    planted_key = {tid: planted_basis[i] for i, tid in enumerate(planted_list)}

    def complement(r: RngStream) -> Vector:
        return _complement_unit(r, d, planted_basis)

    keys = np.zeros((len(prompt_metas), d))
    values = np.zeros((len(prompt_metas), d))
    for i, meta in enumerate(prompt_metas):
        keys[i] = planted_key[meta.token_id] if meta.token_id in planted_key else complement(rng)
        values[i] = rng.unit_vector(d)

    decode_keys = np.zeros((len(decode_metas), d))
    decode_values = np.zeros((len(decode_metas), d))
    for i in range(len(decode_metas)):
        decode_keys[i] = complement(rng)
        decode_values[i] = rng.unit_vector(d)

    # A raw score s against key k needs a query component sqrt(d) * s * k.
    prompt_len = len(prompt_metas)
    spread_gain = _DIFFUSE_SCORE_SPREAD * math.sqrt(d * max(d - p, 1))
    root_d = math.sqrt(d)
    salient_keys = [keys[tid] for tid in salient_list]  # token_id == row index

    early_plant = sum(
        (root_d * _EARLY_PLANT_SCORE) * planted_key[tid] for tid in planted_list
    ) if p else np.zeros(d)

    def diffuse_query(r: RngStream, rotation: int) -> Vector:
        q = spread_gain * complement(r) + early_plant
        if salient_keys:
            q = q + (root_d * _SALIENT_SCORE) * salient_keys[rotation % len(salient_keys)]
        return q

    prefill_queries = _calibrated_prefill_queries(
        keys, planted_list, planted_key, salient_list, salient_keys,
        spread=[spread_gain * complement(rng) for _ in range(prompt_len)],
    )

    all_keys = np.vstack([keys, decode_keys])
    planted_rows = [i for i, m in enumerate(prompt_metas) if m.token_id in planted_key]
    late_gain = _LATE_SCORE * math.sqrt(d) / _LATE_ALIGN
    late_noise = math.sqrt(1.0 - _LATE_ALIGN ** 2)

    decode_queries = np.zeros((len(decode_metas), d))
    for t in range(len(decode_metas)):
        targeted = p > 0 and t >= config.defer_until
        if targeted:
            target = planted_list[t % p]
            q = late_gain * (_LATE_ALIGN * planted_key[target] + late_noise * complement(rng))
            scores = all_keys @ q
            best = int(np.argmax(scores))
            assert best == target and scores[best] == float(np.max(scores))
            cos = float(np.dot(q, planted_key[target]) / np.linalg.norm(q))
            assert cos >= 0.9
            decode_queries[t] = q
        elif p > 0:
            retry_rng = rng
            for attempt in range(_MAX_QUERY_RETRIES):
                q = diffuse_query(retry_rng, t)
                best = int(np.argmax(all_keys @ q))
                if best not in planted_rows:
                    break
                retry_rng = rng.fork(0xE0 + 257 * t + attempt)
            else:
                raise InfeasiblePlanting(
                    f"could not draw a non-planted argmax for early step {t}"
                )
            decode_queries[t] = q
        else:
            decode_queries[t] = diffuse_query(rng, t)
    return LayerData(keys, values, prefill_queries, decode_keys, decode_values, decode_queries)


def run_episode(
    policy_config: PolicyConfig,
    episode: Episode,
    trace: list[dict] | None = None,
) -> EpisodeMetrics:
    """Run a policy against the full-cache oracle on identical inputs.

    Metrics cover the decode phase: recon_error is the mean L2 distance
    between policy and oracle outputs over steps and layers, FLOPs follow the
    documented symbolic model, and peak_cache_bytes is the steady-state
    maximum of discrete-cache plus state bytes summed over layers.
    """
    config = episode.config
    steps = config.decode_steps
    err = np.zeros(steps)
    kept = np.zeros(steps, dtype=int)
    absorbed = np.zeros(steps, dtype=int)
    dropped = np.zeros(steps, dtype=int)
    entropy = np.zeros(steps)
    step_bytes = np.zeros(steps, dtype=int)
    retained = np.zeros(steps)
    total_flops = 0
    state_count = 0
    state_bytes = 0
    per_layer_entropy: list[float] = []

    for layer in range(config.layers):
        policy = build_policy(policy_config, config.d)
        oracle = FullCachePolicy(PolicyConfig(PolicyKind.FULL_CACHE), config.d)
        prefill_q = episode.layers[layer].prefill_queries
        policy.prefill(episode.prompt_entries(layer), prefill_q)
        oracle.prefill(episode.prompt_entries(layer), prefill_q)
        layer_entropy = np.zeros(steps)
        for t in range(steps):
            policy.append(episode.decode_entry(layer, t))
            oracle.append(episode.decode_entry(layer, t))
            q = episode.layers[layer].decode_queries[t]
            outcome = policy.step(q)
            oracle_out = oracle.step(q).output
            err[t] += float(np.linalg.norm(outcome.output - oracle_out))
            kept[t] += len(policy.cache)
            absorbed[t] += outcome.absorbed_count
            dropped[t] += outcome.dropped_count
            layer_entropy[t] = policy.last_entropy_total
            total_flops += outcome.flops
            step_bytes[t] += policy.cache.memory_bytes() + policy.state_bytes()
            retained[t] += len(policy.cache) / policy.total_appended
        entropy += layer_entropy
        per_layer_entropy.append(float(np.mean(layer_entropy)))
        state_count += policy.state_count()
        state_bytes += policy.state_bytes()

    layers = config.layers
    if trace is not None:
        for t in range(steps):
            trace.append(
                {
                    "step": t,
                    "policy": policy_config.display_name(),
                    "kept": int(kept[t]),
                    "absorbed": int(absorbed[t]),
                    "dropped": int(dropped[t]),
                    "recon_err": float(err[t] / layers),
                    "entropy_total": float(entropy[t] / layers),
                }
            )
    return EpisodeMetrics(
        recon_error=float(np.mean(err) / layers),
        retained_fraction=float(np.mean(retained) / layers),
        state_count=state_count,
        state_bytes=state_bytes,
        total_flops=total_flops,
        peak_cache_bytes=int(np.max(step_bytes)),
        per_layer_entropy=per_layer_entropy,
    )


def entropy_shift_report(
    episode: Episode,
    policy_a: PolicyConfig,
    policy_b: PolicyConfig,
) -> list[dict]:
    """Per-layer mean cross-modal entropy under two policies and the
    difference (policy_b minus policy_a)."""
    metrics_a = run_episode(policy_a, episode)
    metrics_b = run_episode(policy_b, episode)
    rows = []
    for layer, (ha, hb) in enumerate(zip(metrics_a.per_layer_entropy, metrics_b.per_layer_entropy)):
        rows.append(
            {
                "layer": layer,
                "policy_a": policy_a.display_name(),
                "policy_b": policy_b.display_name(),
                "entropy_a": ha,
                "entropy_b": hb,
                "delta": hb - ha,
            }
        )
    return rows


def _sweep_cell(args: tuple) -> tuple:
    workload, seed, policy_config, budget = args
    episode = generate(replace(workload, seed=seed))
    cfg = replace(policy_config, budget=type(policy_config.budget)(budget))
    metrics = run_episode(cfg, episode)
    return (policy_config.display_name(), budget, seed, metrics.recon_error,
            metrics.total_flops, metrics.peak_cache_bytes)


def budget_sweep(
    policy_configs: Sequence[PolicyConfig],
    budgets: Sequence[float],
    workload: WorkloadConfig,
    seeds: Sequence[int],
    jobs: int = 1,
) -> list[dict]:
    """Mean and std of reconstruction error per (policy, budget) cell."""
    tasks = [
        (workload, seed, cfg, budget)
        for cfg in policy_configs
        for budget in budgets
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1], r[2]))

    rows = []
    for cfg in policy_configs:
        for budget in budgets:
            cell = [r for r in results if r[0] == cfg.display_name() and r[1] == budget]
            errors = np.array([r[3] for r in cell])
            rows.append(
                {
                    "policy": cfg.display_name(),
                    "budget": budget,
                    "mean_recon_error": float(np.mean(errors)),
                    "std_recon_error": float(np.std(errors)),
                    "mean_flops": float(np.mean([r[4] for r in cell])),
                    "mean_peak_bytes": float(np.mean([r[5] for r in cell])),
                    "seeds": len(cell),
                }
            )
    return rows


def ablation_run(
    workload: WorkloadConfig,
    seeds: Sequence[int],
    base: PolicyConfig,
) -> list[dict]:
    """Mean reconstruction error for the four component combinations."""
    rows = []
    for cfg in ablation_configs(base):
        errors = []
        for seed in seeds:
            episode = generate(replace(workload, seed=seed))
            errors.append(run_episode(cfg, episode).recon_error)
        rows.append(
            {
                "flags": cfg.flags.label(),
                "mean_recon_error": float(np.mean(errors)),
                "std_recon_error": float(np.std(errors)),
                "seeds": len(seeds),
            }
        )
    return rows


def fit_gate_params(h_values: Sequence[float], ideal_gates: Sequence[float]) -> GateParams:
    """Least-squares fit of logistic-link coefficients: logit(gate) ~ w*h + b.

    Gates must lie strictly inside (0, 1). Raises DegenerateFit when the
    regressor has no variation.
    """
    h = np.asarray(h_values, dtype=np.float64)
    g = np.asarray(ideal_gates, dtype=np.float64)
    if h.size < 1 or h.size != g.size:
        raise DegenerateFit("need matching, nonempty h and gate samples")
    if float(np.ptp(h)) < 1e-12:
        raise DegenerateFit("h_avg shows no variation")
    logits = np.log(g / (1.0 - g))
    design = np.stack([h, np.ones_like(h)], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, logits, rcond=None)
    return GateParams(w_r=float(coeffs[0]), b_r=float(coeffs[1]))


def calibrate_gate(
    workload: WorkloadConfig,
    seeds: Sequence[int],
    base: PolicyConfig,
) -> GateParams:
    """Fit the gate to calibration episodes.

    For each decode step the ideal gate is the least-squares coefficient that
    scales the ungated state readout onto the oracle residual, clamped to
    (0.01, 0.99); those ideals are regressed on the observed step entropy.
    Constant entropy (nothing to regress on) falls back to the defaults.
    """
    if not seeds:
        raise DegenerateFit("calibrate_gate needs at least one episode")
    h_values: list[float] = []
    ideals: list[float] = []
    for seed in seeds:
        episode = generate(replace(workload, seed=seed))
        config = episode.config
        for layer in range(config.layers):
            policy = build_policy(base, config.d)
            if not isinstance(policy, RetentiveKVPolicy):
                raise DegenerateFit("gate calibration needs a retentive policy")
            oracle = FullCachePolicy(PolicyConfig(PolicyKind.FULL_CACHE), config.d)
            prefill_q = episode.layers[layer].prefill_queries
            policy.prefill(episode.prompt_entries(layer), prefill_q)
            oracle.prefill(episode.prompt_entries(layer), prefill_q)
            probe: list[tuple] = []
            policy.calibration_probe = probe
            for t in range(config.decode_steps):
                policy.append(episode.decode_entry(layer, t))
                oracle.append(episode.decode_entry(layer, t))
                q = episode.layers[layer].decode_queries[t]
                policy.step(q)
                oracle_out = oracle.step(q).output
                h_avg, local, visual_part, recall_part = probe[-1]
                combined = visual_part + recall_part
                if not np.any(combined != 0.0):
                    continue
                readout = layer_norm(combined)
                denom = float(np.dot(readout, readout))
                ideal = float(np.dot(oracle_out - local, readout)) / denom
                ideals.append(min(0.99, max(0.01, ideal)))
                h_values.append(h_avg)
    if not h_values or float(np.ptp(h_values)) < 1e-12:
        return GateParams()
    return fit_gate_params(h_values, ideals)


def sign_test_pvalue(wins: int, trials: int) -> float:
    """One-sided exact sign test: P[X >= wins] for X ~ Binomial(trials, 1/2)."""
    if not 0 <= wins <= trials:
        raise OutOfRange("wins must lie in [0, trials]")
    total = sum(math.comb(trials, k) for k in range(wins, trials + 1))
    return total / 2.0 ** trials


def default_gate_for(workload: WorkloadConfig, base: PolicyConfig, calibration_seeds: Sequence[int]) -> GateParams:
    """Convenience wrapper: calibrated gate params for a workload family."""
    return calibrate_gate(workload, calibration_seeds, base)
