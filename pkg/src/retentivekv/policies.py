"""Eviction policies over a shared step protocol.

Every policy owns one Cache per simulated layer and exposes:

    prefill(entries, queries)   load the prompt and its self-attention stats
    append(entry)               add one decoded token's KV pair
    step(q) -> StepOutcome      attend, update bookkeeping, enforce budget

Decode-step order is attend first, then eviction, so a step's output always
reflects the cache as the step began. Budgets are enforced against the total
number of tokens appended so far (what a full cache would hold), at every
step once the cache exceeds the allowance.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import OutOfRange
from .kv_cache import Cache, KVEntry, Modality
from .numerics import Vector, as_vector, softmax
from .retention import (
    Action,
    EntropyReport,
    cross_modal_entropy,
    normalize_scores,
    partition_evicted,
)
from .retrieval import GateParams, fuse, gate, retrieve
from .state_space import KIND_RECALL, ImageStatePair, StateMatrix


@dataclass(frozen=True)
class Budget:
    """Retained fraction of the discrete cache."""

    fraction: float

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise OutOfRange(f"budget fraction {self.fraction} outside (0, 1]")

    def keep_count(self, length: int) -> int:
        # Small bias guards against float dust pushing an exact product
        # (e.g. 0.2 * 95) over the next integer.
        return max(1, math.ceil(self.fraction * length - 1e-9))


@dataclass(frozen=True)
class AblationFlags:
    """Component toggles: entropy-guided scoring, modality-split states,
    query-conditioned retrieval."""

    entropy_metric: bool = True
    modality_states: bool = True
    query_retrieval: bool = True

    def label(self) -> str:
        parts = []
        if self.entropy_metric:
            parts.append("EM")
        if self.modality_states:
            parts.append("MA")
        if self.query_retrieval:
            parts.append("QR")
        return "+".join(parts) if parts else "none"


class PolicyKind(Enum):
    FULL_CACHE = "full"
    SLIDING_WINDOW = "window"
    HEAVY_HITTER = "heavy"
    SNAPKV = "snapkv"
    RETENTIVE = "retentive"


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    budget: Budget = field(default_factory=lambda: Budget(1.0))
    window: int = 8
    sinks: int = 4
    pool: int = 3
    mix: float = 0.5
    tau_quantile: float = 0.5
    gate: GateParams = field(default_factory=GateParams)
    flags: AblationFlags = field(default_factory=AblationFlags)
    name: str | None = None

    def display_name(self) -> str:
        return self.name if self.name is not None else self.kind.value

    def with_gate(self, params: GateParams) -> "PolicyConfig":
        return replace(self, gate=params)


@dataclass
class StepOutcome:
    output: Vector
    evicted_count: int
    absorbed_count: int
    dropped_count: int
    flops: int


def attend_flops(cache_size: int, d: int) -> int:
    """Documented cost model: 2*L*d multiply-adds plus 5*L softmax ops."""
    return 2 * cache_size * d + 5 * cache_size


def _restricted_entropy(weights: Sequence[float]) -> float:
    """Shannon entropy of a weight slice renormalized to a distribution."""
    mass = float(sum(weights))
    if mass <= 0.0:
        return 0.0
    total = 0.0
    for w in weights:
        p = w / mass
        if p > 0.0:
            total -= p * math.log(p)
    return total


STATE_UPDATE_FLOPS_FACTOR = 2  # one state update or readout costs 2 * d * d


class Policy:
    """Shared attend/bookkeeping machinery; subclasses add eviction."""

    def __init__(self, config: PolicyConfig, d: int):
        self.config = config
        self.d = d
        self.cache = Cache(d)
        self.total_appended = 0
        self.step_index = 0
        self.recent_reports: deque[EntropyReport] = deque(maxlen=4)
        self.last_entropy_total = 0.0
        self._last_weights: dict[int, float] = {}

    @property
    def name(self) -> str:
        return self.config.display_name()

    def state_count(self) -> int:
        return 0

    def state_bytes(self) -> int:
        return 0

    def append(self, entry: KVEntry) -> None:
        self.cache.append(entry)
        self.total_appended += 1

    def prefill(self, entries: Sequence[KVEntry], queries: np.ndarray | None) -> None:
        """Load the prompt and replay its causal self-attention.

        queries[i] attends positions 0..i; weights feed the accumulated
        attention sums, and text-position queries produce cross-modal entropy
        reports that stamp the visual entries. Prefill costs are not counted
        toward decode FLOPs.
        """
        for entry in entries:
            self.append(entry)
        if queries is None:
            return
        keys = np.stack([e.key for e in self.cache.entries])
        scale = math.sqrt(self.d)
        ids = self.cache.token_ids()
        mask = self.cache.visual_mask()
        for i in range(len(entries)):
            weights = softmax(keys[: i + 1] @ queries[i] / scale)
            for entry, w in zip(self.cache.entries[: i + 1], weights):
                entry.accum_attn += float(w)
            if entries[i].meta.modality is Modality.TEXT and any(mask[: i + 1]):
                report = cross_modal_entropy(weights, mask[: i + 1], step=-1, token_ids=ids[: i + 1])
                self._record_report(report)

    def _record_report(self, report: EntropyReport) -> None:
        self.recent_reports.append(report)
        by_id = {e.meta.token_id: e for e in self.cache.entries}
        for token_id, contribution in report.per_token.items():
            entry = by_id.get(token_id)
            if entry is not None:
                entry.last_entropy = contribution

    def _attend_and_report(self, q: Vector) -> tuple[Vector, int]:
        out, weights = self.cache.attend(q)
        flops = attend_flops(len(self.cache), self.d)
        self.cache.accumulate(weights)
        self._last_weights = {
            tid: float(w) for tid, w in zip(self.cache.token_ids(), weights)
        }
        mask = self.cache.visual_mask()
        if any(mask):
            report = cross_modal_entropy(
                weights, mask, step=self.step_index, token_ids=self.cache.token_ids()
            )
            self._record_report(report)
            self.last_entropy_total = report.total
        else:
            self.last_entropy_total = 0.0
        return out, flops

    def step(self, q: Vector) -> StepOutcome:
        raise NotImplementedError


class FullCachePolicy(Policy):
    """Keeps everything; the reconstruction-error oracle."""

    def step(self, q: Vector) -> StepOutcome:
        out, flops = self._attend_and_report(q)
        self.step_index += 1
        return StepOutcome(out, 0, 0, 0, flops)


class SlidingWindowPolicy(Policy):
    """Attention sinks plus a recency window; everything else is dropped."""

    def step(self, q: Vector) -> StepOutcome:
        out, flops = self._attend_and_report(q)
        evicted = self._enforce()
        self.step_index += 1
        return StepOutcome(out, len(evicted), 0, len(evicted), flops)

    def _enforce(self) -> list[KVEntry]:
        sinks, window = self.config.sinks, self.config.window
        if len(self.cache) <= sinks + window:
            return []
        ids = self.cache.token_ids()
        keep = set(ids[:sinks]) | set(ids[-window:])
        return self.cache.evict(set(ids) - keep)


class HeavyHitterPolicy(Policy):
    """Keeps the tokens with the largest accumulated attention."""

    def step(self, q: Vector) -> StepOutcome:
        out, flops = self._attend_and_report(q)
        evicted = self._enforce()
        self.step_index += 1
        return StepOutcome(out, len(evicted), 0, len(evicted), flops)

    def _enforce(self) -> list[KVEntry]:
        keep_count = self.config.budget.keep_count(self.total_appended)
        if len(self.cache) <= keep_count:
            return []
        ranked = sorted(
            self.cache.entries, key=lambda e: (-e.accum_attn, e.meta.token_id)
        )
        keep = {e.meta.token_id for e in ranked[:keep_count]}
        return self.cache.evict(set(self.cache.token_ids()) - keep)


class SnapKVPolicy(Policy):
    """Ranks entries by pooled attention mass from an observation window of
    late prompt queries, then keeps the top of the ranking."""

    OBSERVATION_QUERIES = 4

    def __init__(self, config: PolicyConfig, d: int):
        super().__init__(config, d)
        self.observation: list[Vector] = []

    def prefill(self, entries: Sequence[KVEntry], queries: np.ndarray | None) -> None:
        super().prefill(entries, queries)
        if queries is not None:
            self.observation = [
                as_vector(queries[i])
                for i in range(max(0, len(entries) - self.OBSERVATION_QUERIES), len(entries))
            ]

    def _pooled_scores(self) -> np.ndarray:
        keys = np.stack([e.key for e in self.cache.entries])
        scale = math.sqrt(self.d)
        scores = np.zeros(len(self.cache))
        for q in self.observation:
            scores += softmax(keys @ q / scale)
        half = self.config.pool // 2
        pooled = np.empty_like(scores)
        for i in range(len(scores)):
            pooled[i] = np.max(scores[max(0, i - half): i + half + 1])
        return pooled

    def step(self, q: Vector) -> StepOutcome:
        out, flops = self._attend_and_report(q)
        evicted = self._enforce()
        self.step_index += 1
        return StepOutcome(out, len(evicted), 0, len(evicted), flops)

    def _enforce(self) -> list[KVEntry]:
        keep_count = self.config.budget.keep_count(self.total_appended)
        if len(self.cache) <= keep_count or not self.observation:
            return []
        pooled = self._pooled_scores()
        order = sorted(
            range(len(self.cache)),
            key=lambda i: (-pooled[i], self.cache.entries[i].meta.token_id),
        )
        ids = self.cache.token_ids()
        keep = {ids[i] for i in order[:keep_count]}
        return self.cache.evict(set(ids) - keep)


class RetentiveKVPolicy(Policy):
    """Heavy hitters plus a recency window in the discrete cache; evicted
    tokens are scored and either absorbed into the continuous states or
    dropped, and a gated readout of those states joins the output."""

    def __init__(self, config: PolicyConfig, d: int):
        super().__init__(config, d)
        self.visual_pairs: dict[int, ImageStatePair] = {}
        self.recall_state = StateMatrix(d, KIND_RECALL)
        # Optional hook for gate calibration: when set, each retrieval step
        # appends (step_entropy, local_out, visual_part, recall_part).
        self.calibration_probe: list[tuple] | None = None

    def state_count(self) -> int:
        return 1 + 2 * len(self.visual_pairs)

    def state_bytes(self) -> int:
        total = self.recall_state.byte_size()
        for pair in self.visual_pairs.values():
            row, col = pair.states()
            total += row.byte_size() + col.byte_size()
        return total

    def step(self, q: Vector) -> StepOutcome:
        out_local, flops = self._attend_and_report(q)
        h_avg = self.last_entropy_total

        evicted = self._select_evictions()
        absorbed = dropped = 0
        if evicted:
            mix = self.config.mix if self.config.flags.entropy_metric else 1.0
            decisions = partition_evicted(
                evicted, self.recent_reports, mix, self.config.tau_quantile
            )
            to_absorb = {d.token_id for d in decisions if d.action is Action.ABSORB}
            absorbed = len(to_absorb)
            dropped = len(evicted) - absorbed
            # State decay tracks the uncertainty over what is being consigned
            # to memory: the entropy of this step's attention restricted to
            # the eviction candidates and renormalized.
            absorb_entropy = _restricted_entropy(
                [self._last_weights.get(e.meta.token_id, 0.0) for e in evicted]
            )
            flops += self._absorb(
                [e for e in evicted if e.meta.token_id in to_absorb],
                evicted,
                absorb_entropy,
            )

        if self.config.flags.query_retrieval:
            g = gate(h_avg, self.config.gate)
            pairs = [self.visual_pairs[i] for i in sorted(self.visual_pairs)]
            retrieved = retrieve(q, pairs, self.recall_state, g)
            output = fuse(out_local, retrieved)
            flops += STATE_UPDATE_FLOPS_FACTOR * self.d * self.d * self.state_count()
            if self.calibration_probe is not None:
                self.calibration_probe.append(
                    (h_avg, out_local, retrieved.visual_part, retrieved.recall_part)
                )
        else:
            output = out_local

        self.step_index += 1
        return StepOutcome(output, len(evicted), absorbed, dropped, flops)

    def _select_evictions(self) -> list[KVEntry]:
        keep_count = self.config.budget.keep_count(self.total_appended)
        if len(self.cache) <= keep_count:
            return []
        window = min(self.config.window, max(1, keep_count // 2))
        ids = self.cache.token_ids()
        recent = set(ids[-window:])
        older = [e for e in self.cache.entries if e.meta.token_id not in recent]
        heavy_slots = keep_count - len(recent)
        ranked = sorted(older, key=lambda e: (-e.accum_attn, e.meta.token_id))
        heavy = {e.meta.token_id for e in ranked[:heavy_slots]}
        return self.cache.evict(set(ids) - recent - heavy)

    def _absorb(
        self,
        absorbed: list[KVEntry],
        candidates: list[KVEntry],
        step_entropy: float,
    ) -> int:
        """Route absorbed entries into the states; returns the FLOP cost.

        State decay uses the current step's total cross-modal entropy;
        injection strength is accumulated attention normalized over the whole
        candidate batch. With modality states off, everything lands in the
        recall state.
        """
        if not absorbed:
            return 0
        alpha_norm = normalize_scores(
            {e.meta.token_id: e.accum_attn for e in candidates}
        )
        d2 = self.d * self.d
        flop_cost = 0
        if not self.config.flags.modality_states:
            for entry in sorted(absorbed, key=lambda e: e.meta.position):
                self.recall_state.entropy_update(
                    entry.key, entry.value, step_entropy, alpha_norm[entry.meta.token_id]
                )
            return STATE_UPDATE_FLOPS_FACTOR * d2 * len(absorbed)

        by_image: dict[int, list[KVEntry]] = {}
        text_entries: list[KVEntry] = []
        for entry in absorbed:
            if entry.meta.modality is Modality.VISUAL:
                by_image.setdefault(entry.meta.image_id, []).append(entry)
            else:
                text_entries.append(entry)
        for image_id in sorted(by_image):
            batch = by_image[image_id]
            pair = self._visual_pair(image_id, batch)
            pair.absorb_batch(
                (
                    entry.meta.grid,
                    entry.key,
                    entry.value,
                    step_entropy,
                    alpha_norm[entry.meta.token_id],
                )
                for entry in batch
            )
            flop_cost += STATE_UPDATE_FLOPS_FACTOR * d2 * 2 * len(batch)
        if text_entries:
            # The eviction already removed every heavy hitter from this batch
            # and the retention partition made the absorb call, so no second
            # filter here.
            self.recall_state.recall_absorb(text_entries, heavy_ids=set(), entropy_cut=0.0)
            flop_cost += STATE_UPDATE_FLOPS_FACTOR * d2 * len(text_entries)
        return flop_cost

    def _visual_pair(self, image_id: int, evicted_batch: list[KVEntry]) -> ImageStatePair:
        """Lazily root an image's state pair at its most-attended patch,
        snapshotting attention over patches still cached plus the batch."""
        pair = self.visual_pairs.get(image_id)
        if pair is None:
            attn_map: dict[tuple[int, int], float] = {}
            for entry in list(self.cache.entries) + evicted_batch:
                if entry.meta.modality is Modality.VISUAL and entry.meta.image_id == image_id:
                    attn_map[entry.meta.grid] = entry.accum_attn
            pair = ImageStatePair(image_id, attn_map, self.d)
            self.visual_pairs[image_id] = pair
        return pair


_POLICY_CLASSES = {
    PolicyKind.FULL_CACHE: FullCachePolicy,
    PolicyKind.SLIDING_WINDOW: SlidingWindowPolicy,
    PolicyKind.HEAVY_HITTER: HeavyHitterPolicy,
    PolicyKind.SNAPKV: SnapKVPolicy,
    PolicyKind.RETENTIVE: RetentiveKVPolicy,
}


def build_policy(config: PolicyConfig, d: int) -> Policy:
    return _POLICY_CLASSES[config.kind](config, d)


def ablation_configs(base: PolicyConfig) -> list[PolicyConfig]:
    """The four component combinations reported by ablation runs."""
    combos = [
        AblationFlags(True, True, False),
        AblationFlags(True, False, True),
        AblationFlags(False, True, True),
        AblationFlags(True, True, True),
    ]
    return [
        replace(base, kind=PolicyKind.RETENTIVE, flags=flags, name=f"retentive[{flags.label()}]")
        for flags in combos
    ]
