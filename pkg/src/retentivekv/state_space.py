"""Continuous memory: d x d states that absorb evicted KV pairs.

The recurrent view applies one decay/inject pair per absorbed token:

    S <- decay * S + strength * k v^T

with decay = logistic(entropy) and strength derived from normalized
accumulated attention. The chunkwise view reproduces the same final state for
a whole token block from a precomputed decay mask; both paths must agree,
which the tests enforce.

Visual states additionally raise decay and strength to the absorbed patch's
Manhattan distance from a root patch, so spatially remote patches imprint
weakly. Each image keeps two such states, one fed in row-major and one in
column-major scan order; readout averages the two.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyAttnMap, OutOfRange, ShapeMismatch, WrongKind
from .kv_cache import KVEntry
from .numerics import Matrix, Vector, as_vector, logistic, outer

KIND_RECALL = "recall"
KIND_VISUAL = "visual"


@dataclass(frozen=True)
class TransitionParams:
    """Knobs of the state recurrence: plain decay, importance/uncertainty
    mixing weight, and the full-precision sliding window length."""

    decay: float = 1.0
    mix: float = 0.5
    window: int = 8

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise OutOfRange(f"decay={self.decay} outside (0, 1]")
        if self.window < 1:
            raise OutOfRange("window must be >= 1")


@dataclass
class DecayMask:
    """Lower-triangular per-chunk masks; entry [n, m] scales the influence of
    chunk position m on position n."""

    length: int
    retention: Matrix
    absorption: Matrix


class StateMatrix:
    """One continuous memory cell.

    kind is "recall" for the text state or "visual" for a per-image state
    anchored at `root` (a (row, col) patch). absorbed_count counts update
    applications since initialization; the payload size never changes.
    """

    def __init__(
        self,
        d: int,
        kind: str = KIND_RECALL,
        image_id: int | None = None,
        root: tuple[int, int] | None = None,
    ):
        if kind not in (KIND_RECALL, KIND_VISUAL):
            raise WrongKind(f"unknown state kind {kind!r}")
        if kind == KIND_VISUAL and (image_id is None or root is None):
            raise WrongKind("visual state needs image_id and root")
        self.d = d
        self.kind = kind
        self.image_id = image_id
        self.root = root
        self.S: Matrix = np.zeros((d, d), dtype=np.float64)
        self.absorbed_count = 0

    def is_zero(self) -> bool:
        return self.absorbed_count == 0

    def _check_dims(self, k: Vector, v: Vector) -> tuple[Vector, Vector]:
        k = as_vector(k)
        v = as_vector(v)
        if k.shape[0] != self.d or v.shape[0] != self.d:
            raise ShapeMismatch(f"state dim {self.d} vs k {k.shape[0]}, v {v.shape[0]}")
        return k, v

    def plain_update(self, k: Vector, v: Vector, decay: float) -> None:
        """S <- decay * S + k v^T with a constant decay in (0, 1]."""
        if not 0.0 < decay <= 1.0:
            raise OutOfRange(f"decay={decay} outside (0, 1]")
        k, v = self._check_dims(k, v)
        self.S *= decay
        self.S += outer(k, v)
        self.absorbed_count += 1

    def entropy_update(self, k: Vector, v: Vector, entropy: float, alpha_norm: float) -> None:
        """S <- logistic(entropy) * S + alpha_norm * k v^T.

        High entropy (uncertain context) preserves the old state;
        alpha_norm in [0, 1] throttles the injection.
        """
        if entropy < 0.0:
            raise OutOfRange(f"entropy={entropy} must be >= 0")
        if not 0.0 <= alpha_norm <= 1.0:
            raise OutOfRange(f"alpha_norm={alpha_norm} outside [0, 1]")
        k, v = self._check_dims(k, v)
        self.S *= logistic(entropy)
        self.S += alpha_norm * outer(k, v)
        self.absorbed_count += 1

    def visual_update(
        self,
        k: Vector,
        v: Vector,
        entropy: float,
        alpha_norm: float,
        patch: tuple[int, int],
    ) -> None:
        """Spatially modulated update for visual states.

        Both coefficients are raised to the Manhattan distance between the
        absorbed patch and the root; the root itself (distance 0) is fully
        absorbed with no decay, including the alpha_norm = 0 corner (0^0 = 1).
        """
        if self.kind != KIND_VISUAL:
            raise WrongKind("visual_update on a non-visual state")
        if entropy < 0.0:
            raise OutOfRange(f"entropy={entropy} must be >= 0")
        if not 0.0 <= alpha_norm <= 1.0:
            raise OutOfRange(f"alpha_norm={alpha_norm} outside [0, 1]")
        k, v = self._check_dims(k, v)
        assert self.root is not None
        distance = abs(patch[0] - self.root[0]) + abs(patch[1] - self.root[1])
        self.S *= logistic(entropy) ** distance
        self.S += (alpha_norm ** distance) * outer(k, v)
        self.absorbed_count += 1

    def recall_absorb(
        self,
        exiting: Sequence[KVEntry],
        heavy_ids: set[int],
        entropy_cut: float | None = None,
    ) -> None:
        """Absorb the exiting entries that are not heavy hitters and carry
        entropy at or above the cut; everything else is dropped.

        entropy_cut defaults to the median last_entropy of the batch.
        Absorption strength is accumulated attention min-max normalized over
        the batch; decay uses each entry's own last_entropy. Entries are
        processed in sequence order.
        """
        if self.kind != KIND_RECALL:
            raise WrongKind("recall_absorb on a non-recall state")
        if not exiting:
            return
        if entropy_cut is None:
            entropy_cut = float(np.median([e.last_entropy for e in exiting]))
        accums = [e.accum_attn for e in exiting]
        lo, hi = min(accums), max(accums)
        span = hi - lo
        ordered = sorted(exiting, key=lambda e: e.meta.position)
        for entry in ordered:
            if entry.meta.token_id in heavy_ids or entry.last_entropy < entropy_cut:
                continue
            alpha = 1.0 if span == 0.0 else (entry.accum_attn - lo) / span
            self.entropy_update(entry.key, entry.value, entry.last_entropy, alpha)

    def byte_size(self) -> int:
        return int(self.S.nbytes)

    def to_bytes(self) -> bytes:
        """Flat little-endian snapshot: d, kind tag, root coords, row-major
        elements, absorbed_count."""
        kind_tag = 1 if self.kind == KIND_VISUAL else 0
        root = self.root if self.root is not None else (-1, -1)
        head = struct.pack("<IBii", self.d, kind_tag, root[0], root[1])
        body = struct.pack(f"<{self.d * self.d}d", *self.S.reshape(-1).tolist())
        tail = struct.pack("<Q", self.absorbed_count)
        return head + body + tail

    @classmethod
    def from_bytes(cls, raw: bytes, image_id: int | None = None) -> "StateMatrix":
        d, kind_tag, r0, r1 = struct.unpack_from("<IBii", raw, 0)
        offset = struct.calcsize("<IBii")
        elements = struct.unpack_from(f"<{d * d}d", raw, offset)
        offset += struct.calcsize(f"<{d * d}d")
        (count,) = struct.unpack_from("<Q", raw, offset)
        if kind_tag == 1:
            state = cls(d, KIND_VISUAL, image_id if image_id is not None else 0, (r0, r1))
        else:
            state = cls(d, KIND_RECALL)
        state.S = np.array(elements, dtype=np.float64).reshape(d, d)
        state.absorbed_count = count
        return state


def explicit_sum_oracle(pairs: Sequence[tuple[Vector, Vector]], decay: float) -> Matrix:
    """Closed-form decayed sum: sum_i decay^(t - i) k_i v_i^T.

    Brute-force reference for the plain recurrence; decay = 0 keeps only the
    final pair (0^0 = 1).
    """
    if not pairs:
        raise ShapeMismatch("explicit_sum_oracle: no pairs")
    t = len(pairs)
    total = np.zeros((as_vector(pairs[0][0]).shape[0],) * 2, dtype=np.float64)
    for i, (k, v) in enumerate(pairs, start=1):
        total += (decay ** (t - i)) * outer(k, v)
    return total


def build_masks(length: int, entropy: float, alpha_norm: float) -> DecayMask:
    """Lower-triangular power masks for a chunk of the given length.

    retention[n, m] = logistic(entropy)^(n-m) and absorption[n, m] =
    alpha_norm^(n-m) for n >= m, else 0; diagonals are 1 (x^0 = 1).
    """
    if length < 1:
        raise OutOfRange("mask length must be >= 1")
    sigma = logistic(entropy)
    gaps = np.arange(length)[:, None] - np.arange(length)[None, :]
    lower = gaps >= 0
    safe_gaps = np.where(lower, gaps, 0).astype(np.float64)
    retention = np.where(lower, sigma ** safe_gaps, 0.0)
    absorption = np.where(lower, float(alpha_norm) ** safe_gaps, 0.0)
    return DecayMask(length=length, retention=retention, absorption=absorption)


def chunk_absorb(
    pairs: Sequence[tuple[Vector, Vector]],
    entropy: float,
    alpha_norm: float,
) -> Matrix:
    """Final state of a whole chunk in one shot via the mask form.

    The last retention-mask row carries the decay each position suffers
    before the chunk ends; every position injects with strength alpha_norm.
    Matches running entropy_update sequentially from a zero state with the
    same constant coefficients.
    """
    if not pairs:
        raise ShapeMismatch("chunk_absorb: empty chunk")
    mask = build_masks(len(pairs), entropy, alpha_norm)
    coeffs = mask.retention[-1, :] * alpha_norm
    keys = np.stack([as_vector(k) for k, _ in pairs])
    values = np.stack([as_vector(v) for _, v in pairs])
    return keys.T @ (coeffs[:, None] * values)


def init_visual_state(
    image_id: int,
    attn_map: dict[tuple[int, int], float],
    d: int,
) -> StateMatrix:
    """Zero visual state rooted at the patch with maximal accumulated
    attention; ties take the smallest (row, col) coordinate."""
    if not attn_map:
        raise EmptyAttnMap(f"image {image_id}: empty attention map")
    root = min(attn_map, key=lambda patch: (-attn_map[patch], patch))
    return StateMatrix(d, KIND_VISUAL, image_id, root)


class ImageStatePair:
    """The two scan-order states of one image.

    Evicted patches are absorbed into `row_state` sorted row-major and into
    `col_state` sorted column-major, so each state privileges continuity
    along one axis. Readout averages the two.
    """

    def __init__(self, image_id: int, attn_map: dict[tuple[int, int], float], d: int):
        self.image_id = image_id
        self.row_state = init_visual_state(image_id, attn_map, d)
        self.col_state = init_visual_state(image_id, attn_map, d)

    @property
    def root(self) -> tuple[int, int]:
        assert self.row_state.root is not None
        return self.row_state.root

    def absorb_batch(
        self,
        items: Iterable[tuple[tuple[int, int], Vector, Vector, float, float]],
    ) -> None:
        """Absorb (patch, k, v, entropy, alpha_norm) items in both scan orders."""
        items = list(items)
        for patch, k, v, entropy, alpha in sorted(items, key=lambda it: (it[0][0], it[0][1])):
            self.row_state.visual_update(k, v, entropy, alpha, patch)
        for patch, k, v, entropy, alpha in sorted(items, key=lambda it: (it[0][1], it[0][0])):
            self.col_state.visual_update(k, v, entropy, alpha, patch)

    def states(self) -> tuple[StateMatrix, StateMatrix]:
        return self.row_state, self.col_state
