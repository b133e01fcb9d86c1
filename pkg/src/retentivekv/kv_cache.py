"""Discrete KV cache with scaled-dot-product attention and explicit eviction.

One Cache models one attention head of one simulated layer. Eviction hands
the removed entries back to the caller so a policy can forward them to the
continuous states instead of destroying them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DuplicateToken,
    EmptyCache,
    OutOfOrder,
    ShapeMismatch,
    UnknownToken,
)
from .numerics import Vector, as_vector, softmax

BYTES_PER_REAL = 8


class Modality(Enum):
    VISUAL = "visual"
    TEXT = "text"


@dataclass(frozen=True)
class TokenMeta:
    """Identity of one cached token.

    grid is (row, col) within the patch grid of image `image_id`; both are
    present exactly when the token is visual. position equals token_id in the
    single-sequence episodes this package simulates.
    """

    token_id: int
    modality: Modality
    position: int
    grid: tuple[int, int] | None = None
    image_id: int | None = None

    def __post_init__(self):
        visual = self.modality is Modality.VISUAL
        if visual != (self.grid is not None and self.image_id is not None):
            raise ShapeMismatch(
                "visual tokens carry grid and image_id; text tokens carry neither"
            )


class KVEntry:
    """One cached key/value pair plus its attention bookkeeping.

    accum_attn is the raw running sum of softmax weights the token has
    received (never decayed). last_entropy is the most recent cross-modal
    entropy contribution observed for this token; tokens that never appear
    as visual attention targets keep 0.
    """

    __slots__ = ("meta", "key", "value", "accum_attn", "last_entropy")

    def __init__(self, meta: TokenMeta, key: Vector, value: Vector):
        self.meta = meta
        self.key = as_vector(key)
        self.value = as_vector(value)
        self.accum_attn = 0.0
        self.last_entropy = 0.0

    def clone(self) -> "KVEntry":
        out = KVEntry(self.meta, self.key, self.value)
        out.accum_attn = self.accum_attn
        out.last_entropy = self.last_entropy
        return out


class Cache:
    """Ordered KV entries with strictly increasing token ids."""

    def __init__(self, head_dim: int):
        self.head_dim = head_dim
        self.entries: list[KVEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def token_ids(self) -> list[int]:
        return [e.meta.token_id for e in self.entries]

    def append(self, entry: KVEntry) -> None:
        if entry.key.shape[0] != self.head_dim or entry.value.shape[0] != self.head_dim:
            raise ShapeMismatch(
                f"entry dim {entry.key.shape[0]} vs head_dim {self.head_dim}"
            )
        if self.entries:
            last_id = self.entries[-1].meta.token_id
            if entry.meta.token_id == last_id or any(
                e.meta.token_id == entry.meta.token_id for e in self.entries
            ):
                raise DuplicateToken(f"token {entry.meta.token_id} already cached")
            if entry.meta.token_id < last_id:
                raise OutOfOrder(
                    f"token {entry.meta.token_id} appended after {last_id}"
                )
        self.entries.append(entry)

    def attend(self, q: Vector) -> tuple[Vector, Vector]:
        """Scaled dot-product attention of q over all cached entries.

        Returns (output, weights); weights is the softmax of q.k_i / sqrt(d)
        in entry order and always sums to 1.
        """
        if not self.entries:
            raise EmptyCache("attend on empty cache")
        q = as_vector(q)
        if q.shape[0] != self.head_dim:
            raise ShapeMismatch(f"query dim {q.shape[0]} vs head_dim {self.head_dim}")
        keys = np.stack([e.key for e in self.entries])
        values = np.stack([e.value for e in self.entries])
        scores = keys @ q / math.sqrt(self.head_dim)
        weights = softmax(scores)
        return weights @ values, weights

    def accumulate(self, weights: Vector) -> None:
        """Add one attention distribution into the entries' running sums."""
        weights = as_vector(weights)
        if weights.shape[0] != len(self.entries):
            raise ShapeMismatch(
                f"{weights.shape[0]} weights for {len(self.entries)} entries"
            )
        for entry, w in zip(self.entries, weights):
            entry.accum_attn += float(w)

    def evict(self, token_ids: set[int]) -> list[KVEntry]:
        """Remove the given tokens; returns them in original sequence order."""
        present = set(self.token_ids())
        missing = set(token_ids) - present
        if missing:
            raise UnknownToken(f"cannot evict unknown tokens {sorted(missing)}")
        evicted = [e for e in self.entries if e.meta.token_id in token_ids]
        self.entries = [e for e in self.entries if e.meta.token_id not in token_ids]
        return evicted

    def memory_bytes(self) -> int:
        """Key+value payload bytes; metadata excluded by convention."""
        return len(self.entries) * 2 * self.head_dim * BYTES_PER_REAL

    def visual_mask(self) -> list[bool]:
        return [e.meta.modality is Modality.VISUAL for e in self.entries]

    def clone(self) -> "Cache":
        out = Cache(self.head_dim)
        out.entries = [e.clone() for e in self.entries]
        return out
