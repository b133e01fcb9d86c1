"""Query-conditioned readout of the continuous states.

The gate turns the step's average cross-modal entropy into a scalar in
(0, 1) that throttles how much retrieved context reaches the final output.
Because layer normalization is scale invariant, applying the gate inside the
norm alone could not control the retrieved contribution; the fuse step
therefore scales the normalized readout by the same gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch
from .numerics import Vector, as_vector, layer_norm, logistic, vec_mat
from .state_space import ImageStatePair, StateMatrix


@dataclass(frozen=True)
class GateParams:
    """Logistic-link coefficients mapping step entropy to the gate."""

    w_r: float = 1.0
    b_r: float = 0.0


@dataclass
class RetrievedOutput:
    o_s: Vector
    gate: float
    visual_part: Vector
    recall_part: Vector


def gate(h_avg: float, params: GateParams) -> float:
    """logistic(w_r * h_avg + b_r), strictly inside (0, 1)."""
    return logistic(params.w_r * h_avg + params.b_r)


def retrieve(
    q: Vector,
    visual_pairs: Sequence[ImageStatePair],
    recall_state: StateMatrix | None,
    gate_value: float,
) -> RetrievedOutput:
    """Read the states with query q.

    visual_part sums, over images, the average of the query's readout from
    the image's two scan-order states; recall_part reads the text state. The
    combined vector is layer normalized, with the all-zero case mapping to
    the zero vector so an empty memory retrieves exactly nothing.
    """
    q = as_vector(q)
    d = q.shape[0]
    visual_part = np.zeros(d, dtype=np.float64)
    for pair in visual_pairs:
        row, col = pair.states()
        if row.d != d or col.d != d:
            raise ShapeMismatch(f"visual state dim {row.d} vs query dim {d}")
        visual_part += 0.5 * (vec_mat(q, row.S) + vec_mat(q, col.S))
    if recall_state is not None:
        if recall_state.d != d:
            raise ShapeMismatch(f"recall state dim {recall_state.d} vs query dim {d}")
        recall_part = vec_mat(q, recall_state.S)
    else:
        recall_part = np.zeros(d, dtype=np.float64)
    combined = visual_part + gate_value * recall_part
    o_s = layer_norm(combined) if np.any(combined != 0.0) else np.zeros(d, dtype=np.float64)
    return RetrievedOutput(o_s=o_s, gate=gate_value, visual_part=visual_part, recall_part=recall_part)


def fuse(local_out: Vector, retrieved: RetrievedOutput) -> Vector:
    """local attention output plus the gated state readout.

    A zero readout returns local_out unchanged, bit for bit: with nothing
    ever absorbed the whole pipeline must be indistinguishable from plain
    attention over the retained entries.
    """
    local_out = as_vector(local_out)
    o_s = as_vector(retrieved.o_s)
    if local_out.shape != o_s.shape:
        raise ShapeMismatch(f"fuse: {local_out.shape} vs {o_s.shape}")
    if not np.any(o_s != 0.0):
        return local_out
    return local_out + retrieved.gate * o_s
