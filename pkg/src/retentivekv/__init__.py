"""RetentiveKV: KV-cache compression as continuous state evolution.

Evicted key/value pairs are scored by cross-modal attention entropy and
absorbed into constant-memory matrix states that a gated, query-conditioned
readout taps during decoding. A simulator harness compares the policy against
discrete-eviction baselines on synthetic multimodal workloads with planted
deferred-critical tokens.
"""

__version__ = "0.1.0"

from .errors import RetentiveKVError
from .harness import Episode, EpisodeMetrics, WorkloadConfig, generate, run_episode
from .kv_cache import Cache, KVEntry, Modality, TokenMeta
from .policies import (
    AblationFlags,
    Budget,
    PolicyConfig,
    PolicyKind,
    StepOutcome,
    build_policy,
)
from .retention import Action, EntropyReport, RetentionDecision
from .retrieval import GateParams, RetrievedOutput
from .state_space import DecayMask, ImageStatePair, StateMatrix, TransitionParams

__all__ = [
    "__version__",
    "RetentiveKVError",
    "Episode",
    "EpisodeMetrics",
    "WorkloadConfig",
    "generate",
    "run_episode",
    "Cache",
    "KVEntry",
    "Modality",
    "TokenMeta",
    "AblationFlags",
    "Budget",
    "PolicyConfig",
    "PolicyKind",
    "StepOutcome",
    "build_policy",
    "Action",
    "EntropyReport",
    "RetentionDecision",
    "GateParams",
    "RetrievedOutput",
    "DecayMask",
    "ImageStatePair",
    "StateMatrix",
    "TransitionParams",
]
