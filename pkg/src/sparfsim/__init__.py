"""sparfsim: flash-aware sparse attention with a desk-scale model of the
surrounding computational-storage system."""

from .core import (AccessTrace, AttentionResult, HeadConfig, HeadTensors,
                   SelectionMask, alpha_mass, approx_scores, argtopk,
                   dense_attention, filter_groups, group_expand,
                   sparf_attention, sparq_attention, update_value_mean)
from .engine import EngineConfig, FlashLink, HeadWork, StageBreakdown, \
    head_schedule, stage_latencies
from .errors import (CapacityError, ConfigError, ConsistencyError,
                     DegenerateQueryError, InfeasibleError, MappingError)
from .flashsim import (EventTimeline, FlashTiming, measure_bandwidth,
                       schedule_programs, schedule_reads)
from .layout import (EmbeddingStripeKey, FlashGeometry, KVCacheLayout,
                     PhysicalPageAddress, TokenGroupKey, WriteStats,
                     embedding_stripe_tokens, group_size_tokens)
from .system import (HardwareSpec, ModelSpec, OPT_13B, ScenarioReport,
                     Sparsity, kv_cache_bytes, operator_cost, simulate,
                     simulate_baseline, simulate_csd_offload)

__version__ = "0.1.0"
