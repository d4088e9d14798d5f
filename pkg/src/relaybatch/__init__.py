"""Continuous batching for a KV-cached decoder: insert and remove queries mid-flight."""
from .cache import KvCache
from .engine import (BatchState, PrefilledQuery, SlotStatus, embed_insert, empty_batch, extract_slot,
                     new_batch, prefill_group, prefill_query, release_prefix, run_solo, shape_insert, step)
from .model import ModelConfig, ScriptedModel, ScriptedQueryPlan, TinyTransformer, greedy_next, scripted_next
from .tensor_core import ContractViolation, DimensionError

from .metrics import IterationRecord, MetricsTrace, QueryRecord, Report, comparison_table, summarize
from .scheduler import (ConfigurationError, HostKvStore, InsertionOrder, MemoryBudgetError, Policy,
                        PreemptionRefused, Query, Scheduler, SchedulerConfig, compose_prefill_groups)
from .workload import WorkloadSpec, dump_workload, gen_workload, load_workload

__version__ = "0.1.0"
