"""Tensor-parallel Transformer inference across memory-constrained chips.

Plan zero-duplication weight sharding, check that the partitioned block is
numerically equivalent to the single-device one, and estimate per-block
latency, runtime breakdown, energy and EDP.
"""

__version__ = "0.1.0"

from .energy import EnergyConstants, EnergyReport, edp, energy_total  # noqa: E402
from .errors import (  # noqa: E402
    CacheFull,
    ConfigError,
    InconsistentPlan,
    IndivisibleHeads,
    IndivisibleIntermediate,
    PlanMismatch,
    ShapeMismatch,
    TpmcuError,
)
from .execution import KVCache, run_block_monolithic, run_block_partitioned  # noqa: E402
from .model import BlockWeights, ModelConfig, block_weight_bytes, load_config, preset, validate  # noqa: E402
from .partition import PartitionPlan, comm_bytes_per_block, plan_partition, verify_plan  # noqa: E402
from .perf import ChipSpec, EfficiencyModel, LinkSpec, Timeline, plan_residency, simulate_block, sweep  # noqa: E402

__all__ = [
    "BlockWeights", "CacheFull", "ChipSpec", "ConfigError", "EfficiencyModel", "EnergyConstants",
    "EnergyReport", "InconsistentPlan", "IndivisibleHeads", "IndivisibleIntermediate", "KVCache",
    "LinkSpec", "ModelConfig", "PartitionPlan", "PlanMismatch", "ShapeMismatch", "Timeline",
    "TpmcuError", "block_weight_bytes", "comm_bytes_per_block", "edp", "energy_total", "load_config",
    "plan_partition", "plan_residency", "preset", "run_block_monolithic", "run_block_partitioned",
    "simulate_block", "sweep", "validate", "verify_plan",
]  # fmt: skip
