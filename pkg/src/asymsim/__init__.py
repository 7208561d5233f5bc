"""asymsim: analytic simulator of LLM decode on asymmetric two-tier memory."""

from .errors import (AsymsimError, BudgetExceededError, ConfigError,
                     OutOfMemoryError, ResidencyFault)
from .hardware import (ChipSpec, EnergyParams, MemoryTierSpec, PlatformSpec,
                       TranslationSpec, kernel_time, load_platform,
                       peak_throughput, platform_preset)
from .mapping import (MappingDecision, MigrationPlan, PeakExecParams,
                      exhaustive_best, flexgen_map, greedy_map, major_map,
                      peak_exec_estimate, plan_migration)
from .memsim import (FreeSpaceManager, MemoryState, PageTable, TlbState,
                     fragmentation_report)
from .workload import (BatchState, FootprintBreakdown, KernelDesc, ModelSpec,
                       OpClass, ScenarioPolicy, Side, SublayerKind,
                       advance_batch, enumerate_kernels, footprint, load_model)
from .engine import (AnalyticEvaluator, IterationReport, RunReport,
                     ScenarioConfig, SystemVariant, energy_per_token,
                     run_generation, run_iteration, run_point, run_variant,
                     speedup)

__version__ = "0.1.0"
