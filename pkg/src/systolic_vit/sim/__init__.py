"""Cycle-accurate systolic-array simulator."""

from .accelerator import (
    Accelerator,
    ResourceError,
    SimResult,
    build_sa_pipeline,
    check_locality,
    derive_timing,
    run_dsp_free,
    run_msa,
    run_stream,
    step,
)
from .config import DSP_FREE_STAGES, ArrayConfig, ConfigError, RegisterStages, StageLatencies, pe_total
from .trace import CycleTrace, TraceEvent
from .units import (
    AccumulatorOverflow,
    AlignmentError,
    HazardError,
    MacArray,
    PeState,
    PrematureLatch,
    SimulationError,
    WeightLoader,
    load_weights,
    triangular_delay,
)
