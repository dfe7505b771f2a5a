"""Monte Carlo simulation of the absorbed diffusion."""

from .engine import (
    DefectEstimate,
    PathBatchResult,
    ProbeResult,
    Scheme,
    SimConfig,
    TerminalSamples,
    boundary_continuity_probe,
    defect,
    distribution_compare,
    exact_sum,
    exit_price,
    ks_critical_value,
    merge_all,
    price,
    simulate_samples,
    simulate_terminal,
)

__all__ = [
    "DefectEstimate",
    "PathBatchResult",
    "ProbeResult",
    "Scheme",
    "SimConfig",
    "TerminalSamples",
    "boundary_continuity_probe",
    "defect",
    "distribution_compare",
    "exact_sum",
    "exit_price",
    "ks_critical_value",
    "merge_all",
    "price",
    "simulate_samples",
    "simulate_terminal",
]
