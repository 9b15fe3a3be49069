from .ekf import StateTrajectory, ekf_run
from .tsarm import (
    AlterationTrajectory,
    SolverConfig,
    SolverDiagnostics,
    SplitOutputs,
    TsarmData,
    TsarmSolution,
    d2_matrix,
    kkt_check,
    split_outputs,
    tsarm_objective,
    tsarm_solve,
)

__all__ = [
    "AlterationTrajectory",
    "SolverConfig",
    "SolverDiagnostics",
    "SplitOutputs",
    "StateTrajectory",
    "TsarmData",
    "TsarmSolution",
    "d2_matrix",
    "ekf_run",
    "kkt_check",
    "split_outputs",
    "tsarm_objective",
    "tsarm_solve",
]
