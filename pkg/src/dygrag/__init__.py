from .exceptions import DygragError
from .pipeline import (
    emit_report,
    load_config,
    MatrixAxes,
    PipelineConfig,
    run_all,
    run_matrix,
    run_stage,
    STAGES,
)

__all__ = [
    "DygragError",
    "MatrixAxes",
    "PipelineConfig",
    "STAGES",
    "emit_report",
    "load_config",
    "run_all",
    "run_matrix",
    "run_stage",
]
