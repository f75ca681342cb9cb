"""relog: runtime-feedback-driven logging plan generation and evaluation."""

__version__ = "0.1.0"

from relog.core import (  # noqa: F401
    AnchorOutOfRange,
    InstrumentedUnit,
    LoggingPlan,
    LoggingStatement,
    MarkerCorruption,
    Position,
    RenderProfile,
    Severity,
    SourceUnit,
    apply_plan,
    normalize_plan,
    strip_plan,
    verify_logic_preserved,
)
