"""Exception hierarchy shared across mcforge modules.

Every error raised on purpose derives from :class:`MCForgeError` so the CLI can
map it to exit code 1 with a one-line message.
"""


class MCForgeError(Exception):
    """Base class for all mcforge errors."""

    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


# deck
class DeckError(MCForgeError):
    code = "deck_error"


class FieldOverflow(DeckError):
    code = "field_overflow"


class UnboundPlaceholder(DeckError):
    code = "unbound_placeholder"


class MissingFile(DeckError):
    code = "missing_file"


class DuplicateName(DeckError):
    code = "duplicate_name"


class EmptyCSV(DeckError):
    code = "empty_csv"


class InvalidParameterName(DeckError):
    code = "invalid_parameter_name"


# runner
class RunnerError(MCForgeError):
    code = "runner_error"


class SpawnError(RunnerError):
    code = "spawn_error"


class MissingStartCard(RunnerError):
    code = "missing_start_card"


# postproc
class PostprocError(MCForgeError):
    code = "postproc_error"


class NoBinaryFiles(PostprocError):
    code = "no_binary_files"


class AllUtilitiesFailed(PostprocError):
    code = "all_utilities_failed"


class MissingPrimaries(PostprocError):
    code = "missing_primaries"


class NoNumericTable(PostprocError):
    code = "no_numeric_table"


class RaggedRow(PostprocError):
    code = "ragged_row"


# stats
class StatsError(MCForgeError):
    code = "stats_error"


class ZeroWeight(StatsError):
    code = "zero_weight"


class InvalidTarget(StatsError):
    code = "invalid_target"


class ZeroCounts(StatsError):
    code = "zero_counts"


# microdose
class MicrodoseError(MCForgeError):
    code = "microdose_error"


class EmptyGainTable(MicrodoseError):
    code = "empty_gain_table"


class NonPositiveEdge(MicrodoseError):
    code = "non_positive_edge"


class UnknownKernel(MicrodoseError):
    code = "unknown_kernel"


# plotsvg
class PlotError(MCForgeError):
    code = "plot_error"


class NonPositiveLogData(PlotError):
    code = "non_positive_log_data"

    def __init__(self, axis: str, message: str = ""):
        super().__init__(message or f"log-scaled {axis} axis has data <= 0", axis=axis)
        self.axis = axis


class EmptySeries(PlotError):
    code = "empty_series"


# workflow / orchestrator
class WorkflowError(MCForgeError):
    code = "workflow_error"

    def __init__(self, message: str = "", step: str | None = None, **details):
        super().__init__(message, step=step, **details)
        self.step = step


class UnknownParameter(WorkflowError):
    code = "unknown_parameter"


class BudgetExceeded(WorkflowError):
    code = "budget_exceeded"


class UnknownTool(WorkflowError):
    code = "unknown_tool"


class ArgumentValidation(WorkflowError):
    code = "argument_validation"


# assistant
class AssistantError(MCForgeError):
    code = "assistant_error"


class ExtractionFailed(AssistantError):
    code = "extraction_failed"


class ProviderError(AssistantError):
    code = "provider_error"


class EmptyStore(AssistantError):
    code = "empty_store"


# cli
class ConfigError(MCForgeError):
    code = "config_error"
