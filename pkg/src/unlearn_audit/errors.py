"""Exception hierarchy.

Every error carries a stable ``code`` string so CLI output and run manifests
can report machine-readable failure causes.
"""


class AuditError(Exception):
    """Base class for all errors raised by this package."""

    code = "E_GENERIC"


class CorpusIoError(AuditError):
    code = "E_IO"


class ParseError(AuditError):
    code = "E_PARSE"

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateIdError(AuditError):
    code = "E_DUP_ID"


class BadPatternError(AuditError):
    code = "E_BAD_PATTERN"


class EmptyHistogramError(AuditError):
    code = "E_EMPTY_HIST"


class EmptyCorpusError(AuditError):
    code = "E_EMPTY_CORPUS"


class TooFewPiiError(AuditError):
    code = "E_TOO_FEW_PII"


class MissingPiiError(AuditError):
    code = "E_NO_PII"


class BadTokenError(AuditError):
    code = "E_BAD_TOKEN"


class NumericError(AuditError):
    """Non-finite loss or gradient encountered during a step."""

    code = "E_NUMERIC"


class BudgetExceededError(AuditError):
    code = "E_BUDGET"


class OneClassError(AuditError):
    code = "E_ONE_CLASS"


class DegenerateRetrainAucError(AuditError):
    code = "E_DEGENERATE_RETRAIN_AUC"


class DegenerateBaseError(AuditError):
    code = "E_DEGENERATE_BASE"


class MissingScenarioError(AuditError):
    code = "E_MISSING_SCENARIO"


class ConfigError(AuditError):
    code = "E_CONFIG"
