"""Exception types.

Every error carries a machine-greppable ``code`` that the CLI prints as a
prefix on standard error.
"""


class PrefMarginError(Exception):
    code = "E_VALIDATE"


class ValidationError(PrefMarginError, ValueError):
    code = "E_VALIDATE"


class ParseError(ValidationError):
    code = "E_PARSE"

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DivergenceError(PrefMarginError, RuntimeError):
    code = "E_DIVERGE"

    def __init__(self, message, batch_id=None):
        self.batch_id = batch_id
        super().__init__(message if batch_id is None else f"{message} (batch {batch_id})")


class GradCheckError(PrefMarginError):
    code = "E_GRADCHECK"
