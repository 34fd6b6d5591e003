from __future__ import annotations

from enum import IntEnum
from typing import Any


class ErrorCode(IntEnum):
    """Error kinds raised across the package"""

    INVALID_PARAMETER = 1001
    INVALID_INPUT = 1002
    SHAPE_ERROR = 1003
    NUMERIC_ERROR = 1004
    EMPTY_BATCH = 1005
    EMPTY_DISTRIBUTION = 1006
    CONFIGURATION_ERROR = 1007
    COHORT_EMPTY = 1008
    UNDEFINED_METRIC = 1009
    UNSUPPORTED_K = 1010
    INVALID_SPEC = 1011
    PARSE_ERROR = 1012
    TRAINING_ABORTED = 1013
    IO_ERROR = 1014
    UNKNOWN_ERROR = 1099


# Command-line exit statuses. Anything not listed exits with 1.
EXIT_STATUSES = {
    ErrorCode.INVALID_PARAMETER: 2,
    ErrorCode.CONFIGURATION_ERROR: 2,
    ErrorCode.PARSE_ERROR: 2,
    ErrorCode.INVALID_SPEC: 2,
    ErrorCode.UNSUPPORTED_K: 2,
    ErrorCode.NUMERIC_ERROR: 3,
    ErrorCode.TRAINING_ABORTED: 3,
    ErrorCode.IO_ERROR: 4,
}


def get_exit_status(code: ErrorCode) -> int:
    return EXIT_STATUSES.get(code, 1)


class FairDiError(Exception):
    def __init__(
        self, msg: str, code: ErrorCode = ErrorCode.UNKNOWN_ERROR, **details: Any
    ):
        super().__init__(f"{code}: {msg}")
        self.msg = msg
        self.code = code
        self.details = details
