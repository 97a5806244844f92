"""
Standardized error handling utilities for the PCNO toolkit.
Provides one exception type with consistent error codes across all modules,
and the mapping from those codes to CLI exit codes.
"""

import logging
from typing import Any, Dict, Optional

# Standard error codes for consistent failure reports
ERROR_CODES = {
    # Usage errors (exit code 2)
    "USAGE_ERROR": "Invalid command-line usage",
    "INVALID_CONFIG": "Configuration validation failed",
    "NOT_FOUND": "Requested file or resource not found",

    # Tensor and differentiation errors
    "SHAPE_MISMATCH": "Operand shapes are incompatible",
    "NON_FINITE_INPUT": "Non-finite value encountered",
    "NOT_SCALAR": "Backward requires a scalar loss",

    # Geometry errors
    "DEGENERATE_CELL": "Cell has zero measure",
    "ISOLATED_NODE": "Node belongs to no cell or has no neighbors",
    "INSUFFICIENT_NEIGHBORS": "Node has fewer neighbors than the intrinsic dimension",
    "ZERO_MEASURE": "Subdomain has zero measure",
    "INVALID_DENSITY": "Density or measure is not positive",
    "MISSING_FEATURES": "Sample has not been preprocessed",

    # Operator errors
    "LENGTH_UNDERFLOW": "Learnable length scale underflowed",
    "EMPTY_SUBDOMAIN": "Subdomain has no unmasked nodes",

    # Training errors
    "ZERO_REFERENCE": "Reference field is identically zero",
    "EMPTY_DATASET": "Dataset contains no samples",
    "TRAINING_DIVERGED": "Training loss diverged",
    "BATCH_OVERFLOW": "Sample exceeds the batch node capacity",

    # Storage errors
    "INCONSISTENT_DIMS": "Samples have inconsistent channel dimensions",
    "CHECKSUM_MISMATCH": "Record checksum does not match the manifest",
    "VERSION_MISMATCH": "Unsupported container or checkpoint version",

    # Solver errors
    "SINGULAR_SYSTEM": "Linear system is singular",
    "INVALID_COEFFICIENT": "PDE coefficient is out of range",

    # System errors
    "INTERNAL_ERROR": "Unexpected internal error",
}

USAGE_CODES = frozenset({"USAGE_ERROR", "INVALID_CONFIG", "NOT_FOUND"})

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class PCNOError(Exception):
    """Single exception type raised by every toolkit module."""

    def __init__(self, error_code: str, message: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        if error_code not in ERROR_CODES:
            logging.warning(f"Unknown error code used: {error_code}")
            error_code = "INTERNAL_ERROR"
        self.error_code = error_code
        self.message = message or ERROR_CODES[error_code]
        self.details = details or {}
        super().__init__(f"[{error_code}] {self.message}")

    @property
    def exit_code(self) -> int:
        return EXIT_USAGE if self.error_code in USAGE_CODES else EXIT_RUNTIME

    def to_dict(self) -> Dict[str, Any]:
        data = {"error_code": self.error_code, "message": self.message}
        if self.details:
            data["details"] = self.details
        return data


def handle_exception(e: Exception, context: str = "command") -> int:
    """
    Log an exception raised while running `context` and map it to an exit code.

    Args:
        e: The exception that occurred
        context: Context information for logging

    Returns:
        Process exit code (1 runtime failure, 2 usage error)
    """
    if isinstance(e, PCNOError):
        logging.error(f"Error in {context} [{e.error_code}]: {e.message} - Details: {e.details}")
        return e.exit_code

    error_type = type(e).__name__
    logging.critical(f"Unexpected error in {context}: {error_type} - {e}", exc_info=True)
    return EXIT_RUNTIME


# Common error shortcuts
def shape_error(op: str, *shapes) -> PCNOError:
    return PCNOError("SHAPE_MISMATCH", f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}",
                     {"op": op, "shapes": [list(s) for s in shapes]})


def validation_error(message: Optional[str] = None, details: Optional[Dict] = None) -> PCNOError:
    return PCNOError("INVALID_CONFIG", message, details)


def usage_error(message: Optional[str] = None) -> PCNOError:
    return PCNOError("USAGE_ERROR", message)


def not_found_error(message: Optional[str] = None) -> PCNOError:
    return PCNOError("NOT_FOUND", message)


def geometry_error(error_code: str, message: str, **details) -> PCNOError:
    return PCNOError(error_code, message, details)


def numerical_error(message: Optional[str] = None, **details) -> PCNOError:
    return PCNOError("NON_FINITE_INPUT", message, details)


def checksum_error(record_index: int, expected: str, actual: str) -> PCNOError:
    return PCNOError("CHECKSUM_MISMATCH", f"Checksum mismatch in record {record_index}",
                     {"record_index": record_index, "expected": expected, "actual": actual})


def version_error(expected: str, found: str, what: str = "container") -> PCNOError:
    return PCNOError("VERSION_MISMATCH", f"Unsupported {what} version {found!r}; expected {expected!r}",
                     {"expected": expected, "found": found})
