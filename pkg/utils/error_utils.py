"""
Error Handling Utilities

This module provides centralized error handling functionality for the application.
"""
import logging
from typing import Optional, Any, Dict, Sequence, Type
from functools import wraps

import numpy as np

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

class AppError(Exception):
    """Base exception class for application errors"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

class ShapeError(AppError):
    """Tensor or raster shape contract violations"""
    pass

class ChannelCountError(ShapeError):
    """Wrong number of input channels"""
    pass

class ConfigurationError(AppError):
    """Invalid configuration values or impossible layer geometry"""
    pass

class ValidationError(AppError):
    """Data validation errors"""
    pass

class MaskValueError(ValidationError):
    """Mask holds values outside {0, 1}"""
    pass

class LabelValueError(ValidationError):
    """Label map holds values outside {0, 1, 2}"""
    pass

class FormatError(AppError):
    """Malformed file contents; details carry the byte offset when known"""
    pass

class WeightFormatError(FormatError):
    """Malformed AQSW weight file"""
    pass

class RasterFormatError(FormatError):
    """Malformed NetPBM raster"""
    pass

class GenerationError(AppError):
    """Synthetic scene generation failures"""
    pass

class NonFiniteError(AppError):
    """NaN or Inf appeared during training"""
    pass

class UsageError(AppError):
    """API misuse (wrong argument kinds, empty inputs)"""
    pass

def handle_error(error: Exception) -> Dict[str, Any]:
    """
    Convert an exception into a standardized error response format.

    Args:
        error: The exception to handle

    Returns:
        Dictionary with error details
    """
    error_type = error.__class__.__name__

    if isinstance(error, AppError):
        return {
            'success': False,
            'error': {
                'type': error_type,
                'message': error.message,
                'details': error.details
            }
        }

    # Handle unexpected errors
    logger.error(f"Unexpected error: {str(error)}", exc_info=True)
    return {
        'success': False,
        'error': {
            'type': error_type,
            'message': str(error),
            'details': {'unexpected': True}
        }
    }

def with_error_handling(error_class: Type[Exception] = AppError):
    """
    Decorator for handling errors in functions.

    Args:
        error_class: The type of error to catch and handle

    Returns:
        Decorated function
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return {
                    'success': True,
                    'data': func(*args, **kwargs)
                }
            except error_class as e:
                return handle_error(e)
            except Exception as e:
                return handle_error(e)
        return wrapper
    return decorator

def validate_shape(actual: Sequence[int], expected: Sequence[Optional[int]], name: str) -> None:
    """
    Validate a shape against an expected pattern.

    Args:
        actual: Observed shape
        expected: Expected shape; None entries match any extent
        name: What is being checked, used in the error message

    Raises:
        ShapeError: If rank or any fixed extent differs
    """
    actual = tuple(int(a) for a in actual)
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        raise ShapeError(
            f"Invalid shape for {name}",
            {
                'expected': [e if e is not None else '*' for e in expected],
                'actual': list(actual)
            }
        )


def validate_binary_mask(mask: np.ndarray, name: str = "mask") -> None:
    """
    Validate that a mask only holds 0 and 1.

    Args:
        mask: Array to validate
        name: Name used in the error message

    Raises:
        MaskValueError: If any value lies outside {0, 1}
    """
    bad = ~np.isin(mask, (0, 1))
    if np.any(bad):
        raise MaskValueError(
            f"{name} must only contain values 0 and 1",
            {'invalid_values': sorted(set(np.unique(np.asarray(mask)[bad]).tolist()))[:10]}
        )


def validate_label_map(labels: np.ndarray, name: str = "labels") -> None:
    """
    Validate that a label map only holds the QA classes 0, 1 and 2.

    Args:
        labels: Array to validate
        name: Name used in the error message

    Raises:
        LabelValueError: If any value lies outside {0, 1, 2}
    """
    bad = ~np.isin(labels, (0, 1, 2))
    if np.any(bad):
        raise LabelValueError(
            f"{name} must only contain values 0, 1 and 2",
            {'invalid_values': sorted(set(np.unique(np.asarray(labels)[bad]).tolist()))[:10]}
        )
