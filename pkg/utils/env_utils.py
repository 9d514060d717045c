"""
Environment Utilities Module

This module provides utility functions for detecting and handling
environment-specific concerns shared by the command line and UI adapters:
where datasets live, how many worker threads to use, and whether progress
bars make sense.
"""
import os
import sys


def is_running_in_docker() -> bool:
    """
    Check if the application is running inside a Docker container.

    Returns:
        True if running in Docker, False otherwise
    """
    try:
        # Primary method: check for .dockerenv file
        if os.path.exists('/.dockerenv'):
            return True

        # Secondary method: check cgroups
        with open('/proc/self/cgroup', 'r') as f:
            return any('docker' in line for line in f)
    except OSError:
        # Fallback to environment variable check
        return os.environ.get('RUNNING_IN_DOCKER', 'false').lower() == 'true'


def get_default_data_dir() -> str:
    """
    Get the default dataset directory based on environment.

    Returns:
        Default dataset directory
    """
    if is_running_in_docker():
        return os.environ.get('HOST_DATA_PATH', '/app/data')
    return os.environ.get('AQSNET_DATA_DIR', 'data')


def get_worker_count(requested: int = 0) -> int:
    """
    Resolve a worker-thread count.

    Args:
        requested: Explicit count; 0 or less means one per available CPU

    Returns:
        A count of at least 1
    """
    if requested and requested > 0:
        return requested
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def progress_enabled(requested: bool = True) -> bool:
    """Progress bars only when asked for and stderr is a terminal."""
    return bool(requested) and sys.stderr.isatty()
