"""
Configuration Manager Module

This module provides a centralized way to manage application settings
(data and output locations, worker count, logging) independent of the
command line and UI front ends. Model and training parameters live in
config.schemas instead.
"""
import os
import json
import logging
from typing import Any, Callable, Dict, Optional

from utils.env_utils import get_default_data_dir

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

DEFAULTS: Dict[str, Any] = {
    'output_dir': 'runs',
    'workers': 1,
    'log_level': 'INFO',
    'show_progress': True,
}


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(raw)


# Environment variable -> (setting, parser)
ENV_SETTINGS: Dict[str, tuple] = {
    'AQSNET_DATA_DIR': ('data_dir', str),
    'AQSNET_OUTPUT_DIR': ('output_dir', str),
    'AQSNET_WORKERS': ('workers', int),
    'AQSNET_LOG_LEVEL': ('log_level', str.upper),
    'AQSNET_SHOW_PROGRESS': ('show_progress', _parse_bool),
}


class ConfigManager:
    """
    Application settings, layered as defaults < config file < environment.
    """

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize the configuration manager.

        Args:
            config_path: Optional path to a JSON config file
        """
        self.config = dict(DEFAULTS, data_dir=get_default_data_dir())
        self.config_path = config_path or os.path.join(
            os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
            'config',
            'config.json'
        )
        self._load_file()
        self._load_from_env()

    def _load_file(self) -> None:
        if not os.path.exists(self.config_path):
            return
        try:
            with open(self.config_path, 'r') as f:
                settings = json.load(f)
        except (OSError, ValueError) as e:
            logger.warning(f"Error loading config from {self.config_path}: {str(e)}")
            return
        if not isinstance(settings, dict):
            logger.warning(f"Ignoring {self.config_path}: expected a JSON object")
            return
        unknown = sorted(set(settings) - set(self.config))
        if unknown:
            logger.warning(f"Ignoring unknown settings in {self.config_path}: {unknown}")
        self.config.update({k: v for k, v in settings.items() if k in self.config})

    def _load_from_env(self) -> None:
        for env_var, (key, parse) in ENV_SETTINGS.items():
            if env_var not in os.environ:
                continue
            parser: Callable[[str], Any] = parse
            try:
                self.config[key] = parser(os.environ[env_var])
            except ValueError:
                logger.warning(f"Ignoring invalid {env_var}={os.environ[env_var]!r}")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a setting.

        Args:
            key: Setting name
            default: Value returned when the setting is unknown

        Returns:
            The setting or default
        """
        return self.config.get(key, default)
