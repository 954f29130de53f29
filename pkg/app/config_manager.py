import json
import os
from pathlib import Path
from typing import Dict, Any, Optional

PROJECT_ROOT = Path(__file__).parent.parent
CONFIG_ENV = "DOCO_CONFIG"
OUTPUT_ROOT_ENV = "DOCO_OUTPUT_ROOT"


def resolve_config_path(path: Optional[str] = None) -> Path:
    """Explicit path, then $DOCO_CONFIG, then config.json, then the bundled example."""
    if path:
        return Path(path)
    if os.environ.get(CONFIG_ENV):
        return Path(os.environ[CONFIG_ENV])
    local = PROJECT_ROOT / "config.json"
    if local.exists():
        return local
    return PROJECT_ROOT / "config" / "config.example.json"


class ConfigManager:
    _instance = None
    _config = None
    _config_path = None

    def __new__(cls, path: Optional[str] = None):
        if cls._instance is None or path is not None:
            instance = super(ConfigManager, cls).__new__(cls)
            instance._config_path = resolve_config_path(path)
            instance._load_config()
            cls._instance = instance
        return cls._instance

    @classmethod
    def reload(cls, path: Optional[str] = None) -> "ConfigManager":
        cls._instance = None
        return cls(path)

    def _load_config(self):
        if not self._config_path.exists():
            raise FileNotFoundError(f"Configuration file {self._config_path} not found.")

        with open(self._config_path, 'r') as f:
            self._config = json.load(f)

    @property
    def path(self) -> Path:
        return self._config_path

    # Type-safe accessors
    @property
    def task_settings(self) -> Dict[str, Any]:
        return self._config.get("task", {})

    @property
    def encoder_settings(self) -> Dict[str, Any]:
        return self._config.get("encoder", {})

    @property
    def stream_settings(self) -> Dict[str, Any]:
        return self._config.get("stream", {})

    @property
    def adapter_settings(self) -> Dict[str, Any]:
        return self._config.get("adapter", {})

    @property
    def pretrain_settings(self) -> Dict[str, Any]:
        return self._config.get("pretrain", {})

    @property
    def experiment_settings(self) -> Dict[str, Any]:
        return self._config.get("experiment", {})

    @property
    def paths(self) -> Dict[str, str]:
        return self._config.get("paths", {})

    @property
    def output_root(self) -> str:
        """$DOCO_OUTPUT_ROOT wins over paths.output_dir."""
        return os.environ.get(OUTPUT_ROOT_ENV) or self.paths.get("output_dir", "output")
