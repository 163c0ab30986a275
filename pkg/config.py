from __future__ import annotations

import yaml
from pathlib import Path
from typing import Any, Dict, Optional, Union

# Project root (parent of this file)
BASE_DIR = Path(__file__).resolve().parent


def load(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Parsed YAML configuration; sections missing from the file are empty."""
    with open(path or BASE_DIR / "config.yaml", "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            return {}
        return data


def section(cfg: Dict[str, Any], name: str) -> Dict[str, Any]:
    value = cfg.get(name) or {}
    return dict(value) if isinstance(value, dict) else {}


CFG = load()
