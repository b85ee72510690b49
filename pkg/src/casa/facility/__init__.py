"""Facility orchestration: configuration, lifecycle, reconciliation and the ``casa`` CLI."""

from .config import DEFAULTS, FacilityConfig, UserGrant, from_dict, load_config
from .core import Facility

__all__ = ["DEFAULTS", "Facility", "FacilityConfig", "UserGrant", "from_dict", "load_config"]
