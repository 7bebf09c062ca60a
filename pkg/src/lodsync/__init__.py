"""Adaptive level-of-detail state synchronization for client-server games."""

from .organization import (
    AssignmentChange,
    ConfigError,
    EntityRecord,
    GroupConfig,
    Organization,
    RoleSpec,
    er_trigger_check,
    expected_group,
    reassign_all,
    score_coefficient,
    validate_group_config,
)

__version__ = "0.1.0"
