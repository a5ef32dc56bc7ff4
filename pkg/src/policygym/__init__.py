"""policygym: runtime, verifier and synthesis toolkit for policy-governed
stateful tool-calling environments backed by trigger-enforced SQLite states."""

from .advantage import (
    AdvantageConfig,
    AdvantageTable,
    build_advantage_table,
    group_advantages,
    surrogate_objective,
    turn_refine,
)
from .executor import (
    EnvHandle,
    ErrorPayload,
    ToolCall,
    ToolResult,
    execute_tool,
    open_environment,
    open_environment_at,
    parse_engine_error,
    reset,
    safe_execute_tool,
    snapshot,
)
from .packages import (
    EnvironmentBundle,
    RolloutLimits,
    TaskPackage,
    ToolSpec,
    derive_tools,
    find_spoiler,
    load_package,
    save_package,
)
from .rollout import (
    Trajectory,
    Turn,
    compute_metrics,
    detect_stop,
    export_trajectory,
    import_trajectory,
    pass_at_k,
    pass_hat_k,
    run_episode,
)
from .snapshots import Snapshot
from .verify import (
    CanonicalRelationSet,
    DiffConfig,
    SnapshotDiff,
    canonicalize,
    dense_reward,
    diff,
    final_reward,
    proximity,
)

__version__ = "0.1.0"

__all__ = [
    "AdvantageConfig",
    "AdvantageTable",
    "CanonicalRelationSet",
    "DiffConfig",
    "EnvHandle",
    "EnvironmentBundle",
    "ErrorPayload",
    "RolloutLimits",
    "Snapshot",
    "SnapshotDiff",
    "TaskPackage",
    "ToolCall",
    "ToolResult",
    "ToolSpec",
    "Trajectory",
    "Turn",
    "build_advantage_table",
    "canonicalize",
    "compute_metrics",
    "dense_reward",
    "derive_tools",
    "detect_stop",
    "diff",
    "execute_tool",
    "export_trajectory",
    "final_reward",
    "find_spoiler",
    "group_advantages",
    "import_trajectory",
    "load_package",
    "open_environment",
    "open_environment_at",
    "parse_engine_error",
    "pass_at_k",
    "pass_hat_k",
    "proximity",
    "reset",
    "run_episode",
    "safe_execute_tool",
    "save_package",
    "snapshot",
    "surrogate_objective",
    "turn_refine",
]
