"""Graph-based step-level credit assignment for group-based policy optimization.

Rollout groups are merged into a state-transition graph; each transition is
credited by how much it shortens the cost-to-goal, standardized among the
alternatives observed from the same state.
"""

from .credit import (
    AdvantageTable,
    CompactCredit,
    CreditParams,
    build_step_groups,
    combined_advantages,
    compact_advantages,
    episode_advantages,
    gigpo_step_advantages,
    graph_advantages,
    graph_step_reward,
)
from .envs import ChainTrap, KeyDoorGrid, MiniSokoban, Status, make_env
from .graph import (
    CompactGraph,
    DistanceMap,
    Edge,
    TransitionGraph,
    aggregate,
    compact_graph,
    compute_distances,
    effective_distance,
    export_dot,
    graph_from_edges,
)
from .harness import (
    ExperimentConfig,
    MetricsLog,
    dynamic_sample,
    evaluate,
    iterations_to_threshold,
    rollout_group,
    train,
)
from .kernels import BACKEND
from .policy import (
    OptimConfig,
    TabularPolicy,
    action_probabilities,
    apply_update,
    kl_exact,
    surrogate_loss,
)
from .probes import brute_force_distances, monotonicity_probe, variance_probe
from .rollout import (
    Outcome,
    StateKey,
    Step,
    Trajectory,
    TrajectorySet,
    canonical_state_key,
    read_rollouts,
    trajectory_return,
    write_rollouts,
)

__version__ = "0.1.0"
