"""Symbolic regression by tree search over expression mutations."""

from .expressions import (
    BinaryOp,
    Constant,
    ConstraintConfig,
    DimensionError,
    EvalOutcome,
    Node,
    ParseError,
    UnaryOp,
    Variable,
    check_constraints,
    evaluate,
    parse_prefix,
    simplify,
    size,
    to_infix,
    to_prefix,
)
from .mutations import (
    Mutation,
    MutationTrace,
    apply_mutation,
    dismantle,
    replay,
    validate_mutation,
)
from .datagen import Dataset, GenConfig, build_corpus, load_corpus, make_example, read_csv_dataset
from .metrics import ParetoPoint, pareto_ranks, r_squared, split_dataset
from .constopt import ConstOptConfig, optimize_constants
from .policy import (
    ConstantCritic,
    FactoredPolicy,
    LearnedCritic,
    PolicyExhausted,
    UniformRandomPolicy,
    critic_update,
    imitation_update,
    sample_mutations,
)
from .mcts import TrialConfig, TrialRanges, run_trial, sample_trial_config
from .expert_iteration import CampaignConfig, run_campaign
from .bench import run_benchmark

__version__ = "0.1.0"
