"""Logic-constrained training for compositional zero-shot recognition.

The package couples a linear verb/object scorer with first-order rules
(mutual exclusivity within sibling groups, hierarchy agreement between
fine and coarse labels) compiled into differentiable penalties, then
measures seen/unseen accuracy trade-offs under a calibration bias sweep
on a synthetic Gaussian-prototype benchmark.
"""

from .autodiff import Graph, GraphError, Node, backward, finite_diff_check, forward
from .data import (
    Composition,
    Dataset,
    DatasetSpec,
    LabelSpace,
    build_label_space,
    partition_samples,
    read_dataset,
    read_label_space,
    sample_dataset,
    write_dataset,
    write_label_space,
)
from .errors import (
    ConfigError,
    ExternalServiceError,
    NumericalError,
    ValidationError,
)
from .fol import (
    RuleSet,
    SymbolTable,
    gen_ecl_rules,
    gen_hpl_rules,
    parse_rules,
    print_rules,
    read_rules,
    write_rules,
)
from .fuzzy import FuzzyConfig, evaluate_rule, fuzzy_connective, quantifier_mean
from .hierarchy import (
    EndpointConfig,
    Hierarchy,
    aggregate_votes,
    cluster_verbs,
    query_llm_taxonomy,
    read_hierarchy,
    validate_hierarchy,
    write_hierarchy,
)
from .losses import (
    AsymLossParams,
    LossBreakdown,
    ScoreTable,
    combine_losses,
    exclusivity_degree,
    implication_degree,
    rule_loss_ecl,
    rule_loss_hpl,
)
from .metrics import (
    EvalReport,
    bias_sweep,
    build_report,
    read_curve_csv,
    render_curve_svg,
    summarize_curve,
    write_curve_csv,
    write_report_json,
)
from .model import forward_scores, init_params, load_checkpoint, predict_composition, save_checkpoint
from .seeding import substream
from .training import (
    AblationResult,
    TrainConfig,
    TrainResult,
    arm_config,
    evaluate_split,
    run_ablation,
    train,
    write_history_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AblationResult",
    "AsymLossParams",
    "Composition",
    "ConfigError",
    "Dataset",
    "DatasetSpec",
    "EndpointConfig",
    "EvalReport",
    "ExternalServiceError",
    "FuzzyConfig",
    "Graph",
    "GraphError",
    "Hierarchy",
    "LabelSpace",
    "LossBreakdown",
    "Node",
    "NumericalError",
    "RuleSet",
    "ScoreTable",
    "SymbolTable",
    "TrainConfig",
    "TrainResult",
    "ValidationError",
    "aggregate_votes",
    "arm_config",
    "backward",
    "bias_sweep",
    "build_label_space",
    "build_report",
    "cluster_verbs",
    "combine_losses",
    "evaluate_rule",
    "evaluate_split",
    "exclusivity_degree",
    "finite_diff_check",
    "forward",
    "forward_scores",
    "fuzzy_connective",
    "gen_ecl_rules",
    "gen_hpl_rules",
    "implication_degree",
    "init_params",
    "load_checkpoint",
    "parse_rules",
    "partition_samples",
    "predict_composition",
    "print_rules",
    "quantifier_mean",
    "query_llm_taxonomy",
    "read_curve_csv",
    "read_dataset",
    "read_hierarchy",
    "read_label_space",
    "read_rules",
    "render_curve_svg",
    "rule_loss_ecl",
    "rule_loss_hpl",
    "run_ablation",
    "sample_dataset",
    "save_checkpoint",
    "substream",
    "summarize_curve",
    "train",
    "validate_hierarchy",
    "write_curve_csv",
    "write_dataset",
    "write_hierarchy",
    "write_history_csv",
    "write_label_space",
    "write_report_json",
    "write_rules",
]
