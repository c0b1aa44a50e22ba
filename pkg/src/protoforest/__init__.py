"""Prototype explanations for random forests in tree space."""

__version__ = "0.1.0"

from .data import Dataset, ingest_csv
from .errors import ArtifactError, DataError, FormatVersionError, ParameterError, ProtoForestError
from .evaluation import (
    ConfusionMatrix,
    MetricsReport,
    SplitPlan,
    balanced_accuracy,
    evaluate,
    fidelity_to_forest,
    nearest_prototype_classify,
    stratified_split,
    sweep,
    weighted_accuracy,
)
from .forest import (
    DecisionTree,
    ForestModel,
    LeafAssignment,
    apply_leaves,
    load_model,
    predict,
    save_model,
    train_forest,
)
from .proximity import DistanceMatrix, build_distance_matrix, load_matrix, pair_proximity, save_matrix
from .selection import (
    PhantomSet,
    PrototypeSet,
    greedy_step,
    objective_f,
    select_a_pete,
    select_sm_a,
    select_sm_wa,
)
