"""Retrieval-conditioned training, evaluation and ablation harnesses."""

from retrodiff.trainer.ablation import (
    FractionRow,
    FusionRow,
    KRow,
    ablate_fusion,
    ablate_index_fraction,
    ablate_k,
    mean_nn_distance,
    write_table,
)
from retrodiff.trainer.evaluate import EvalReport, evaluate, evaluate_continuous, generate
from retrodiff.trainer.loop import (
    Corpus,
    TrainRecord,
    TrainResult,
    build_index,
    build_point_index,
    build_training_index,
    loss_reduction,
    make_optimizer,
    model_schedule,
    prepare_corpus,
    read_log,
    schedule_of,
    train,
    train_continuous,
    write_log,
)
from retrodiff.trainer.retrieval import (
    FilteredCondition,
    ScoreFilter,
    filter_candidates,
    retrieve_condition,
)

__all__ = [
    "Corpus",
    "EvalReport",
    "FilteredCondition",
    "FractionRow",
    "FusionRow",
    "KRow",
    "ScoreFilter",
    "TrainRecord",
    "TrainResult",
    "ablate_fusion",
    "ablate_index_fraction",
    "ablate_k",
    "build_index",
    "build_point_index",
    "build_training_index",
    "evaluate",
    "evaluate_continuous",
    "filter_candidates",
    "generate",
    "loss_reduction",
    "make_optimizer",
    "mean_nn_distance",
    "model_schedule",
    "prepare_corpus",
    "read_log",
    "retrieve_condition",
    "schedule_of",
    "train",
    "train_continuous",
    "write_log",
    "write_table",
]
