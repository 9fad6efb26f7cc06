from .ablation import (
    DEFAULT_CONDITIONS,
    GROUP_CONDITIONS,
    MODE_CONDITIONS,
    AblationRow,
    Condition,
    conditions_by_name,
    run_ablation,
    write_table,
)
from .features import FeatureLookupError, FeatureTable, episode_table, gather
from .metrics import ConfusionMatrix, confusion_from_predictions, significance_test
from .sweep import mean_std, seed_sweep
from .training import (
    PROFILES,
    Evaluation,
    Model,
    RunResult,
    TrainConfig,
    TrainOutcome,
    best_epoch,
    evaluate,
    evaluate_detailed,
    profile,
    train,
)
from .video import VideoResult, classify_video, pair_probabilities
