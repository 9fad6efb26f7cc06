from .manifest import (
    DatasetSplit,
    DatasetStats,
    Episode,
    VideoPair,
    cleanse_negatives,
    dataset_stats,
    load_manifest,
    shaped_manifest,
    split_dataset,
    video_pairs,
    write_manifest,
)
from .synthetic import (
    Action,
    SyntheticConfig,
    SyntheticDataset,
    SyntheticWorld,
    WorldObject,
    generate_synthetic,
    generate_synthetic_videos,
    goal_satisfied,
    synthetic_registry,
)
