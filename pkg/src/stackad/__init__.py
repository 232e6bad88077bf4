"""Zero-shot anomaly detection with clustered stacked prompts."""

from .csp import (
    ClusterModel,
    PromptTemplateSet,
    build_prompt,
    build_test_prompts,
    category_text_features,
    cluster_score,
    kmeans,
    select_clusters,
)
from .efa import (
    AnomalyMap,
    HeadBank,
    ProjectionHead,
    TrainConfig,
    anomaly_map,
    attention_weights,
    dice_loss,
    focal_loss,
    infer,
    project,
    seg_loss_and_grad,
    train,
    upsample,
)
from .metrics import ScoredSet, aupro, auroc, average_precision, connected_components, evaluate_run, f1_max
from .mock import MockSpec, MockTextStore, generate_mock_dataset, mock_text_embed
from .rpl import LearnablePromptPair, RplConfig, classify, image_score, init_prompts, rpl_loss, train_rpl
from .store import (
    DatasetManifest,
    Dims,
    FeatureBundle,
    TextFeature,
    l2_normalize,
    read_feature_file,
    write_feature_file,
)

__version__ = "0.1.0"
