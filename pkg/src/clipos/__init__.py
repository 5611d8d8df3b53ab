"""Few-shot OOD detection by outlier synthesis from foreground patch features of a vision-language model."""

from .backbone import (Backbone, BackboneConfig, ContextConfig, HFClipBackbone, ToyBackbone, VVAttentionConfig,
                       build_backbone, patch_context_incorporate, vv_attention)
from .errors import ClipOSError, ConfigError, DataError, InputContractError, NumericError, ResolutionError
from .masking import (RegionPartition, clip_similarity_map, discrepancy_partition, similarity_map,
                      topk_partition)
from .objective import (EpisodeFeatures, LossReport, TrainConfig, entropy_max_loss, id_loss, ood_loss,
                        train)
from .scoring import MetricsReport, auroc, evaluate, mcm_score
from .synthesis import LambdaPolicy, SyntheticOutliers, masked_pool, synthesize_outliers
from .textbank import PromptBank, embed_prompts, similarity

__version__ = "0.1.0"
