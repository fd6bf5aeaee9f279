"""Cross-modal attention with recurrent correspondence and aggregation regulators."""

from .cma import AttentionFactors, AttentionResult, attend, attend_i2t, weighted_cosine
from .datamodel import (
    DatasetManifest,
    PairedData,
    RegionSet,
    SentenceSet,
    SyntheticSpec,
    generate_synthetic,
    load_features,
    synthetic_dataset,
    write_features,
)
from .errors import AdapterError, ConfigError, DataError, DomainError, FormatError, RcarError, TrainingError
from .evaluation import RetrievalReport, bidirectional_recall, diagnostics, five_fold_eval, recall_at_k
from .pipeline import (
    MatchingHead,
    MatchingModel,
    PipelineConfig,
    SimilarityRecord,
    ensemble,
    host_foreign_unit,
    score_baseline,
    score_rcar,
)
from .rar import AggregationRegulator, GuidanceState, init_guidance, similarity_head, step_guidance
from .rcr import CorrespondenceRegulator, build_alignment, refine_attention, regulate
from .training import LossConfig, TrainConfig, TrainSchedule, hinge_loss, train

__version__ = "0.1.0"
