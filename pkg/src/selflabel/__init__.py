"""Iterative multi-modal pseudo-label bootstrapping.

Contrastive pretraining of a small embedding network, k-means pseudo-labels
with elbow-selected K, supervised re-training with label smoothing, cluster-
ensemble fusion across modalities, and verification-style scoring (EER,
minDCF, AS-Norm) on a synthetic paired-modality corpus.
"""

from ._kernels import active_backend
from .clustering import Assignment, WssCurve, kmeans, select_k_elbow, sweep_k, wss
from .encoder import (
    ClassifierHead,
    EncoderParams,
    TrainConfig,
    classifier_posteriors,
    contrastive_loss,
    cross_entropy_loss,
    embed,
    grad_check,
    smoothed_label_distribution,
    train_classifier,
    train_contrastive,
)
from .ensemble import (
    Correspondence,
    FusedLabels,
    consolidate_groups,
    contingency,
    correspond,
    fuse_pseudo_labels,
    joint_embeddings,
    majority_vote,
    relabel,
)
from .errors import ConfigError, DataError, NumericError, SelfLabelError, TrainingError
from .metrics import DcfParams, eer, min_dcf, nmi
from .pipeline import (
    ClusterSettings,
    EvalSettings,
    PipelineConfig,
    RoundArtifacts,
    run_pipeline,
    run_round,
    run_stage1,
)
from .scoring import Cohort, ScoreSet, Trial, as_norm, cosine_score, fuse_scores
from .synthdata import (
    MultiModalCorpus,
    Sample,
    SynthConfig,
    generate_corpus,
    make_contrastive_views,
    read_corpus,
    write_corpus,
)

__version__ = "0.1.0"
