"""Domain-adaptive two-stage detection at desk scale.

A compact Faster-RCNN-style detector plus the adaptation machinery to move
it from a labeled source domain to an unlabeled target domain: collaborative
self-training between the proposal and classification heads, an ambiguity-
weighted discrepancy minimax between them, and foreground-weighted local
feature alignment — validated on a controllable synthetic paired-domain
benchmark.
"""

from .boxes import Box, iou, iou_matrix, nms
from .detector import (
    Detection,
    DomainDiscriminator,
    FeatureMap,
    ModelConfig,
    RoiPrediction,
    RpnOutput,
    TwoStageDetector,
    anchor_grid,
    match_anchors,
    roi_align,
    rpc_loss,
    rpn_loss,
    select_proposals,
)
from .evaluation import (
    CoverageHistogram,
    MetricsReport,
    average_precision,
    evaluate_model,
    proposal_coverage,
    rpc_recall,
    rpn_recall,
)
from .experiment import ExperimentSpec, VARIANTS, ablation, generate_datasets, load_spec
from .losses import (
    GradientReversal,
    PseudoLabel,
    adversarial_source_loss,
    adversarial_target_loss,
    ambiguity_weight,
    build_pseudo_label,
    discrepancy,
    discrepancy_loss,
    entropy,
    foreground_prob,
    grad_reverse,
    resize_foreground_map,
    selftrain_entropy_loss,
    selftrain_rpn_loss,
    weight_from_rpc_confidence,
    weight_from_rpn_confidence,
)
from .scenes import (
    DetectionDataset,
    ImageOnlyDataset,
    LabeledImage,
    SceneConfig,
    ShiftParams,
    apply_shift,
    emit_dataset,
    generate_scene,
)
from .training import TrainConfig, Trainer, run_pipeline, stage_align, stage_full, stage_pretrain

__version__ = "0.1.0"
