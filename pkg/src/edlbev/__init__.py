"""Beta-evidential heatmap heads on synthetic bird's-eye-view grids.

The package trains per-cell detection heads that output Beta evidence
(alpha, beta) instead of a bare probability, and uses the induced per-cell
uncertainty for three downstream jobs: scoring whole scenes for distribution
shift, flagging badly localized boxes, and recovering objects the detector
missed. An auto-labeling pipeline spends a fixed human-verification budget on
whatever those signals rank worst.
"""

__version__ = "0.1.0"

from . import specfun
from .evidential import (
    EvidenceGrid,
    LossConfig,
    TargetGrid,
    adjusted_evidence,
    combined_loss,
    combined_loss_grad,
    edl_detection_loss,
    edl_multilabel_loss,
    entropy_score,
    evidence_from_logits,
    kl_regularizer,
    predict_prob,
    predict_uncertainty,
)
from .heads import (
    HeadParameters,
    TrainConfig,
    TrainingExample,
    grad_check,
    head_forward,
    init_head,
    train_ensemble,
    train_head,
)
from .synthbev import (
    BevBox,
    OodShift,
    SplitCounts,
    SyntheticScene,
    WorldConfig,
    generate_dataset,
    generate_scene,
    generate_split,
    load_scenes,
    save_scenes,
    splat_targets,
)
from .metrics import CurveReport, iou, map_center_distance, pr_auc, roc_auc
from .tasks import (
    TaskConfig,
    box_uncertainty,
    decode_boxes,
    label_box_errors,
    miss_candidates,
    scene_uncertainty,
    select_missed,
)
from .estimators import (
    DeepEnsembleBevHead,
    EvidentialBevHead,
    GaussianFocalBevHead,
    MissedObjectHead,
)
from .autolabel import (
    BudgetPlan,
    PipelineRun,
    compare_runs,
    run_baseline_p,
    run_baseline_r,
    run_ours_u,
)
from .validation import ConfigError, DataError, NumericError
