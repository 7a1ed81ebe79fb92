//! Supervision: weight maps, elementary losses and the total objective.

pub mod elementary;
pub mod objective;
pub mod weights;

pub use elementary::{bce_with_logits_map, dice_loss, weighted_bce, weighted_iou, weighted_l1};
pub use objective::{
    background_logits, contour_head_loss, saliency_head_loss, side_loss, total_loss, HeadLoss,
    LossBreakdown, Objective, SaliencyLoss, ScaleTargets, Targets,
};
pub use weights::{bg_ground_truth, fg_weight_map, window_max, FG_WINDOW};
