//! Loss mathematics for curriculum mutual distillation.

mod config;
mod loss;
mod nontarget;
mod probs;
mod target;

pub use config::{Ablation, CurriculumState, DistillConfig};
pub use loss::{
    cross_entropy_with_grad, peer_distill_loss, difficult_target_with_grad,
    dkd_loss, dkd_loss_with_grad, joint_loss, nontarget_with_grad, simple_target_with_grad,
    CurriculumDraw, JointLoss, LossGrad, PeerBreakdown, PeerDistill,
};
pub use nontarget::{curriculum_mask, loss_nontarget, masked_nontarget_count};
pub use probs::{
    decouple_target, log_softmax, masked_softmax_offset, nontarget_distribution, softmax,
    MaskVector, TargetSplit, MASK_OFFSET,
};
pub use target::{
    ascending_ranks, difficulty_weight, loss_difficult_target, loss_simple_target, phase_band,
    phase_gate, truncate_teacher, truncation_flags, Phase, PhaseBand, LOG_FLOOR,
};
