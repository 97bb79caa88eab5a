//! Feature- and entropy-based distillation: loss terms, channel selection and
//! the three-stage schedule.

pub mod losses;
pub mod msssim;
pub mod schedule;
pub mod weights;

pub use losses::{
    distortion, feature_loss, latent_loss, output_loss, select_teacher_channels, student_total_loss, teacher_loss,
    DistillationBatchOutputs, LossBreakdown, StudentOutputs, TeacherOutputs,
};
pub use msssim::ms_ssim_var;
pub use schedule::{stage_plan, LossTerm, Stage, StagePlan};
pub use weights::{Distortion, FEDSWeights, LAMBDA_PRESETS};
