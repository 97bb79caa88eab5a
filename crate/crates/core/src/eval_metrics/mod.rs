//! Quality metrics, BD-rate, dataset evaluation and report emission.

pub mod bdrate;
pub mod evaluate;
pub mod quality;
pub mod reports;

pub use bdrate::{bd_rate, BDRateResult, QualityMetric, RDCurve, RDPoint};
pub use evaluate::{aggregate, evaluate_image, evaluate_model, Aggregate, Evaluation, ImageResult};
pub use quality::{ms_ssim, msssim_to_db, psnr};
pub use reports::{emit_reports, entropy_report, normalize_plane, pgm_bytes, EntropyReport, ReportFiles};

/// Heatmap ranks used by default (1-based).
pub const DEFAULT_HEATMAP_RANKS: [usize; 5] = [1, 40, 80, 120, 160];
