//! Executable checks of structural results about morphological networks:
//! collapse of max-plus stacks, gradient sparsity audits, explicit
//! universal-approximation constructions, sup-of-erosion identities, loss
//! landscapes and the mean-shift study.

pub mod audit;
pub mod builders;
pub mod collapse;
pub mod landscape;
pub mod mean_shift;
pub mod repr;

pub use audit::{check_thm1, check_thm2, check_thm3, random_audit, random_network, AuditReport, Family};
pub use builders::{
    assemble, build_affine_mpm, build_maxplusmin_mpm, embed_maxout_into_hybrid, embed_relu_into_hybrid,
    embed_relu_with_constants, sample_l1_ball, Affine, AffineTarget, Construction,
};
pub use collapse::{collapse_stack, stack_forward, CollapsedLayer, MaxPlusLayer};
pub use landscape::{landscape_grid, Axis, Landscape};
pub use mean_shift::{history_csv, mean_shift_run, EpochStats, ShiftConfig, ShiftModel};
pub use repr::{repr_identity_eval, repr_refinement, ReprEval};
