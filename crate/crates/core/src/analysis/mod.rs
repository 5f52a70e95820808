//! Hook-based experiments: logit lens, attention export, ablations and
//! per-layer coder studies.

mod ablation;
mod attention;
mod layers;
mod lens;

pub use ablation::{ablate, AblationResult};
pub use attention::{export_attention, AttentionPattern, TokenPosition};
pub use layers::{alive_by_layer, substitution_sweep, AliveByLayer, SubstitutionPoint};
pub use lens::{logit_lens, LensTrajectory};
