//! Frozen ViT with named hook points, activation capture and interventions.

mod config;
mod hooks;
mod intervention;
mod model;

pub use config::{ToySize, ViTConfig, N_CHANNELS};
pub use hooks::{list_hook_points, select_token_rows, ActivationCache, HookPoint, TokenKind, TokenSelector};
pub use intervention::{activation_shape, Intervention, InterventionKind};
pub use model::{activation_means, Block, ForwardOutput, HookedViT, LayerNormParams, Linear, MlpParams, ModelInput};
