//! Desk-scale denoiser networks, the autodiff core that trains them,
//! physics-informed losses, and the training loop.

pub mod autodiff;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod train;
pub mod transformer;
pub mod unet;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionMode, ConditionVector, Denoiser, WindowState};
use crate::error::Result;
use crate::trip::WINDOW_LEN;

use autodiff::{Graph, Tensor, VarId};
use layers::{NetBuilder, ParamStore};
pub use layers::{film_modulate, sinusoidal_embed};
pub use transformer::TransformerConfig;
pub use unet::UnetConfig;

/// Architecture descriptor stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Unet(UnetConfig),
    Transformer(TransformerConfig),
}

impl ArchConfig {
    pub fn channels(&self) -> usize {
        match self {
            ArchConfig::Unet(_) => 2,
            ArchConfig::Transformer(_) => 1,
        }
    }

    pub fn cond_mode(&self) -> ConditionMode {
        match self {
            ArchConfig::Unet(_) => ConditionMode::UNet,
            ArchConfig::Transformer(_) => ConditionMode::Csdi,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            ArchConfig::Unet(c) => c.cond_dim,
            ArchConfig::Transformer(c) => c.cond_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchConfig::Unet(c) => c.validate(),
            ArchConfig::Transformer(c) => c.validate(),
        }
    }

    /// Builds the forward graph for one window.
    pub fn forward(&self, b: &NetBuilder, x: VarId, t: usize, cond: VarId) -> Result<VarId> {
        match self {
            ArchConfig::Unet(c) => unet::forward_unet(b, c, x, t, cond),
            ArchConfig::Transformer(c) => transformer::forward_transformer(b, c, x, t, cond),
        }
    }
}

fn window_to_tensor(x: &WindowState) -> Tensor {
    Tensor {
        rows: x.channels(),
        cols: WINDOW_LEN,
        data: x.values().to_vec(),
    }
}

fn condition_tensor(c: &ConditionVector) -> Tensor {
    Tensor {
        rows: 1,
        cols: c.entries.len(),
        data: c.entries.clone(),
    }
}

/// A trained (or freshly initialized) network usable as a sampling
/// denoiser. `None` conditions map to the reserved null token.
pub struct NeuralDenoiser {
    pub arch: ArchConfig,
    pub store: ParamStore,
}

impl NeuralDenoiser {
    pub fn new(arch: ArchConfig, store: ParamStore) -> Self {
        NeuralDenoiser { arch, store }
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }
}

impl Denoiser for NeuralDenoiser {
    fn channels(&self) -> usize {
        self.arch.channels()
    }

    fn predict(
        &self,
        x_t: &WindowState,
        t: usize,
        c: Option<&ConditionVector>,
    ) -> Result<WindowState> {
        let g = Graph::new();
        let b = NetBuilder::new(&g, &self.store);
        let x = g.leaf(window_to_tensor(x_t));
        let null = ConditionVector::null_token(self.arch.cond_mode());
        let cond = g.leaf(condition_tensor(c.unwrap_or(&null)));
        let out = self.arch.forward(&b, x, t, cond)?;
        WindowState::from_values(x_t.channels(), g.value(out).data)
    }
}
