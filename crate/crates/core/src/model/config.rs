use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{Discretization, MambaConfig};

/// Acoustic embeddings, facial landmarks with action units, eye/gaze/head.
pub const LMVD_MODALITY_DIMS: [usize; 3] = [128, 171, 126];

/// How the attention logits are turned into stream weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    #[default]
    Softmax,
    /// Elementwise sigmoid, then divide by the row sum.
    SigmoidRenorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality_dims: Vec<usize>,
    pub d_model: usize,
    pub blocks_per_stage: usize,
    pub use_cime: bool,
    pub use_aamfm: bool,
    pub attention: AttentionNorm,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub discretization: Discretization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(LMVD_MODALITY_DIMS.to_vec(), 256)
    }
}

impl ModelConfig {
    pub fn new(modality_dims: Vec<usize>, d_model: usize) -> Self {
        Self {
            modality_dims,
            d_model,
            blocks_per_stage: 1,
            use_cime: true,
            use_aamfm: true,
            attention: AttentionNorm::Softmax,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            discretization: Discretization::Euler,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    /// Number of fused streams: one per modality plus the intermodal one.
    pub fn n_slots(&self) -> usize {
        self.n_modalities() + usize::from(self.use_cime)
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.expand,
            d_conv: self.d_conv,
            discretization: self.discretization,
        }
    }

    /// "attention" or "concat".
    pub fn fusion_mode(&self) -> &'static str {
        if self.use_aamfm {
            "attention"
        } else {
            "concat"
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_dims.len() < 2 {
            return Err(Error::Config(format!("at least 2 modalities are required, got {}", self.modality_dims.len())));
        }
        if let Some(m) = self.modality_dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("modality {m} has zero channels")));
        }
        let positive = [
            ("d_model", self.d_model),
            ("blocks_per_stage", self.blocks_per_stage),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("d_conv", self.d_conv),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Names of fields whose values differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {
                $(if self.$f != other.$f { out.push(stringify!($f)); })*
            };
        }
        cmp!(
            modality_dims,
            d_model,
            blocks_per_stage,
            use_cime,
            use_aamfm,
            attention,
            d_state,
            expand,
            d_conv,
            discretization
        );
        out
    }
}
