//! Parameters, layers and the full segmentation network.
//!
//! Training uses a fresh tape per step, so parameters cannot live on a tape.
//! Instead a [`ParamStore`] owns the master `f64` copies and a [`Forward`]
//! binder turns them into leaves of the current tape on demand; after
//! `backward`, the binder hands the leaf gradients back keyed by parameter
//! handle. The optimizer then updates the master copies in place.

mod layers;
mod model;
mod params;

pub use layers::{Conv1dLayer, Conv2dLayer, Ese, LayerNorm, Linear};
pub use model::{
    center_mask, skip_decoder, BevSegModel, Cioe, HeadOutputs, ModelConfig, ModelInputs, OsaBlock,
    OsaStage, OsaStageConfig,
};
pub use params::{Forward, Init, Param, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("model misuse: {0}")]
    Model(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Ebc(#[from] Box<crate::ebc::EbcError>),
}

impl From<crate::ebc::EbcError> for NnError {
    fn from(e: crate::ebc::EbcError) -> Self {
        NnError::Ebc(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
