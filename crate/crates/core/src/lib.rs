//! Zero cross-attention conditioning for latent diffusion on a synthetic
//! virtual try-on task with known garment-to-body correspondence.

pub mod augment;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod dump;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod pnm;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use candle_core::{DType, Device, Tensor};

pub use augment::{augment_pair, AugmentConfig};
pub use config::ExperimentConfig;
pub use diffusion::{forward_diffuse, sample, Denoiser, NoiseSchedule, StepKind};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use geometry::Affine2;
pub use model::{assemble_zeta, ConditionBundle, FeaturePyramid, TryOnModel, UNetConfig, ZetaInput};
pub use objectives::{atv_loss, center_coordinate_map, AttentionMap, CenterCoordinateMap, QueryMask};
pub use synthetic::{correspondence_truth, generate_sample, DatasetConfig, SyntheticSample};
pub use tensor::{BinaryMask, ImageTensor, LatentTensor};
