//! Flow-matching refinement of voxel occupancy features: tri-perspective-view
//! planes scanned by selective state-space blocks, trained on synthetic
//! voxel scenes.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod head;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod ssm;
pub mod tpv;
pub mod train;

pub use autodiff::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};
pub use config::RunConfig;
pub use error::{Error, FormatError, Result};
pub use flow::{euler_integrate, flow_loss, otp_interpolate, target_velocity, FlowConfig, HeadOn, TimeSampling};
pub use head::OccHead;
pub use mask::{apply_mask, mask_schedule, MaskSchedule};
pub use metrics::{dda_first_hit, make_ray_set, miou, rayiou, MetricsReport, RayHit};
pub use model::{FmOcc, ModelConfig};
pub use scene::{Scene, SceneSpec, SemanticLabelGrid, VisibilityMask, VoxelFeatureGrid};
pub use ssm::{SsmConfig, TpvSsmLayer};
pub use tpv::{encode_labels, tpv_aggregate, tpv_reduce, LabelEmbedding, TpvTriplet};
pub use train::{train_step, TrainConfig, TrainState, Trainer};
