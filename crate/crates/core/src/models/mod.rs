pub mod checkpoint;
pub mod generator;
pub mod saliency;
pub mod task;

pub use generator::{pretrain_shadow, GeneratorArch, ShadowGenerator};
pub use saliency::{cam_saliency, SaliencyMap};
pub use task::{cross_entropy, Batch, BnMode, BnStats, TaskArch, TaskModel};
