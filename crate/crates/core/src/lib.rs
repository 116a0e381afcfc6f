//! Vision transformers with LoRA and layer-normalized LoRA adapters,
//! ℓ∞ attacks, and adversarial finetuning on a small reverse-mode autodiff
//! engine.
//!
//! Everything is `f64` and single-threaded, so runs are bitwise reproducible
//! for a fixed seed on one platform.

pub mod adapters;
pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use adapters::{inject_adapters, AdapterConfig, AdapterKind, AdapterParams, LnSharing, Placement, RankPolicy};
pub use attacks::{fgsm, pgd, robust_accuracy, AttackConfig, AttackLoss};
pub use autodiff::{grad_check, Graph, Var};
pub use checkpoint::Checkpoint;
pub use data::LabeledImageSet;
pub use error::{Error, Result};
pub use model::{Classifier, LinearProbe, VitClassifier};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
pub use trainer::{lr_at_epoch, Sgd, TrainConfig};
pub use vit::{ViTConfig, ViTParams};
