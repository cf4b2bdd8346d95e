//! GAN fingerprinting via personalized normalization.
//!
//! A single training run produces a generator backbone, a pair of parameter
//! generators, and a watermark decoder. Fingerprinted generator instances for
//! new users are then stamped out without retraining: the parameter
//! generators map a user's bit string to the scale and bias of a
//! normalization layer inside the generator, and the decoder reads the bits
//! back out of any image the instance produces.

pub mod attacksim;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fingerprint;
pub mod issuance;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod modelattacks;
pub mod nets;
pub mod nn;
pub mod paramgen;
pub mod pn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

#[doc(hidden)]
pub mod testkit;

pub use config::{AttackLayerConfig, PnMode, PnPosition, TrainingConfig};
pub use error::{Error, Result};
pub use fingerprint::{sample_fingerprint, Fingerprint};
pub use issuance::{issue_instance, GeneratorInstance, Registry, RegistryRecord};
pub use latent::{sample_latent, LatentVector};
pub use modelattacks::{collusion_attack, finetune_attack, prune_attack, quantize_attack};
pub use tensor::{image_from_u8, image_to_u8, stack_images, unstack_images, FeatureTensor, Image, ImageBatch};
pub use training::{train, TrainOptions, TrainedBundle};
pub use verify::{bit_accuracy, extract_watermark, trace_user, Decision, VerificationReport};
