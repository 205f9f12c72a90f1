//! Discriminators, GAN/feature-matching/SSIM losses, Adam, and a desk-scale
//! training loop.

pub mod discriminator;
pub mod losses;
pub mod optim;
pub mod train;

pub use discriminator::{power_iteration, MultiScaleDiscriminator, ScaleOutput, SnMode};
pub use losses::{feature_matching_loss, hinge_d_loss, hinge_g_loss, ssim, ssim_loss};
pub use optim::Adam;
pub use train::{synthetic_dataset, train_smoke, Sample, StepLosses, TrainReport, Trainer};
