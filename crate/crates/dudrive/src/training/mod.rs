//! Losses, history buffer, optimizer, data pipeline and the training loops.

pub mod adam;
pub mod buffer;
pub mod data;
pub mod losses;
pub mod state;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use buffer::HistoryBuffer;
pub use data::{epoch_order, label_subset, split_train_val, FrameSet, SampleRef};
pub use losses::{
    domain_loss_d, domain_loss_d_grad, domain_loss_g, domain_loss_g_grad, task_loss,
    task_loss_grad,
};
pub use state::{MetricsLog, MetricsRow, RunSink, StateBlob};
pub use trainer::{
    dudrive_train, eval_mae_deg, pretrain_predictor, zero_predictor_mae, DudriveTrainer,
    PredictorTrainer, StepLosses, ValTarget,
};

use crate::error::{Error, Result};

/// Order of the three sequential per-step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpdateOrder {
    /// Generator, predictor, discriminator (the experimental setup).
    #[serde(rename = "gpd")]
    Gpd,
    /// Discriminator, generator, predictor (ablation).
    #[serde(rename = "dgp")]
    Dgp,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        // batch size and learning rate are fixed by the training recipe; the
        // epoch count is unstated and defaults to a value that converges on
        // the synthetic benchmark
        PretrainConfig { batch_size: 2000, lr: 0.01, epochs: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalPredictorConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Mix domains equally instead of proportionally to dataset size.
    pub equal_domain_mix: bool,
}

impl Default for GlobalPredictorConfig {
    fn default() -> Self {
        GlobalPredictorConfig { batch_size: 2000, lr: 0.001, epochs: 30, equal_domain_mix: false }
    }
}

/// All training hyperparameters. Defaults follow the published recipe:
/// lambda 0.5, predictor rate 2e-4, adversarial rate 2e-5, batch 60,
/// 7 epochs, buffer of 50 images, Adam beta1 0.5.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_task: f64,
    pub lr_predictor: f64,
    pub lr_gan: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub buffer_capacity: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain: PretrainConfig,
    pub global_predictor: GlobalPredictorConfig,
    pub seed: u64,
    /// One of 1, 0.5, 0.25, 0.125.
    pub width_factor: f64,
    pub update_order: UpdateOrder,
    /// Double each epoch with mirrored frames.
    pub augment: bool,
    /// Held-out fraction of each training set used for validation.
    pub val_fraction: f64,
    /// False runs the generator/discriminator pair without predictor
    /// co-training (the naive conditional-GAN baseline).
    pub joint_predictor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_task: 0.5,
            lr_predictor: 0.0002,
            lr_gan: 0.00002,
            batch_size: 60,
            epochs: 7,
            buffer_capacity: 50,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pretrain: PretrainConfig::default(),
            global_predictor: GlobalPredictorConfig::default(),
            seed: 1,
            width_factor: 1.0,
            update_order: UpdateOrder::Gpd,
            augment: false,
            val_fraction: 0.1,
            joint_predictor: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg_finite = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg_finite(self.lr_predictor)
            || !nonneg_finite(self.lr_gan)
            || !nonneg_finite(self.pretrain.lr)
            || !nonneg_finite(self.global_predictor.lr)
        {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !nonneg_finite(self.lambda_task) {
            return Err(Error::Config("lambda_task must be finite and non-negative".into()));
        }
        if self.buffer_capacity < 1 {
            return Err(Error::Config("buffer capacity must be at least 1".into()));
        }
        if self.batch_size < 1
            || self.pretrain.batch_size < 1
            || self.global_predictor.batch_size < 1
        {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        crate::models::WidthFactor::from_f64(self.width_factor)?;
        Ok(())
    }

    pub fn width(&self) -> crate::models::WidthFactor {
        crate::models::WidthFactor::from_f64(self.width_factor).expect("validated width factor")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_task, 0.5);
        assert_eq!(c.lr_predictor, 0.0002);
        assert_eq!(c.lr_gan, 0.00002);
        assert_eq!(c.batch_size, 60);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.buffer_capacity, 50);
        assert_eq!(c.adam_beta1, 0.5);
        assert_eq!(c.pretrain.batch_size, 2000);
        assert_eq!(c.pretrain.lr, 0.01);
        assert_eq!(c.global_predictor.batch_size, 2000);
        assert_eq!(c.global_predictor.lr, 0.001);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.lambda_task = -0.1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.buffer_capacity = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.width_factor = 0.3;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_gan = f64::NAN;
        assert!(c.validate().is_err());
    }
}
