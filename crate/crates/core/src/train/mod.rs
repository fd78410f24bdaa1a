//! Blind-spot training: masked loss, augmentation, batch sampling,
//! optimization and the epoch loop.

mod augment;
mod batch;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use augment::{augment_8fold, augment_pool};
pub use batch::{sample_training_batch, TrainingBatch};
pub use loss::{masked_mse, masked_mse_with_grad};
pub use optim::{Adam, PlateauScheduler};

use crate::data::{compute_norm_stats, ImageTensor, NormStats};
use crate::error::{Error, Result};
use crate::masking::{mask_patch, BlindSpotBatch, ReplacementKind, ReplacementStrategy};
use crate::model::{Checkpoint, ModelConfig, Tensor, UNet};
use crate::rng::{derive_seed, derived_rng};

/// Fraction of each training patch used as blind spots.
pub const DEFAULT_MASK_FRACTION: f64 = 0.00198;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub patch_crop: usize,
    pub mask_fraction: f64,
    pub strategy: ReplacementStrategy,
    pub seed: u64,
}

impl TrainConfig {
    fn base(epochs: usize, steps: usize, batch: usize, lr: f64) -> Self {
        Self {
            epochs,
            steps_per_epoch: steps,
            batch_size: batch,
            initial_lr: lr,
            plateau_patience: 10,
            lr_factor: 0.5,
            min_lr: 1e-7,
            patch_crop: 64,
            mask_fraction: DEFAULT_MASK_FRACTION,
            strategy: ReplacementStrategy::new(ReplacementKind::Uwcp),
            seed: 0,
        }
    }

    pub fn bsd68() -> Self {
        Self::base(200, 400, 128, 4e-4)
    }

    pub fn convallaria() -> Self {
        Self::base(200, 10, 80, 1e-3)
    }

    pub fn mouse() -> Self {
        Self::base(200, 90, 80, 1e-3)
    }

    pub fn flywing() -> Self {
        Self::base(200, 142, 80, 1e-3)
    }

    /// Workstation-sized schedule for the synthetic experiments.
    pub fn desk() -> Self {
        Self::base(30, 50, 16, 1e-3)
    }

    pub fn with_strategy(mut self, kind: ReplacementKind) -> Self {
        self.strategy = ReplacementStrategy::new(kind);
        self
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let counts = [
            ("train.epochs", self.epochs),
            ("train.steps_per_epoch", self.steps_per_epoch),
            ("train.batch_size", self.batch_size),
            ("train.plateau_patience", self.plateau_patience),
            ("train.patch_crop", self.patch_crop),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config(
                "train.initial_lr",
                "must be a finite non-negative number",
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config(
                "train.lr_factor",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return Err(Error::config(
                "train.min_lr",
                "must be a finite non-negative number",
            ));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::config(
                "train.mask_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        let m = model.size_multiple();
        if !self.patch_crop.is_multiple_of(m) {
            return Err(Error::config(
                "train.patch_crop",
                format!("{} is not divisible by 2^depth = {m}", self.patch_crop),
            ));
        }
        self.strategy
            .validate()
            .map_err(|e| Error::config("train.strategy.window", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr";

    /// Loss curve as CSV. Wall time is left out so that reruns compare
    /// byte for byte; see [`TrainHistory::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.3}", r.epoch, r.wall_seconds);
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub best_epoch: usize,
    /// Set when the best epoch fell inside the final tenth of training.
    pub may_not_have_converged: bool,
}

struct ValSet {
    inputs: Vec<Tensor>,
    spots: Vec<Vec<BlindSpotBatch>>,
}

fn prepare_val(
    pool: &[ImageTensor],
    norm: &NormStats,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ValSet> {
    let m = model.size_multiple();
    let min_side = m.max(cfg.strategy.window[0]).max(cfg.strategy.window[1]);
    let mut rng = derived_rng(cfg.seed, "val-mask");
    let mut masked = Vec::with_capacity(pool.len());
    for (i, img) in pool.iter().enumerate() {
        let (h, w) = (img.height() / m * m, img.width() / m * m);
        if h < min_side || w < min_side {
            return Err(Error::shape(format!(
                "validation patch {i} of shape {:?} is smaller than {min_side}",
                img.shape()
            )));
        }
        let patch = norm.normalize(&img.crop(0, 0, h, w)?);
        masked.push(mask_patch(
            &patch,
            cfg.mask_fraction,
            &cfg.strategy,
            &mut rng,
        )?);
    }
    let mut set = ValSet {
        inputs: Vec::new(),
        spots: Vec::new(),
    };
    let mut start = 0;
    while start < masked.len() {
        let shape = masked[start].0.shape();
        let mut end = start + 1;
        while end < masked.len() && end - start < cfg.batch_size && masked[end].0.shape() == shape {
            end += 1;
        }
        let imgs: Vec<ImageTensor> = masked[start..end].iter().map(|(x, _)| x.clone()).collect();
        set.inputs.push(Tensor::from_images(&imgs)?);
        set.spots
            .push(masked[start..end].iter().map(|(_, s)| s.clone()).collect());
        start = end;
    }
    Ok(set)
}

fn validation_loss(net: &UNet, val: &ValSet) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, spots) in val.inputs.iter().zip(&val.spots) {
        let pred = net.forward(x)?;
        let count: usize = spots.iter().map(BlindSpotBatch::len).sum();
        sum += masked_mse(&pred, spots)? * count as f64;
        n += count;
    }
    Ok(sum / n as f64)
}

/// Trains a fresh network on `train_pool`, validating on `val_pool` after
/// every epoch. Both pools hold raw (unnormalized) patches.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_pool: &[ImageTensor],
    val_pool: &[ImageTensor],
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if train_pool.is_empty() {
        return Err(Error::param("training pool is empty"));
    }
    if val_pool.is_empty() {
        return Err(Error::param("validation pool is empty"));
    }
    batch::check_pool(train_pool, cfg.patch_crop)?;

    let norm = compute_norm_stats(train_pool)?;
    let normalized: Vec<ImageTensor> = train_pool.iter().map(|i| norm.normalize(i)).collect();
    let pool = augment_pool(&normalized);
    let val = prepare_val(val_pool, &norm, model_cfg, cfg)?;

    let mut net = UNet::new(*model_cfg, derive_seed(cfg.seed, "init"))?;
    let mut adam = Adam::new(net.params());
    let mut sched = PlateauScheduler::new(
        cfg.initial_lr,
        cfg.lr_factor,
        cfg.min_lr,
        cfg.plateau_patience,
    );
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, UNet)> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = sched.lr();
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch_seed = derive_seed(cfg.seed, &format!("batch/{epoch}/{step}"));
            let mut rng = crate::rng::rng_from_seed(batch_seed);
            let b = sample_training_batch(
                &pool,
                cfg.patch_crop,
                cfg.batch_size,
                cfg.mask_fraction,
                &cfg.strategy,
                &mut rng,
            )?;
            let (pred, tape) = net.forward_train(&b.inputs)?;
            let (loss, grad) = masked_mse_with_grad(&pred, &b.spots)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    lr,
                    batch_seed,
                });
            }
            let mut grads = net.zero_grads();
            net.backward(tape, grad, &mut grads);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    lr,
                    batch_seed,
                });
            }
            adam.step(net.params_mut(), &grads, lr);
            loss_sum += loss;
        }
        let train_loss = loss_sum / cfg.steps_per_epoch as f64;
        let val_loss = validation_loss(&net, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step: cfg.steps_per_epoch,
                lr,
                batch_seed: derive_seed(cfg.seed, "val-mask"),
            });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:e}");
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.clone()));
        }
        if sched.observe(val_loss) {
            log::info!("learning rate reduced to {:e}", sched.lr());
        }
    }

    let (best_loss, best_epoch, best_net) = best.expect("at least one epoch ran");
    let tail = cfg.epochs.div_ceil(10);
    let may_not_have_converged = best_epoch >= cfg.epochs - tail;
    if may_not_have_converged {
        log::warn!(
            "validation loss was still improving at epoch {best_epoch} of {}; training may not have converged",
            cfg.epochs
        );
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("best_epoch".into(), best_epoch.to_string());
    metadata.insert("best_val_loss".into(), best_loss.to_string());
    metadata.insert("epochs".into(), cfg.epochs.to_string());
    metadata.insert("seed".into(), cfg.seed.to_string());
    metadata.insert("strategy".into(), cfg.strategy.kind.name().into());
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            net: best_net,
            norm,
            metadata,
        },
        history,
        best_epoch,
        may_not_have_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::smooth_blobs;

    fn tiny() -> (ModelConfig, TrainConfig, Vec<ImageTensor>, Vec<ImageTensor>) {
        let model = ModelConfig::n2v2(1, 4);
        let mut cfg = TrainConfig::desk().with_strategy(ReplacementKind::Median);
        cfg.epochs = 3;
        cfg.steps_per_epoch = 2;
        cfg.batch_size = 2;
        cfg.patch_crop = 16;
        cfg.mask_fraction = 0.02;
        let imgs = smooth_blobs(3, 24, 24, 5);
        (model, cfg, imgs[..2].to_vec(), imgs[2..].to_vec())
    }

    #[test]
    fn zero_learning_rate_leaves_weights_untouched() {
        let (model, mut cfg, tr, va) = tiny();
        cfg.initial_lr = 0.0;
        let out = train(&model, &cfg, &tr, &va).unwrap();
        let init = UNet::new(model, derive_seed(cfg.seed, "init")).unwrap();
        for (a, b) in out.checkpoint.net.params().iter().zip(init.params()) {
            let bits =
                |p: &crate::model::Param| p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{}", a.name);
        }
        assert!(out.history.records.iter().all(|r| r.lr == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (model, cfg, tr, va) = tiny();
        let a = train(&model, &cfg, &tr, &va).unwrap();
        let b = train(&model, &cfg, &tr, &va).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.history.records.len(), 3);
        let lrs: Vec<f64> = a.history.records.iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_errors_name_the_key() {
        let (model, mut cfg, tr, va) = tiny();
        cfg.patch_crop = 15;
        let err = train(&model, &cfg, &tr, &va).unwrap_err();
        assert!(err.to_string().contains("train.patch_crop"), "{err}");
        cfg.patch_crop = 16;
        cfg.lr_factor = 1.0;
        assert!(cfg
            .validate(&model)
            .unwrap_err()
            .to_string()
            .contains("train.lr_factor"));
        cfg.lr_factor = 0.5;
        cfg.patch_crop = 32;
        let err = train(&model, &cfg, &tr, &va).unwrap_err();
        assert!(err.to_string().contains("train.patch_crop"), "{err}");
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 0,
                train_loss: 0.5,
                val_loss: 0.25,
                lr: 0.001,
                wall_seconds: 1.0,
            }],
        };
        assert_eq!(
            h.to_csv(),
            "epoch,train_loss,val_loss,lr\n0,0.5,0.25,0.001\n"
        );
        assert_eq!(h.best().unwrap().epoch, 0);
    }
}
