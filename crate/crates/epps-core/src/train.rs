//! Minibatch training over the joint objective: Adam updates, per-epoch
//! validation, early stopping on validation mDSC, and checkpointing into a
//! run directory. Every random decision (shuffles, augmentations, MI
//! permutations) draws from its own seeded stream, so a rerun with the same
//! config reproduces the history bit for bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::{augment, DatasetSplits, Sample, SampleSource};
use crate::edges::EdgeOperator;
use crate::error::{EppsError, Result};
use crate::loss::{compose_joint_graph, dice_bce_graph, validate_weights, LossBundle};
use crate::metrics::{compute_metrics, MetricsReport, DEFAULT_THRESHOLD};
use crate::mine::{derangement, mi_loss_graph, MineMode};
use crate::model::{Ablation, Backbone, EppsModel, ModelConfig};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_PATIENCE: usize = 20;
pub const DEFAULT_MAX_EPOCHS: usize = 100;

/// Everything one training run needs. Serializes as flat JSON so configs can
/// be stored next to their results and overridden key by key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub ablation: Ablation,
    pub resolution: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub edge_operator: EdgeOperator,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mine_mode: MineMode,
    pub eme_from_significant: bool,
    pub rotation_degrees: f64,
    pub augment: bool,
    pub deterministic: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: Backbone::Resnet50,
            ablation: Ablation::Full,
            resolution: 256,
            batch_size: 8,
            lr: DEFAULT_LR,
            alpha: 1.0,
            beta: 1.0,
            edge_operator: EdgeOperator::default(),
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            seed: 0,
            mine_mode: MineMode::JointMin,
            eme_from_significant: false,
            rotation_degrees: 30.0,
            augment: true,
            deterministic: false,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    /// Small-backbone preset used by tests and smoke runs.
    pub fn tiny() -> Self {
        TrainConfig {
            backbone: Backbone::Tiny,
            resolution: 64,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 32 != 0 {
            return Err(EppsError::config(format!(
                "resolution must be a positive multiple of 32, got {}",
                self.resolution
            )));
        }
        if self.batch_size == 0 {
            return Err(EppsError::config("batch_size must be positive"));
        }
        if self.ablation.has_decoupler() && self.batch_size < 2 {
            return Err(EppsError::config(format!(
                "batch_size must be at least 2 when the feature decoupler is active \
                 (the MI estimator shuffles within the batch), got {}",
                self.batch_size
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(EppsError::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        validate_weights(self.alpha, self.beta)?;
        self.edge_operator.validate()?;
        if self.patience == 0 {
            return Err(EppsError::config("patience must be at least 1"));
        }
        if !self.threshold.is_finite() || !(0.0..=1.0).contains(&self.threshold) {
            return Err(EppsError::config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if !self.rotation_degrees.is_finite() {
            return Err(EppsError::config("rotation_degrees must be finite"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            ablation: self.ablation,
            eme_from_significant: self.eme_from_significant,
        }
    }
}

/// What one epoch produced: mean loss components over the epoch's samples,
/// validation metrics (when a validation split exists), and wall time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_mask: f64,
    pub loss_edge: f64,
    pub loss_mi: f64,
    pub loss_joint: f64,
    pub val: Option<MetricsReport>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation mDSC; `None` when no
    /// validation split exists or no epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| EppsError::json("encoding history", e))?;
        fs::write(path, json).map_err(|e| EppsError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<TrainHistory> {
        let json = fs::read_to_string(path)
            .map_err(|e| EppsError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&json).map_err(|e| EppsError::json("decoding history", e))
    }
}

/// One deterministic stream per (purpose, epoch, step): the tag is folded
/// into the seed (FNV-1a) and the indices select the ChaCha stream, so no
/// two call sites ever share a sequence.
fn stream_rng(seed: u64, tag: &str, epoch: u64, step: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream((epoch << 32) | (step & 0xffff_ffff));
    rng
}

fn stack_batch<S: Scalar>(samples: &[Sample<S>], resolution: usize) -> Result<[Tensor<S>; 3]> {
    let (b, r) = (samples.len(), resolution);
    let mut images = Vec::with_capacity(b * 3 * r * r);
    let mut masks = Vec::with_capacity(b * r * r);
    let mut edges = Vec::with_capacity(b * r * r);
    for s in samples {
        if s.image.shape() != [3, r, r].as_slice() {
            return Err(EppsError::shape(format!(
                "sample '{}' has shape {:?} but the training resolution is {r}",
                s.id,
                s.image.shape()
            )));
        }
        images.extend_from_slice(s.image.as_slice());
        masks.extend_from_slice(s.mask.as_slice());
        edges.extend_from_slice(s.edge.as_slice());
    }
    Ok([
        Tensor::new(vec![b, 3, r, r], images),
        Tensor::new(vec![b, 1, r, r], masks),
        Tensor::new(vec![b, 1, r, r], edges),
    ])
}

fn sigmoid_tensor<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.map(|x| S::one() / (S::one() + (-x).exp()))
}

fn check_finite(bundle: &LossBundle, epoch: usize, step: usize) -> Result<()> {
    let components = [
        ("mask", bundle.loss_mask),
        ("edge", bundle.loss_edge),
        ("mi", bundle.loss_mi),
        ("joint", bundle.loss_joint),
    ];
    for (component, value) in components {
        if !value.is_finite() {
            return Err(EppsError::NonFiniteLoss {
                component: component.to_string(),
                epoch,
                step,
            });
        }
    }
    Ok(())
}

/// Runs the full loop and leaves `config.json`, `history.json`, and
/// `best.ckpt` in `run_dir`. Returns the best model (by validation mDSC;
/// the final model when no validation split exists) and the history.
pub fn train<S, D>(
    config: &TrainConfig,
    source: &D,
    splits: &DatasetSplits,
    run_dir: &Path,
) -> Result<(EppsModel<S>, TrainHistory)>
where
    S: Scalar,
    D: SampleSource<S> + ?Sized,
{
    config.validate()?;
    if splits.train.is_empty() {
        return Err(EppsError::config("training split is empty"));
    }
    let mine_active = config.ablation.has_decoupler();
    if mine_active && splits.train.len() < 2 {
        return Err(EppsError::config(
            "the MI penalty needs at least 2 training samples",
        ));
    }
    fs::create_dir_all(run_dir)
        .map_err(|e| EppsError::io(format!("creating {}", run_dir.display()), e))?;
    let config_json = serde_json::to_string_pretty(config)
        .map_err(|e| EppsError::json("encoding train config", e))?;
    let config_path = run_dir.join("config.json");
    fs::write(&config_path, config_json)
        .map_err(|e| EppsError::io(format!("writing {}", config_path.display()), e))?;

    let mut model = EppsModel::<S>::new(config.model_config(), config.seed);
    let best_path = run_dir.join("best.ckpt");
    checkpoint::save(&best_path, model.config(), model.store())?;

    let mut optimizer = Adam::new(config.lr);
    let mut history = TrainHistory::default();
    let mut best_mdsc = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    'epochs: for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut ids = splits.train.clone();
        ids.shuffle(&mut stream_rng(config.seed, "shuffle", epoch as u64, 0));

        let mut sums = [0.0f64; 4];
        let mut weight = 0usize;
        let mut step = 0usize;
        for chunk in ids.chunks(config.batch_size) {
            if mine_active && chunk.len() < 2 {
                // The in-batch shuffle needs two samples; drop the remainder.
                continue;
            }
            step += 1;
            let mut aug_rng = stream_rng(config.seed, "augment", epoch as u64, step as u64);
            let mut samples = Vec::with_capacity(chunk.len());
            for id in chunk {
                let sample = source.load_sample(id)?;
                samples.push(if config.augment {
                    augment(&sample, &mut aug_rng, config.rotation_degrees, &config.edge_operator)?
                } else {
                    sample
                });
            }
            let [images, masks, edges] = stack_batch(&samples, config.resolution)?;

            let mut tape = Tape::new();
            let fv = model.forward(&mut tape, &images, true)?;
            let mask_gt = tape.constant(masks);
            let loss_mask = dice_bce_graph(&mut tape, fv.mask_logits, mask_gt);
            let loss_edge = match fv.edge_logits {
                Some(edge_logits) => {
                    let edge_gt = tape.constant(edges);
                    dice_bce_graph(&mut tape, edge_logits, edge_gt)
                }
                None => tape.constant(Tensor::scalar(S::zero())),
            };
            let (mi_value, mi_train) = if fv.pairs.is_empty() {
                let zero = tape.constant(Tensor::scalar(S::zero()));
                (zero, zero)
            } else {
                let mut perm_rng = stream_rng(config.seed, "mi_perm", epoch as u64, step as u64);
                let perms = fv
                    .pairs
                    .iter()
                    .map(|_| derangement(&mut perm_rng, chunk.len()))
                    .collect::<Result<Vec<_>>>()?;
                let pairs: Vec<(Var, Var)> = fv.pairs.iter().map(|p| (p.s, p.u)).collect();
                let mi = mi_loss_graph(
                    &mut tape,
                    model.store(),
                    model.mine_nets(),
                    &pairs,
                    &perms,
                    config.mine_mode,
                );
                (mi.value, mi.train)
            };

            let report =
                compose_joint_graph(&mut tape, loss_mask, loss_edge, mi_value, config.alpha, config.beta)?;
            let bundle = report.bundle(&tape, config.alpha, config.beta);
            check_finite(&bundle, epoch, step)?;

            let root = if mi_train == mi_value {
                report.loss_joint
            } else {
                compose_joint_graph(&mut tape, loss_mask, loss_edge, mi_train, config.alpha, config.beta)?
                    .loss_joint
            };
            let grads = tape.backward(root);
            optimizer.step(model.store_mut(), &tape, &grads);

            let n = chunk.len() as f64;
            sums[0] += bundle.loss_mask * n;
            sums[1] += bundle.loss_edge * n;
            sums[2] += bundle.loss_mi * n;
            sums[3] += bundle.loss_joint * n;
            weight += chunk.len();
        }

        let val = if splits.val.is_empty() {
            None
        } else {
            Some(evaluate_model(&mut model, source, &splits.val, config.threshold)?)
        };
        let w = weight as f64;
        history.records.push(EpochRecord {
            epoch,
            loss_mask: sums[0] / w,
            loss_edge: sums[1] / w,
            loss_mi: sums[2] / w,
            loss_joint: sums[3] / w,
            val,
            wall_seconds: if config.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        });

        if let Some(report) = val {
            if report.mdsc > best_mdsc {
                best_mdsc = report.mdsc;
                history.best_epoch = Some(epoch);
                since_best = 0;
                checkpoint::save(&best_path, model.config(), model.store())?;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break 'epochs;
                }
            }
        }
    }

    if history.best_epoch.is_none() && !history.records.is_empty() {
        // No validation split ever picked a best: the final state stands in.
        checkpoint::save(&best_path, model.config(), model.store())?;
    }
    history.save(&run_dir.join("history.json"))?;
    let model = checkpoint::load_model::<S>(&best_path)?;
    Ok((model, history))
}

/// Scores the model's mask predictions over `ids` against ground truth.
pub fn evaluate_model<S, D>(
    model: &mut EppsModel<S>,
    source: &D,
    ids: &[String],
    threshold: f64,
) -> Result<MetricsReport>
where
    S: Scalar,
    D: SampleSource<S> + ?Sized,
{
    let mut preds = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for id in ids {
        let sample = source.load_sample(id)?;
        let shape = sample.image.shape();
        let (h, w) = (shape[1], shape[2]);
        let image = sample.image.reshaped(&[1, 3, h, w]);
        let out = model.infer(&image)?;
        preds.push(sigmoid_tensor(&out.mask_logits).reshaped(&[1, h, w]));
        gts.push(sample.mask);
    }
    compute_metrics(&preds, &gts, threshold)
}

/// Files written for one input image.
#[derive(Clone, Debug)]
pub struct PredictionPaths {
    pub mask: PathBuf,
    pub edge: Option<PathBuf>,
    pub prob: Option<PathBuf>,
}

fn tensor_to_gray<S: Scalar>(probs: &Tensor<S>, threshold: f64, side: usize) -> GrayImage {
    let mut img = GrayImage::new(side as u32, side as u32);
    let data = probs.as_slice();
    for (i, px) in img.pixels_mut().enumerate() {
        px.0[0] = if data[i].cast_f64() > threshold { 255 } else { 0 };
    }
    img
}

/// Segments one image file: binarized mask PNG at the source resolution
/// (nearest-neighbor resize back), an edge PNG when the model has an edge
/// head, and optionally a 16-bit probability map.
pub fn predict<S: Scalar>(
    model: &mut EppsModel<S>,
    image_path: &Path,
    out_dir: &Path,
    resolution: usize,
    threshold: f64,
    write_prob: bool,
) -> Result<PredictionPaths> {
    let src = image::open(image_path)
        .map_err(|e| EppsError::image(format!("decoding {}", image_path.display()), e))?
        .to_rgb8();
    let (src_w, src_h) = src.dimensions();
    let r = resolution;
    let resized = imageops::resize(&src, r as u32, r as u32, FilterType::Triangle);
    let image = Tensor::from_fn(vec![1, 3, r, r], |i| {
        let (c, rest) = (i / (r * r), i % (r * r));
        let (y, x) = (rest / r, rest % r);
        S::cast(resized.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    });
    let out = model.infer(&image)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| EppsError::io(format!("creating {}", out_dir.display()), e))?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let save_gray = |img: &GrayImage, path: &Path| -> Result<()> {
        let full = imageops::resize(img, src_w, src_h, FilterType::Nearest);
        full.save(path)
            .map_err(|e| EppsError::image(format!("writing {}", path.display()), e))
    };

    let probs = sigmoid_tensor(&out.mask_logits);
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    save_gray(&tensor_to_gray(&probs, threshold, r), &mask_path)?;

    let edge = match &out.edge_logits {
        Some(edge_logits) => {
            let path = out_dir.join(format!("{stem}_edge.png"));
            save_gray(&tensor_to_gray(&sigmoid_tensor(edge_logits), threshold, r), &path)?;
            Some(path)
        }
        None => None,
    };

    let prob = if write_prob {
        let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(r as u32, r as u32);
        let data = probs.as_slice();
        for (i, px) in img.pixels_mut().enumerate() {
            px.0[0] = (data[i].cast_f64() * 65535.0).round().clamp(0.0, 65535.0) as u16;
        }
        let full = imageops::resize(&img, src_w, src_h, FilterType::Nearest);
        let path = out_dir.join(format!("{stem}_prob.png"));
        full.save(&path)
            .map_err(|e| EppsError::image(format!("writing {}", path.display()), e))?;
        Some(path)
    } else {
        None
    };

    Ok(PredictionPaths { mask: mask_path, edge, prob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{write_circle_dataset, SyntheticDataset};

    fn fixture(n: usize, side: usize, seed: u64, op: &EdgeOperator) -> SyntheticDataset<f32> {
        SyntheticDataset::circles(n, side, seed, op).unwrap()
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            resolution: 32,
            batch_size: 2,
            max_epochs: 2,
            augment: false,
            deterministic: true,
            ..TrainConfig::tiny()
        }
    }

    fn splits_of(ids: Vec<String>, n_val: usize) -> DatasetSplits {
        let val = ids[ids.len() - n_val..].to_vec();
        let train = ids[..ids.len() - n_val].to_vec();
        DatasetSplits { seed: 0, train, val, test: Vec::new() }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { resolution: 100, ..TrainConfig::default() };
        assert!(bad.validate().err().unwrap().is_validation());
        let bad = TrainConfig { batch_size: 1, ablation: Ablation::Full, ..TrainConfig::default() };
        assert!(bad.validate().err().unwrap().is_validation());
        // Without the decoupler a batch of one is legal.
        let ok = TrainConfig { batch_size: 1, ablation: Ablation::Baseline, ..TrainConfig::default() };
        assert!(ok.validate().is_ok());
        let bad = TrainConfig { lr: f64::NAN, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { alpha: -0.5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { patience: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { threshold: 1.5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_leaves_initial_checkpoint_and_empty_history() {
        let config = TrainConfig { max_epochs: 0, ..smoke_config() };
        let source = fixture(4, 32, 5, &config.edge_operator);
        let splits = splits_of(source.ids(), 1);
        let dir = tempfile::tempdir().unwrap();
        let (model, history) = train(&config, &source, &splits, dir.path()).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(history.best_epoch, None);
        assert!(dir.path().join("config.json").exists());
        assert!(dir.path().join("history.json").exists());
        // The checkpoint holds the untouched initial parameters.
        let fresh = EppsModel::<f32>::new(config.model_config(), config.seed);
        for (id, entry) in fresh.store().iter() {
            let other = model.store().find(&entry.name).unwrap();
            assert!(model.store().get(other).bit_eq(fresh.store().get(id)), "{}", entry.name);
        }
    }

    #[test]
    fn rerun_with_same_seed_is_bitwise_identical() {
        let config = TrainConfig { augment: true, ..smoke_config() };
        let source = fixture(6, 32, 9, &config.edge_operator);
        let splits = splits_of(source.ids(), 2);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        train::<f32, _>(&config, &source, &splits, dir_a.path()).unwrap();
        train::<f32, _>(&config, &source, &splits, dir_b.path()).unwrap();
        let history_a = fs::read(dir_a.path().join("history.json")).unwrap();
        let history_b = fs::read(dir_b.path().join("history.json")).unwrap();
        assert_eq!(history_a, history_b);
        let ckpt_a = fs::read(dir_a.path().join("best.ckpt")).unwrap();
        let ckpt_b = fs::read(dir_b.path().join("best.ckpt")).unwrap();
        assert_eq!(ckpt_a, ckpt_b);
    }

    #[test]
    fn zero_lr_leaves_trainable_parameters_bitwise_unchanged() {
        let config = TrainConfig { lr: 0.0, max_epochs: 1, ..smoke_config() };
        let source = fixture(4, 32, 3, &config.edge_operator);
        let splits = splits_of(source.ids(), 1);
        let dir = tempfile::tempdir().unwrap();
        let (model, history) = train(&config, &source, &splits, dir.path()).unwrap();
        assert_eq!(history.records.len(), 1);
        let fresh = EppsModel::<f32>::new(config.model_config(), config.seed);
        for (id, entry) in fresh.store().iter() {
            if !entry.trainable {
                continue; // norm running stats move with every forward pass
            }
            let other = model.store().find(&entry.name).unwrap();
            assert!(
                model.store().get(other).bit_eq(fresh.store().get(id)),
                "parameter '{}' moved despite lr = 0",
                entry.name,
            );
        }
    }

    #[test]
    fn baseline_reports_exactly_zero_edge_and_mi_losses() {
        let config = TrainConfig { ablation: Ablation::Baseline, ..smoke_config() };
        let source = fixture(4, 32, 2, &config.edge_operator);
        let splits = splits_of(source.ids(), 1);
        let dir = tempfile::tempdir().unwrap();
        let (_, history) = train::<f32, _>(&config, &source, &splits, dir.path()).unwrap();
        assert_eq!(history.records.len(), 2);
        for record in &history.records {
            assert_eq!(record.loss_edge, 0.0);
            assert_eq!(record.loss_mi, 0.0);
            assert_eq!(record.loss_joint, record.loss_mask);
        }
    }

    #[test]
    fn early_stopping_never_runs_past_patience() {
        // lr = 0 freezes the trainable parameters, so validation mDSC can
        // only wiggle through norm-statistic drift; the strict-improvement
        // rule then stops the run close to the front.
        let config = TrainConfig { lr: 0.0, max_epochs: 50, patience: 3, ..smoke_config() };
        let source = fixture(6, 32, 4, &config.edge_operator);
        let splits = splits_of(source.ids(), 2);
        let dir = tempfile::tempdir().unwrap();
        let (_, history) = train::<f32, _>(&config, &source, &splits, dir.path()).unwrap();
        let best = history.best_epoch.unwrap();
        assert!(
            history.records.len() <= best + config.patience,
            "ran {} epochs with best at {best} and patience {}",
            history.records.len(),
            config.patience,
        );
        assert!(history.records.len() < config.max_epochs, "early stop never fired");
    }

    #[test]
    fn loss_decreases_when_overfitting_a_fixed_batch() {
        let config = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 10,
            ..smoke_config()
        };
        let source = fixture(4, 32, 6, &config.edge_operator);
        let splits = DatasetSplits { seed: 0, train: source.ids(), val: Vec::new(), test: Vec::new() };
        let dir = tempfile::tempdir().unwrap();
        let (_, history) = train::<f32, _>(&config, &source, &splits, dir.path()).unwrap();
        assert_eq!(history.records.len(), 10);
        assert_eq!(history.best_epoch, None);
        let first = history.records.first().unwrap().loss_joint;
        let last = history.records.last().unwrap().loss_joint;
        assert!(last < first, "joint loss went {first} -> {last}");
    }

    #[test]
    fn exploding_weights_surface_as_a_named_non_finite_error() {
        let config = TrainConfig { alpha: 1e300, ..smoke_config() };
        let source = fixture(4, 32, 8, &config.edge_operator);
        let splits = splits_of(source.ids(), 1);
        let dir = tempfile::tempdir().unwrap();
        let err = train::<f32, _>(&config, &source, &splits, dir.path()).err().unwrap();
        match err {
            EppsError::NonFiniteLoss { component, epoch, step } => {
                assert_eq!(component, "joint");
                assert_eq!((epoch, step), (1, 1));
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_of_an_untrained_model_is_finite_and_deterministic() {
        let op = EdgeOperator::default();
        let source = fixture(4, 32, 13, &op);
        let ids = source.ids();
        let mut model = EppsModel::<f32>::new(
            ModelConfig { backbone: Backbone::Tiny, ..ModelConfig::default() },
            7,
        );
        let a = evaluate_model(&mut model, &source, &ids, 0.5).unwrap();
        let b = evaluate_model(&mut model, &source, &ids, 0.5).unwrap();
        assert_eq!(a, b);
        for v in [a.mdsc, a.miou, a.recall, a.precision] {
            assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
        }
        assert_eq!(a.n_images, 4);
    }

    #[test]
    fn predict_writes_mask_edge_and_probability_maps() {
        let dir = tempfile::tempdir().unwrap();
        write_circle_dataset(dir.path(), 1, 48, 21).unwrap();
        let image_path = dir.path().join("images/circle_00.png");
        let out_dir = dir.path().join("out");

        let mut model = EppsModel::<f32>::new(
            ModelConfig { backbone: Backbone::Tiny, ..ModelConfig::default() },
            1,
        );
        let paths = predict(&mut model, &image_path, &out_dir, 32, 0.5, true).unwrap();
        let mask = image::open(&paths.mask).unwrap().to_luma8();
        assert_eq!(mask.dimensions(), (48, 48), "mask must match the source resolution");
        assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        let edge_path = paths.edge.expect("full model has an edge head");
        assert_eq!(image::open(edge_path).unwrap().to_luma8().dimensions(), (48, 48));
        let prob = image::open(paths.prob.unwrap()).unwrap().to_luma16();
        assert_eq!(prob.dimensions(), (48, 48));

        // Without the edge branch no edge map is written.
        let mut baseline = EppsModel::<f32>::new(
            ModelConfig {
                backbone: Backbone::Tiny,
                ablation: Ablation::Baseline,
                ..ModelConfig::default()
            },
            1,
        );
        let paths = predict(&mut baseline, &image_path, &out_dir, 32, 0.5, false).unwrap();
        assert!(paths.edge.is_none());
        assert!(paths.prob.is_none());
    }

    #[test]
    fn adversarial_mode_trains_and_matches_reported_components() {
        let config = TrainConfig { mine_mode: MineMode::Adversarial, max_epochs: 1, ..smoke_config() };
        let source = fixture(4, 32, 17, &config.edge_operator);
        let splits = splits_of(source.ids(), 1);
        let dir = tempfile::tempdir().unwrap();
        let (_, history) = train::<f32, _>(&config, &source, &splits, dir.path()).unwrap();
        let record = &history.records[0];
        // The reported MI penalty is sigma-of-estimates summed over levels.
        assert!(record.loss_mi > 0.0 && record.loss_mi < 4.0);
        assert!(record.loss_joint.is_finite());
    }
}
