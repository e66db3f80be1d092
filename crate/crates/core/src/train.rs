//! Two-phase training: Adam, the learning-rate schedule, early stopping and
//! the data plumbing that turns clips into model inputs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::features::{extract_with, select_subset, FeatureConfig, GaitFeatureVector, Standardizer, LR_PAIRS};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelInput, Prediction};
use crate::nn::{self, Forward};
use crate::pose::{
    augment_flip, augment_noise, normalize_coords, patient_stratified_split, synth_generate, ClipWindow, DatasetSplit,
    SplitConfig, SyntheticSpec, COCO_KEYPOINTS,
};
use crate::stgcn;
use crate::tensor::{ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub total_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    /// AdamW-style decay applied to the parameter instead of the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub patience: usize,
    /// 1-based backbone blocks trained in phase 2.
    pub unfreeze_blocks: Vec<usize>,
    pub seed: u64,
    /// Probability of a horizontal flip per training clip.
    pub flip_prob: f64,
    /// Gaussian keypoint noise on training clips, in pixels.
    pub noise_px: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 3,
            total_epochs: 20,
            phase1_lr: 1e-3,
            phase2_lr: 1e-4,
            eta_min: 1e-6,
            weight_decay: 5e-5,
            decoupled_weight_decay: false,
            batch_size: 32,
            patience: 5,
            unfreeze_blocks: vec![9, 10],
            seed: 0,
            flip_prob: 0.5,
            noise_px: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.phase1_epochs < self.total_epochs,
            "phase1_epochs ({}) must be below total_epochs ({})",
            self.phase1_epochs,
            self.total_epochs
        );
        contract!(
            self.phase1_lr > 0.0 && self.phase2_lr > 0.0 && self.eta_min > 0.0,
            "learning rates must be positive"
        );
        contract!(self.eta_min <= self.phase2_lr, "eta_min above the phase-2 rate");
        contract!(self.weight_decay >= 0.0, "weight decay must be nonnegative");
        contract!(self.batch_size >= 1, "batch size must be positive");
        contract!(self.patience >= 1, "patience must be positive");
        contract!((0.0..=1.0).contains(&self.flip_prob), "flip_prob must be in [0, 1]");
        contract!(self.noise_px >= 0.0, "noise must be nonnegative");
        Ok(())
    }
}

/// Learning rate of a 1-based epoch: constant through phase 1, then cosine
/// from the phase-2 rate down to `eta_min` at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    contract!(
        (1..=cfg.total_epochs).contains(&epoch),
        "epoch {epoch} outside 1..={}",
        cfg.total_epochs
    );
    if epoch <= cfg.phase1_epochs {
        return Ok(cfg.phase1_lr);
    }
    let start = cfg.phase1_epochs + 1;
    let span = (cfg.total_epochs - start) as f64;
    let progress = if span > 0.0 { (epoch - start) as f64 / span } else { 0.0 };
    Ok(cfg.eta_min + 0.5 * (cfg.phase2_lr - cfg.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    pub step: u64,
}

/// Adam moments, created lazily per parameter on its first update so that
/// blocks unfrozen in phase 2 start with fresh bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }
}

/// One Adam update of every trainable parameter named in `grads`.
/// Frozen parameters are skipped even if a gradient is supplied.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        contract!(
            p.value.shape() == g.shape(),
            "gradient shape {:?} does not match parameter {name} {:?}",
            g.shape(),
            p.value.shape()
        );
        if !p.trainable {
            continue;
        }
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape().to_vec()),
            v: Tensor::zeros(g.shape().to_vec()),
            step: 0,
        });
        mom.step += 1;
        let (b1, b2) = (state.beta1, state.beta2);
        let c1 = 1.0 - b1.powi(mom.step as i32);
        let c2 = 1.0 - b2.powi(mom.step as i32);
        let w = p.value.data_mut();
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for i in 0..w.len() {
            let theta = w[i] as f64;
            let mut gi = g.data()[i] as f64;
            if !decoupled {
                gi += weight_decay * theta;
            }
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mut next = theta - lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            if decoupled {
                next -= lr * weight_decay * theta;
            }
            w[i] = next as f32;
        }
    }
    Ok(())
}

/// Patience-based stopping on validation accuracy. Only a strict
/// improvement resets the counter, so ties keep the earliest best epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_acc: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b)| val_acc > b);
        if improved {
            self.best = Some((epoch, val_acc));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub early_stopped: bool,
}

impl RunLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,phase,loss,val_acc,lr,best\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{}\n",
                r.epoch,
                r.phase,
                r.train_loss,
                r.val_acc,
                r.lr,
                u8::from(r.epoch == self.best_epoch)
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Clips with their extracted 24-feature vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub clips: Vec<ClipWindow>,
    pub features: Vec<GaitFeatureVector>,
}

impl LabeledSet {
    pub fn from_clips(clips: Vec<ClipWindow>, cfg: &FeatureConfig) -> Result<Self> {
        let features = clips
            .iter()
            .map(|c| extract_with(c, cfg).map(|e| e.features))
            .collect::<Result<_>>()?;
        Ok(LabeledSet { clips, features })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(ClipWindow::class).collect()
    }

    pub fn patients(&self) -> Vec<String> {
        self.clips.iter().map(|c| c.patient_id.clone()).collect()
    }
}

/// Feature vector of the mirrored clip: left/right values and validity bits
/// trade places, everything else is unchanged.
pub fn flip_features(f: &GaitFeatureVector) -> GaitFeatureVector {
    let mut out = f.clone();
    for (l, r) in LR_PAIRS {
        out.values.swap(l, r);
        let (bl, br) = ((f.valid >> l) & 1, (f.valid >> r) & 1);
        out.valid = (out.valid & !(1 << l) & !(1 << r)) | (br << l) | (bl << r);
    }
    out
}

/// A model plus everything needed to turn clips into its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub model: Model<f32>,
    /// Fitted on the training split; required by models with a clinical stream.
    pub standardizer: Option<Standardizer>,
    pub feature_names: Vec<String>,
    pub feature_config: FeatureConfig,
}

const EVAL_BATCH: usize = 64;

impl Classifier {
    /// Fit the standardizer on `train` when the model has a clinical stream.
    /// `train` must have been extracted with `feature_config`.
    pub fn new(model: Model<f32>, train: &LabeledSet, feature_config: FeatureConfig) -> Result<Self> {
        let feature_names = model.config.features.names();
        let standardizer = if model.config.variant.uses_clinical() {
            let rows = train
                .features
                .iter()
                .map(|f| select_subset(f, &feature_names))
                .collect::<Result<Vec<_>>>()?;
            Some(Standardizer::fit(&rows)?)
        } else {
            None
        };
        Ok(Classifier {
            model,
            standardizer,
            feature_names,
            feature_config,
        })
    }

    /// Batch tensors for `clips` and their feature vectors.
    pub fn input(&self, clips: &[&ClipWindow], features: &[&GaitFeatureVector]) -> Result<ModelInput<f32>> {
        contract!(!clips.is_empty(), "empty batch");
        contract!(clips.len() == features.len(), "one feature vector per clip");
        let variant = self.model.config.variant;
        let mut input = ModelInput::default();
        if variant.uses_skeleton() {
            let t = clips[0].num_frames();
            contract!(
                clips.iter().all(|c| c.num_frames() == t),
                "clips in a batch must share their length"
            );
            let mut data = Vec::with_capacity(clips.len() * 3 * t * COCO_KEYPOINTS);
            for c in clips {
                data.extend(c.channels_first());
            }
            input.skeleton = Some(Tensor::new([clips.len(), 3, t, COCO_KEYPOINTS], data)?);
        }
        if variant.uses_clinical() {
            let st = self
                .standardizer
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("model has a clinical stream but no standardizer".into()))?;
            let mut data = Vec::with_capacity(clips.len() * self.feature_names.len());
            for f in features {
                let z = st.apply(&select_subset(f, &self.feature_names)?)?;
                data.extend(z.iter().map(|&v| v as f32));
            }
            input.clinical = Some(Tensor::new([clips.len(), self.feature_names.len()], data)?);
        }
        Ok(input)
    }

    /// Eval-mode predictions for a labeled set.
    pub fn predict_set(&self, set: &LabeledSet) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(set.len());
        for (cs, fs) in set.clips.chunks(EVAL_BATCH).zip(set.features.chunks(EVAL_BATCH)) {
            let clips: Vec<&ClipWindow> = cs.iter().collect();
            let feats: Vec<&GaitFeatureVector> = fs.iter().collect();
            out.extend(self.model.predict(&self.input(&clips, &feats)?)?);
        }
        Ok(out)
    }

    /// Extract features and predict.
    pub fn predict_clips(&self, clips: &[ClipWindow]) -> Result<Vec<Prediction>> {
        self.predict_set(&LabeledSet::from_clips(clips.to_vec(), &self.feature_config)?)
    }

    pub fn evaluate(&self, set: &LabeledSet) -> Result<(EvalReport, Vec<Prediction>)> {
        contract!(!set.is_empty(), "cannot evaluate an empty set");
        let preds = self.predict_set(set)?;
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let report = EvalReport::compute(&set.labels(), &probs, Some(&set.patients()))?;
        Ok((report, preds))
    }
}

/// Deterministic 64-bit mixing of a seed with stream coordinates.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

pub struct TrainOutcome {
    pub best: Classifier,
    pub last: Classifier,
    pub log: RunLog,
    pub optimizer: AdamState,
}

/// Owns the model being trained, its optimizer and the run's randomness.
pub struct Trainer<'a> {
    pub current: Classifier,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    train: &'a LabeledSet,
    val: &'a LabeledSet,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model<f32>, data: &'a PreparedSplit, config: TrainConfig) -> Result<Self> {
        let (train, val) = (&data.train, &data.val);
        config.validate()?;
        contract!(!train.is_empty(), "empty training set");
        contract!(!val.is_empty(), "empty validation set");
        if model.config.variant.uses_skeleton() {
            let n = model.config.backbone().num_blocks();
            contract!(
                config.unfreeze_blocks.iter().all(|b| (1..=n).contains(b)),
                "unfreeze_blocks {:?} outside 1..={n}",
                config.unfreeze_blocks
            );
        }
        Ok(Trainer {
            current: Classifier::new(model, train, data.feature_config.clone())?,
            optimizer: AdamState::default(),
            config,
            train,
            val,
        })
    }

    /// Phase and learning rate of an epoch. Phase 2 exists to fine-tune
    /// backbone blocks, so a model without a skeleton stream stays in phase 1
    /// (and at the phase-1 rate) for the whole run.
    pub fn plan(&self, epoch: usize) -> Result<(u8, f64)> {
        let lr = lr_schedule(epoch, &self.config)?;
        if !self.current.model.config.variant.uses_skeleton() {
            return Ok((1, self.config.phase1_lr));
        }
        Ok(if epoch <= self.config.phase1_epochs { (1, lr) } else { (2, lr) })
    }

    fn set_phase(&mut self, phase: u8) -> Result<()> {
        let model = &mut self.current.model;
        if !model.config.variant.uses_skeleton() {
            return Ok(());
        }
        stgcn::set_backbone_trainable(&mut model.params, false);
        if phase == 2 {
            let bcfg = model.config.backbone();
            for &b in &self.config.unfreeze_blocks {
                stgcn::set_trainable(&mut model.params, &bcfg, b..=b, true)?;
            }
        }
        Ok(())
    }

    fn training_example(&self, idx: usize, epoch: usize) -> Result<(ClipWindow, GaitFeatureVector)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.config.seed,
            &[STREAM_AUGMENT, epoch as u64, idx as u64],
        ));
        let (mut clip, mut feats) = (self.train.clips[idx].clone(), self.train.features[idx].clone());
        if rng.random::<f64>() < self.config.flip_prob {
            clip = augment_flip(&clip);
            feats = flip_features(&feats);
        }
        if self.config.noise_px > 0.0 {
            clip = augment_noise(&clip, self.config.noise_px, rng.random())?;
        }
        Ok((clip, feats))
    }

    /// One pass over the shuffled training set followed by validation.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let (phase, lr) = self.plan(epoch)?;
        self.set_phase(phase)?;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[STREAM_SHUFFLE, epoch as u64])));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let examples = chunk
                .iter()
                .map(|&i| self.training_example(i, epoch))
                .collect::<Result<Vec<_>>>()?;
            let clips: Vec<&ClipWindow> = examples.iter().map(|e| &e.0).collect();
            let feats: Vec<&GaitFeatureVector> = examples.iter().map(|e| &e.1).collect();
            let labels: Vec<usize> = clips.iter().map(|c| c.class()).collect();
            let input = self.current.input(&clips, &feats)?;

            let model = &self.current.model;
            let mut tape = Tape::new();
            let vars = nn::register_params(&mut tape, &model.params);
            let dropout_seed = mix_seed(seed, &[STREAM_DROPOUT, epoch as u64, b as u64]);
            let mut f = Forward::new(&mut tape, &vars, &model.buffers, true, Some(dropout_seed));
            let out = model.forward(&mut f, &input)?;
            let stats = std::mem::take(&mut f.bn_stats);
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut named = BTreeMap::new();
            for (name, p) in model.params.iter() {
                if p.trainable {
                    if let Some(g) = grads.get(vars[name]) {
                        named.insert(name.to_string(), g.clone());
                    }
                }
            }
            drop(grads);
            drop(tape);
            let model = &mut self.current.model;
            adam_step(
                &mut model.params,
                &named,
                &mut self.optimizer,
                lr,
                self.config.weight_decay,
                self.config.decoupled_weight_decay,
            )?;
            nn::update_running_stats(&mut model.buffers, &stats)?;
        }

        let preds = self.current.predict_set(self.val)?;
        let hits = preds
            .iter()
            .zip(&self.val.clips)
            .filter(|(p, c)| p.class == c.class())
            .count();
        Ok(EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: loss_sum / batches as f64,
            val_acc: hits as f64 / self.val.len() as f64,
        })
    }

    /// Full schedule with early stopping; keeps the best-validation model.
    pub fn fit(mut self) -> Result<TrainOutcome> {
        let mut stopper = EarlyStopping::new(self.config.patience);
        let mut log = RunLog::default();
        let mut best = self.current.clone();
        for epoch in 1..=self.config.total_epochs {
            let rec = self.run_epoch(epoch)?;
            let decision = stopper.observe(epoch, rec.val_acc);
            log::info!(
                "epoch {epoch:2} phase {} lr {:.2e} loss {:.4} val_acc {:.4}{}",
                rec.phase,
                rec.lr,
                rec.train_loss,
                rec.val_acc,
                if decision.improved { " *" } else { "" }
            );
            log.epochs.push(rec);
            if decision.improved {
                best = self.current.clone();
                log.best_epoch = epoch;
            }
            if decision.stop {
                log.early_stopped = epoch < self.config.total_epochs;
                break;
            }
        }
        Ok(TrainOutcome {
            best,
            last: self.current,
            log,
            optimizer: self.optimizer,
        })
    }
}

/// Extracted train/val/test sets of a split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreparedSplit {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    pub feature_config: FeatureConfig,
}

impl PreparedSplit {
    pub fn new(split: &DatasetSplit, feature_config: &FeatureConfig) -> Result<Self> {
        Ok(PreparedSplit {
            train: LabeledSet::from_clips(split.train.clone(), feature_config)?,
            val: LabeledSet::from_clips(split.val.clone(), feature_config)?,
            test: LabeledSet::from_clips(split.test.clone(), feature_config)?,
            feature_config: feature_config.clone(),
        })
    }

    /// Generate synthetic walkers, normalize, split by patient and extract.
    /// `seed` drives both generation and the split.
    pub fn synthetic(
        spec: &SyntheticSpec,
        split: &SplitConfig,
        feature_config: &FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        let seqs = synth_generate(spec, seed)?
            .into_iter()
            .map(|c| normalize_coords(&c.sequence))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&patient_stratified_split(&seqs, split, seed)?, feature_config)
    }
}

pub fn train(model: Model<f32>, data: &PreparedSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model, data, config.clone())?.fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NUM_FEATURES;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(1, &c).unwrap(), 1e-3);
        assert_eq!(lr_schedule(3, &c).unwrap(), 1e-3);
        assert_eq!(lr_schedule(4, &c).unwrap(), 1e-4);
        assert_eq!(lr_schedule(20, &c).unwrap(), 1e-6);
        assert!(lr_schedule(0, &c).is_err());
        assert!(lr_schedule(21, &c).is_err());
        let lrs: Vec<f64> = (4..=20).map(|e| lr_schedule(e, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full([3], v)).unwrap();
        s
    }

    #[test]
    fn adam_first_step() {
        let mut p = store(1.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::ones([3]))]);
        let mut st = AdamState::default();
        adam_step(&mut p, &g, &mut st, 0.1, 0.0, false).unwrap();
        for &w in p.get("w").unwrap().value.data() {
            assert!((w as f64 - 0.9).abs() < 1e-6, "{w}");
        }
        assert_eq!(st.moments["w"].step, 1);
    }

    #[test]
    fn adam_zero_grad_and_frozen() {
        let mut p = store(2.0);
        let zero = BTreeMap::from([("w".to_string(), Tensor::zeros([3]))]);
        let mut st = AdamState::default();
        adam_step(&mut p, &zero, &mut st, 0.1, 0.0, false).unwrap();
        assert_eq!(p, store(2.0));
        p.get_mut("w").unwrap().trainable = false;
        let ones = BTreeMap::from([("w".to_string(), Tensor::ones([3]))]);
        adam_step(&mut p, &ones, &mut st, 0.1, 0.0, false).unwrap();
        assert_eq!(p.get("w").unwrap().value, store(2.0).get("w").unwrap().value);
        let bad = BTreeMap::from([("w".to_string(), Tensor::ones([2]))]);
        assert!(adam_step(&mut p, &bad, &mut st, 0.1, 0.0, false).is_err());
    }

    #[test]
    fn coupled_decay_acts_through_gradient() {
        // zero gradient but nonzero decay: step is lr in the direction of -w
        let mut p = store(3.0);
        let zero = BTreeMap::from([("w".to_string(), Tensor::zeros([3]))]);
        let mut st = AdamState::default();
        adam_step(&mut p, &zero, &mut st, 0.01, 0.1, false).unwrap();
        assert!((p.get("w").unwrap().value.data()[0] - 2.99).abs() < 1e-6);
        let mut q = store(3.0);
        let mut st = AdamState::default();
        adam_step(&mut q, &zero, &mut st, 0.01, 0.1, true).unwrap();
        assert!((q.get("w").unwrap().value.data()[0] - 2.997).abs() < 1e-6);
    }

    #[test]
    fn early_stop_counting() {
        let mut s = EarlyStopping::new(5);
        let accs = [0.5, 0.6, 0.7, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5, 0.45];
        let mut stopped = None;
        for (i, &a) in accs.iter().enumerate() {
            if s.observe(i + 1, a).stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(9));
        assert_eq!(s.best, Some((4, 0.8)));
    }

    #[test]
    fn ties_keep_earliest_best() {
        let mut s = EarlyStopping::new(3);
        s.observe(1, 0.5);
        assert!(!s.observe(2, 0.5).improved);
        assert_eq!(s.best, Some((1, 0.5)));
    }

    #[test]
    fn flip_features_swaps_pairs_and_bits() {
        let mut f = GaitFeatureVector {
            values: std::array::from_fn(|i| i as f64),
            valid: (1u32 << NUM_FEATURES) - 1,
        };
        f.valid &= !1; // hip_rom_l invalid
        let g = flip_features(&f);
        assert_eq!(g.values[0], 1.0);
        assert_eq!(g.values[1], 0.0);
        assert!(g.is_valid(0) && !g.is_valid(1));
        assert_eq!(flip_features(&g), f);
    }

    #[test]
    fn seed_mixing_separates_streams() {
        assert_ne!(mix_seed(1, &[1, 2]), mix_seed(1, &[2, 1]));
        assert_ne!(mix_seed(1, &[0]), mix_seed(2, &[0]));
        assert_eq!(mix_seed(7, &[3]), mix_seed(7, &[3]));
    }
}
