//! Seeded training loop: triplet sampling, hybrid loss, Adam, schedules,
//! checkpoints and a JSON-lines metric log.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datapipe::{build_triplets, Dataset, FoldSplit, Triplet};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, LossParams};
use crate::model::{Model, ModelConfig, Param, StyleHeads};
use crate::tensor::{BnMode, Graph};

pub const DEFAULT_LR: f64 = 8e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &[Param], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One Adam update using the gradients stored on `params`.
pub fn adam_step(params: &mut [Param], state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.tensor.grad().expect("checked above").to_vec();
        for (((x, m), v), g) in p.tensor.data_mut().iter_mut().zip(m).zip(v).zip(g) {
            let g = g as f64;
            let m1 = b1 * *m as f64 + (1.0 - b1) * g;
            let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let step = state.lr * (m1 / c1) / ((v1 / c2).sqrt() + state.eps);
            *x = (*x as f64 - step) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decay {
    StepDecay { drop_factor: f64, every_n_epochs: usize },
    ExponentialDecay { gamma_per_epoch: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay: Decay,
}

impl Schedule {
    pub fn step_decay(base_lr: f64, drop_factor: f64, every_n_epochs: usize) -> Self {
        Self {
            base_lr,
            decay: Decay::StepDecay {
                drop_factor,
                every_n_epochs,
            },
        }
    }

    pub fn exponential(base_lr: f64, gamma_per_epoch: f64) -> Self {
        Self {
            base_lr,
            decay: Decay::ExponentialDecay { gamma_per_epoch },
        }
    }

    /// The two schedules compared in experiments.
    pub fn defaults() -> [Schedule; 2] {
        [Self::step_decay(DEFAULT_LR, 0.5, 10), Self::exponential(DEFAULT_LR, 0.95)]
    }

    pub fn name(&self) -> &'static str {
        match self.decay {
            Decay::StepDecay { .. } => "step_decay",
            Decay::ExponentialDecay { .. } => "exponential_decay",
        }
    }

    /// Learning rate for the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay {
            Decay::StepDecay {
                drop_factor,
                every_n_epochs,
            } => self.base_lr * drop_factor.powi((epoch / every_n_epochs) as i32),
            Decay::ExponentialDecay { gamma_per_epoch } => {
                self.base_lr * gamma_per_epoch.powi(epoch as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("train.schedule: {msg}")));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        match self.decay {
            Decay::StepDecay {
                drop_factor,
                every_n_epochs,
            } => {
                if !(drop_factor > 0.0 && drop_factor <= 1.0) {
                    return bad(format!("drop_factor must be in (0, 1], got {drop_factor}"));
                }
                if every_n_epochs == 0 {
                    return bad("every_n_epochs must be positive".into());
                }
            }
            Decay::ExponentialDecay { gamma_per_epoch } => {
                if !(gamma_per_epoch > 0.0 && gamma_per_epoch <= 1.0) {
                    return bad(format!("gamma_per_epoch must be in (0, 1], got {gamma_per_epoch}"));
                }
            }
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::defaults()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    /// `None` means four per training outfit.
    pub triplets_per_epoch: Option<usize>,
    pub seed: u64,
    pub k_folds: usize,
    pub schedule: Schedule,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub loss: LossParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            triplets_per_epoch: None,
            seed: 0,
            k_folds: 5,
            schedule: Schedule::default(),
            clip_norm: Some(5.0),
            checkpoint_dir: None,
            log_path: None,
            loss: LossParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("train.{key}: {msg}")));
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2 (batch norm needs batch statistics)");
        }
        if self.triplets_per_epoch == Some(0) {
            return bad("triplets_per_epoch", "must be positive");
        }
        if self.k_folds < 2 {
            return bad("k_folds", "must be at least 2");
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip_norm", "must be positive");
            }
        }
        self.schedule.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// The style heads only matter when the style term is weighted.
    pub fn style_heads(&self) -> StyleHeads {
        if self.loss.w2 == 0.0 {
            StyleHeads::Skip
        } else {
            StyleHeads::Compute
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_triplet_term: f64,
    /// Per tapped layer; empty when the style heads are skipped.
    pub mean_style_terms: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub final_checkpoint: Option<PathBuf>,
}

/// SplitMix64 finalizer over a sequence of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Scales all parameter gradients so their joint L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Param], max: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|&x| x as f64 * x as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled: Vec<f32> = g.iter().map(|x| x * s).collect();
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&scaled).expect("same shape");
            }
        }
    }
    norm
}

struct StepResult {
    total: f64,
    triplet: f64,
    style: Vec<f64>,
}

/// Forward, backward and update on one batch of triplets.
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    data: &Dataset,
    batch: &[Triplet],
    epoch: usize,
    batch_index: usize,
) -> Result<StepResult> {
    let heads = cfg.style_heads();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let branch = |g: &mut Graph, model: &mut Model, pick: fn(&Triplet) -> &str| {
        let ids: Vec<&str> = batch.iter().map(pick).collect();
        let x = g.leaf(data.batch(&ids)?);
        model.forward(g, &bound, x, BnMode::Train, heads)
    };
    let a = branch(&mut g, model, |t| &t.anchor)?;
    let p = branch(&mut g, model, |t| &t.positive)?;
    let n = branch(&mut g, model, |t| &t.negative)?;

    let b = batch.len();
    let mut sum = None;
    let mut res = StepResult {
        total: 0.0,
        triplet: 0.0,
        style: Vec::new(),
    };
    for i in 0..b {
        let (loss, parts) = hybrid_loss(&mut g, &a[i], &p[i], &n[i], &cfg.loss)?;
        let nonfinite = |term: String, value: f32| Error::NonFinite {
            epoch: epoch + 1,
            batch: batch_index,
            term,
            value,
        };
        if !parts.triplet.is_finite() {
            return Err(nonfinite("triplet".into(), parts.triplet));
        }
        if let Some((l, v)) = parts.style.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(nonfinite(format!("style[{l}]"), *v));
        }
        if !parts.total.is_finite() {
            return Err(nonfinite("total".into(), parts.total));
        }
        res.total += parts.total as f64;
        res.triplet += parts.triplet as f64;
        res.style.resize(parts.style.len(), 0.0);
        for (acc, s) in res.style.iter_mut().zip(&parts.style) {
            *acc += *s as f64;
        }
        sum = Some(match sum {
            None => loss,
            Some(s) => g.add(s, loss)?,
        });
    }
    let mean = g.scale(sum.expect("non-empty batch"), 1.0 / b as f32)?;
    g.backward(mean)?;
    model.zero_grads();
    model.accumulate_grads(&g, &bound)?;
    if let Some(p) = model
        .params()
        .iter()
        .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
    {
        return Err(Error::NonFinite {
            epoch: epoch + 1,
            batch: batch_index,
            term: format!("gradient of {}", p.name),
            value: f32::NAN,
        });
    }
    if let Some(max) = cfg.clip_norm {
        clip_grad_norm(model.params_mut(), max);
    }
    adam_step(model.params_mut(), adam)?;
    Ok(res)
}

fn write_log_line(path: &Option<PathBuf>, line: &EpochLog, truncate: bool) -> Result<()> {
    if let Some(path) = path {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(truncate)
            .append(!truncate)
            .open(path)?;
        let mut s = serde_json::to_string(line)?;
        s.push('\n');
        f.write_all(s.as_bytes())?;
    }
    Ok(())
}

/// Trains a freshly initialized model on the fold's training outfits.
///
/// Each epoch draws new triplets from a seed mixed with the epoch index.
/// Given the same config, data and fold, every logged number and every
/// checkpoint byte is reproducible.
pub fn train(cfg: &TrainConfig, data: &Dataset, fold: &FoldSplit) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.input_shape() != cfg.model.input_shape {
        return Err(Error::Config(format!(
            "model.input_shape: {:?} but the dataset was loaded at {:?}",
            cfg.model.input_shape,
            data.input_shape()
        )));
    }
    let pool: &BTreeSet<String> = &fold.train_outfits;
    let complete = data
        .outfits()
        .iter()
        .filter(|(id, o)| pool.contains(*id) && o.is_complete())
        .count();
    if complete < 2 {
        return Err(Error::InsufficientData(format!(
            "fold {} has {complete} complete training outfits, need at least 2",
            fold.fold_index
        )));
    }
    let per_epoch = cfg.triplets_per_epoch.unwrap_or(4 * complete);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params(), cfg.schedule.base_lr);
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_ckpt = None;
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.schedule.lr_at(epoch);
        let seed = mix_seed(&[cfg.seed, fold.fold_index as u64, epoch as u64]);
        let triplets = build_triplets(data.records(), pool, per_epoch, seed)?;
        let (mut total, mut trip, mut style, mut seen) = (0.0, 0.0, Vec::<f64>::new(), 0usize);
        // A trailing single triplet cannot form a batch-norm batch and is dropped.
        for (bi, chunk) in triplets.chunks(cfg.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let r = train_step(&mut model, &mut adam, cfg, data, chunk, epoch, bi)?;
            total += r.total;
            trip += r.triplet;
            style.resize(r.style.len(), 0.0);
            for (acc, s) in style.iter_mut().zip(&r.style) {
                *acc += s;
            }
            seen += chunk.len();
        }
        let denom = seen.max(1) as f64;
        let line = EpochLog {
            epoch: epoch + 1,
            lr: adam.lr,
            mean_total: total / denom,
            mean_triplet_term: trip / denom,
            mean_style_terms: style.iter().map(|s| s / denom).collect(),
        };
        write_log_line(&cfg.log_path, &line, epoch == 0)?;
        log.push(line);
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch_{}.ckpt", epoch + 1));
            model.save(&path)?;
            last_ckpt = Some(path);
        }
    }
    let final_checkpoint = match (&cfg.checkpoint_dir, last_ckpt) {
        (Some(dir), Some(_)) => {
            let path = dir.join("final.ckpt");
            model.save(&path)?;
            Some(path)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        model,
        log,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(x: f32) -> Vec<Param> {
        vec![Param {
            name: "p".into(),
            tensor: Tensor::new([1], vec![x]).unwrap(),
        }]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = scalar_param(0.0);
        ps[0].tensor.accumulate_grad(&[1.0]).unwrap();
        let mut st = AdamState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st).unwrap();
        assert!((ps[0].tensor.data()[0] + 1e-3).abs() < 1e-8);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut ps = scalar_param(0.7);
        ps[0].tensor.zero_grad();
        let mut st = AdamState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps[0].tensor.data()[0], 0.7);
        ps[0].tensor.accumulate_grad(&[3.0]).unwrap();
        st.lr = 0.0;
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps[0].tensor.data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = scalar_param(0.0);
        let mut st = AdamState::new(&ps, 1e-3);
        let err = adam_step(&mut ps, &mut st).unwrap_err().to_string();
        assert!(err.contains("parameter p"), "{err}");
    }

    #[test]
    fn schedules() {
        let [step, exp] = Schedule::defaults();
        assert_eq!(step.lr_at(0), 8e-5);
        assert_eq!(step.lr_at(25), 8e-5 * 0.25);
        let want = 8e-5 * 0.95f64.powf(20.0);
        assert!((exp.lr_at(20) - want).abs() / want < 1e-12);
        for s in [step, exp] {
            assert!((0..60).all(|e| s.lr_at(e + 1) <= s.lr_at(e) && s.lr_at(e) > 0.0));
        }
    }

    #[test]
    fn schedule_json_shape() {
        let s: Schedule = serde_json::from_str(
            r#"{"base_lr":0.001,"decay":{"kind":"exponential_decay","gamma_per_epoch":0.9}}"#,
        )
        .unwrap();
        assert_eq!(s, Schedule::exponential(0.001, 0.9));
        let bad = r#"{"base_lr":0.001,"decay":{"kind":"exponential_decay","gamma":0.9}}"#;
        assert!(serde_json::from_str::<Schedule>(bad).is_err());
    }

    #[test]
    fn config_validation_names_keys() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.batch_size"));
        let mut cfg = TrainConfig::default();
        cfg.loss.alpha = -1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("loss.alpha"));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut ps = scalar_param(0.0);
        ps.push(Param {
            name: "q".into(),
            tensor: Tensor::zeros([1]),
        });
        ps[0].tensor.accumulate_grad(&[3.0]).unwrap();
        ps[1].tensor.accumulate_grad(&[4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((ps[0].tensor.grad().unwrap()[0] - 0.6).abs() < 1e-7);
        assert!((ps[1].tensor.grad().unwrap()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn seed_mixing_separates_inputs() {
        assert_ne!(mix_seed(&[1, 0, 0]), mix_seed(&[1, 0, 1]));
        assert_ne!(mix_seed(&[0, 1]), mix_seed(&[1, 0]));
        assert_eq!(mix_seed(&[5, 6]), mix_seed(&[5, 6]));
    }
}
