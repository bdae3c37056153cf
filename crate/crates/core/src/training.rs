//! Objective, learning-rate schedule, Adam and the early-stopping loop.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::{ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::evalkit::ClassificationMetrics;
use crate::model::{forward, predict_samples, Batch, ForwardOutput, Inference, ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::uapoe::{kl_to_prior, Sampling};

/// Added inside the log of the cross-entropy; `p` is an average of softmaxes.
pub const CE_EPS: f64 = 1e-12;

/// Storage precision of trained parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Parameters are rounded to `f32` after every update.
    F32,
    F64,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Weight of the KL term.
    pub beta: f64,
    /// Posterior draws per sample during training.
    pub mc_samples: usize,
    /// When false the training forward pass classifies at the posterior mean.
    pub sample_during_training: bool,
    /// How validation predictions are made.
    pub validation: Inference,
    /// Probability of hiding each observed modality of a training sample
    /// (at least one always stays). Zero disables the augmentation.
    pub modality_dropout: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_epochs: 15,
            max_epochs: 100,
            patience: 40,
            batch_size: 32,
            beta: 1e-3,
            mc_samples: 10,
            sample_during_training: true,
            validation: Inference::MonteCarlo(10),
            modality_dropout: 0.0,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return fail(format!(
                "need warmup_epochs < max_epochs, got {} and {}",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.modality_dropout) {
            return fail(format!("modality dropout must be in [0, 1), got {}", self.modality_dropout));
        }
        self.validation.validate()
    }

    fn training_sampling(&self, rows: usize, latent_dim: usize, rng: &mut impl Rng) -> Sampling {
        if self.sample_during_training {
            Sampling::monte_carlo(self.mc_samples, rows, latent_dim, rng)
        } else {
            Sampling::Mean
        }
    }
}

/// Linear warm-up from 0 to `lr`, then half-cosine decay.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.max_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.max_epochs
        )));
    }
    let (lr, warmup) = (config.lr, config.warmup_epochs);
    if epoch < warmup {
        return Ok(lr * epoch as f64 / warmup as f64);
    }
    let t = (epoch - warmup) as f64 / (config.max_epochs - warmup) as f64;
    Ok(lr * 0.5 * (1.0 + (PI * t).cos()))
}

/// Tape handles of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub kl: Var,
}

/// `mean CE + β · mean KL` for a forward pass.
pub fn objective(tape: &mut Tape, fwd: &ForwardOutput, labels: &[usize], beta: f64) -> LossVars {
    let p = tape.pick(fwd.probs, labels);
    let p = tape.add_scalar(p, CE_EPS);
    let logp = tape.log(p);
    let mean_logp = tape.mean(logp);
    let ce = tape.neg(mean_logp);
    let kl_rows = kl_to_prior(tape, fwd.fused);
    let kl = tape.mean(kl_rows);
    let weighted = tape.scale(kl, beta);
    let total = tape.add(ce, weighted);
    LossVars { total, ce, kl }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    /// Unweighted mean KL.
    pub kl: f64,
}

/// Objective value on one batch using the training-time sampling mode.
pub fn loss(
    samples: &[Sample],
    params: &ModelParams,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LossValue> {
    let batch = Batch::from_samples(samples, None, &params.config)?;
    if batch.masks.iter().any(|m| m.is_empty()) {
        return Err(Error::Data("every sample needs at least one observed modality".into()));
    }
    let sampling = config.training_sampling(batch.len(), params.config.latent_dim, rng);
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let fwd = forward(params, &mut tape, &vars, &batch, &sampling);
    let l = objective(&mut tape, &fwd, &batch.labels, config.beta);
    let value = LossValue {
        total: tape.value(l.total).item(),
        ce: tape.value(l.ce).item(),
        kl: tape.value(l.kl).item(),
    };
    if !value.total.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            value: value.total,
        });
    }
    Ok(value)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    /// One update. `grads[i]` is `None` when no gradient reached parameter `i`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>], lr: f64, precision: Precision) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let g = grads[i];
            for j in 0..param.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                if update != 0.0 {
                    let p = &mut param.data_mut()[j];
                    *p = precision.round(*p - update);
                }
            }
        }
    }
}

fn collect_grads<'a>(grads: &'a Gradients, vars: &[Var]) -> Vec<Option<&'a Tensor>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub loss: f64,
    pub ce: f64,
    /// Mean `β · KL` contribution.
    pub kl_term: f64,
    pub lr: f64,
    pub val_macro_f1: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro-F1.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Training failure that keeps whatever was good before it.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TrainError {
    #[source]
    pub source: Error,
    pub last_good: Option<Box<ModelParams>>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl From<Error> for TrainError {
    fn from(source: Error) -> Self {
        Self {
            source,
            last_good: None,
            best_epoch: None,
            history: Vec::new(),
        }
    }
}

fn drop_modalities(sample: &Sample, p: f64, rng: &mut impl Rng) -> Sample {
    let mask = sample.mask();
    if mask.observed_count() < 2 {
        return sample.clone();
    }
    let mut keep: Vec<bool> = (0..mask.len())
        .map(|m| mask.is_observed(m) && rng.random::<f64>() >= p)
        .collect();
    if !keep.iter().any(|&k| k) {
        let observed: Vec<usize> = mask.observed().collect();
        keep[observed[rng.random_range(0..observed.len())]] = true;
    }
    sample
        .restricted_to(ModalityMask::from_bools(&keep))
        .expect("subset of observed modalities")
}

/// Validation accuracy and macro-F1 under the configured inference mode.
pub fn validate_model(params: &ModelParams, val: &[Sample], config: &TrainConfig) -> Result<ClassificationMetrics> {
    let mut rng = stream(config.seed, "validation", 0);
    let probs = predict_samples(params, val, None, config.validation, &mut rng)?;
    let labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    Ok(ClassificationMetrics::from_probabilities(
        &probs,
        &labels,
        params.config.num_classes,
    ))
}

/// Train from a fresh initialization seeded by `config.seed`.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut params = ModelParams::init(model_config, config.seed)?;
    for t in params.store.tensors_mut() {
        for v in t.data_mut() {
            *v = config.precision.round(*v);
        }
    }
    train_from(params, train_set, val_set, config)
}

/// Train starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()).into());
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()).into());
    }
    for s in train_set.iter().chain(val_set) {
        s.validate(&params.config.input_dims, params.config.num_classes)?;
        if s.mask().is_empty() {
            return Err(Error::Data(format!("sample {} has no observed modality", s.id)).into());
        }
    }

    let mut adam = Adam::new(&params.store);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let latent = params.config.latent_dim;

    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config)?;
        order.shuffle(&mut stream(config.seed, "shuffle", epoch as u64));
        let mut noise_rng = stream(config.seed, "noise", epoch as u64);
        let mut drop_rng = stream(config.seed, "modality-dropout", epoch as u64);
        let (mut sum_loss, mut sum_ce, mut sum_kl, mut batches) = (0.0, 0.0, 0.0, 0usize);

        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if config.modality_dropout > 0.0 {
                        drop_modalities(&train_set[i], config.modality_dropout, &mut drop_rng)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let batch = Batch::from_samples(&samples, None, &params.config)?;
            let sampling = config.training_sampling(batch.len(), latent, &mut noise_rng);
            let mut tape = Tape::new();
            let vars = params.store.bind(&mut tape);
            let fwd = forward(&params, &mut tape, &vars, &batch, &sampling);
            let l = objective(&mut tape, &fwd, &batch.labels, config.beta);
            let total = tape.value(l.total).item();
            if !total.is_finite() {
                return Err(TrainError {
                    source: Error::NonFinite {
                        epoch,
                        batch: b,
                        value: total,
                    },
                    best_epoch: best.as_ref().map(|b| b.1),
                    last_good: best.map(|(_, _, p)| Box::new(p)),
                    history,
                });
            }
            sum_loss += total;
            sum_ce += tape.value(l.ce).item();
            sum_kl += config.beta * tape.value(l.kl).item();
            batches += 1;
            let grads = tape.backward(l.total);
            adam.step(&mut params.store, &collect_grads(&grads, &vars), lr, config.precision);
        }

        let metrics = validate_model(&params, val_set, config)?;
        let n = batches as f64;
        history.push(EpochRecord {
            epoch,
            loss: sum_loss / n,
            ce: sum_ce / n,
            kl_term: sum_kl / n,
            lr,
            val_macro_f1: metrics.macro_f1,
            val_acc: metrics.accuracy,
        });

        let improved = best.as_ref().is_none_or(|(score, _, _)| metrics.macro_f1 > *score);
        if improved {
            best = Some((metrics.macro_f1, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                let (_, best_epoch, best_params) = best.expect("set on first epoch");
                return Ok(TrainOutcome {
                    params: best_params,
                    history,
                    best_epoch,
                    stopped_early: true,
                });
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        stopped_early: false,
    })
}

pub const HISTORY_COLUMNS: &str = "epoch\tloss\tce\tkl_term\tlr\tval_macro_f1\tval_acc";

/// Line-delimited training log. Lines starting with `#` are comments.
pub fn format_history(history: &[EpochRecord], best_epoch: Option<usize>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# missfuse training history");
    match best_epoch {
        Some(e) => {
            let _ = writeln!(out, "# best_epoch={e}");
        }
        None => {
            let _ = writeln!(out, "# aborted before any epoch completed");
        }
    }
    let _ = writeln!(out, "{HISTORY_COLUMNS}");
    for r in history {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.loss, r.ce, r.kl_term, r.lr, r.val_macro_f1, r.val_acc
        );
    }
    out
}

/// Parse a log written by [`format_history`].
pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header == HISTORY_COLUMNS => {}
        _ => return Err(Error::parse("<history>", 1, "header", "missing column header")),
    }
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(Error::parse("<history>", i as u64 + 1, "row", "expected 7 columns"));
            }
            let num = |k: usize| -> Result<f64> {
                fields[k]
                    .parse()
                    .map_err(|_| Error::parse("<history>", i as u64 + 1, HISTORY_COLUMNS.split('\t').nth(k).unwrap_or("?"), "not a number"))
            };
            Ok(EpochRecord {
                epoch: num(0)? as usize,
                loss: num(1)?,
                ce: num(2)?,
                kl_term: num(3)?,
                lr: num(4)?,
                val_macro_f1: num(5)?,
                val_acc: num(6)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(15, &cfg).unwrap(), 2e-4);
        let last = lr_at(99, &cfg).unwrap();
        let expected = 2e-4 * 0.5 * (1.0 + (PI * 84.0 / 85.0).cos());
        assert!((last - expected).abs() < 1e-20);
        assert!((lr_at(5, &cfg).unwrap() - 2e-4 / 3.0).abs() < 1e-20);
        assert!(lr_at(100, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta: -1.0, ..Default::default() },
            TrainConfig { warmup_epochs: 100, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { mc_samples: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::row(vec![0.5, -0.25]));
        store.register("b", Tensor::row(vec![1.0]));
        let before = store.clone();
        let mut adam = Adam::new(&store);
        let g = Tensor::row(vec![0.0, 3.0]);
        adam.step(&mut store, &[Some(&g), None], 1e-2, Precision::F64);
        assert_eq!(store.tensors()[0].data()[0], before.tensors()[0].data()[0]);
        assert_ne!(store.tensors()[0].data()[1], before.tensors()[0].data()[1]);
        assert_eq!(store.tensors()[1], before.tensors()[1]);
        // First step moves by ≈ lr in the direction opposite to the gradient.
        let moved = before.tensors()[0].data()[1] - store.tensors()[0].data()[1];
        assert!((moved - 1e-2).abs() < 1e-8);
    }

    #[test]
    fn history_round_trip() {
        let records = vec![
            EpochRecord { epoch: 0, loss: 1.5, ce: 1.4, kl_term: 0.1, lr: 0.0, val_macro_f1: 0.3, val_acc: 0.4 },
            EpochRecord { epoch: 1, loss: 1.25, ce: 1.2, kl_term: 0.05, lr: 1e-5, val_macro_f1: 0.5, val_acc: 0.6 },
        ];
        let text = format_history(&records, Some(1));
        assert_eq!(parse_history(&text).unwrap(), records);
        assert!(parse_history("nonsense").is_err());
    }
}
