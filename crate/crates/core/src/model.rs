//! Full model: encoders → alignment → experts → fusion → classifier.

use rand::Rng;

use crate::encoders::{encode_modality, EncoderParams, ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pra::{align, AlignedVars, PraParams};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::uapoe::{expert, fuse, predict, ClassifierParams, ExpertVars, FusedVars, Sampling};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Raw feature width of each modality; its length is the modality count.
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    /// Shared feature width `D`.
    pub dim: usize,
    /// Latent width `D_s` of the experts.
    pub latent_dim: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    pub heads: usize,
    pub literal_attention: bool,
    pub vector_gate: bool,
    /// Skip alignment: observed modalities feed `LN(h)`, missing ones zeros.
    pub disable_pra: bool,
    /// Fix every expert variance to 1.
    pub disable_uapoe_variance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: vec![8, 32, 32, 32],
            num_classes: 3,
            dim: 64,
            latent_dim: 64,
            hidden: 128,
            heads: 4,
            literal_attention: false,
            vector_gate: false,
            disable_pra: false,
            disable_uapoe_variance: false,
        }
    }
}

impl ModelConfig {
    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_modalities();
        if m == 0 || m > crate::encoders::MAX_MODALITIES {
            return Err(Error::Config(format!("modality count {m} out of range")));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("modality input dims must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.dim < 2 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "bad widths: dim {}, latent {}, hidden {}",
                self.dim, self.latent_dim, self.hidden
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Shared layer-norm gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl NormParams {
    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        tape.layer_norm(x, vars[self.gain.0], vars[self.shift.0])
    }
}

/// All trainable parameters plus the layout that names them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<EncoderParams>,
    /// Absent when alignment is disabled.
    pub pra: Option<PraParams>,
    pub norm: NormParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", 0);
        let mut store = ParamStore::new();
        let (d, m) = (config.dim, config.num_modalities());
        let encoders = config
            .input_dims
            .iter()
            .enumerate()
            .map(|(i, &input)| EncoderParams::new(&mut store, i, input, config.hidden, d, &mut rng))
            .collect();
        let pra = (!config.disable_pra).then(|| {
            PraParams::new(
                &mut store,
                m,
                d,
                config.heads,
                config.literal_attention,
                config.vector_gate,
                &mut rng,
            )
        });
        let norm = NormParams {
            gain: store.register("norm.gain", Tensor::filled(1, d, 1.0)),
            shift: store.register("norm.shift", Tensor::zeros(1, d)),
        };
        let classifier =
            ClassifierParams::new(&mut store, m, d, config.latent_dim, config.num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoders,
            pra,
            norm,
            classifier,
        })
    }

    /// Rebuild a model from stored tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if model.store.names() != store.names() {
            return Err(Error::Data(
                "stored parameter names do not match the model layout".into(),
            ));
        }
        for (name, (a, b)) in store
            .names()
            .iter()
            .zip(model.store.tensors().iter().zip(store.tensors()))
        {
            if a.shape() != b.shape() {
                return Err(Error::Data(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }
}

/// Dense batch of samples: one `B × d_m` matrix per modality. Rows of
/// missing modalities hold placeholders that are never read.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub masks: Vec<ModalityMask>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Stack samples, optionally re-masking each one to `mask` first.
    pub fn from_samples(
        samples: &[Sample],
        mask: Option<ModalityMask>,
        config: &ModelConfig,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = samples.len();
        let mut inputs: Vec<Vec<f64>> = config.input_dims.iter().map(|&d| vec![0.0; rows * d]).collect();
        let mut masks = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for (r, s) in samples.iter().enumerate() {
            s.validate(&config.input_dims, config.num_classes)?;
            let effective = match mask {
                Some(mask) => {
                    if !mask.is_subset_of(s.mask()) || mask.len() != s.num_modalities() {
                        return Err(Error::Data(format!(
                            "sample {} cannot be re-masked to {mask}",
                            s.id
                        )));
                    }
                    mask
                }
                None => s.mask(),
            };
            for (m, &d) in config.input_dims.iter().enumerate() {
                if effective.is_observed(m) {
                    let values = s.feature(m).expect("validated");
                    for (dst, &v) in inputs[m][r * d..(r + 1) * d].iter_mut().zip(values) {
                        *dst = f64::from(v);
                    }
                }
            }
            masks.push(effective);
            labels.push(s.label);
        }
        let inputs = inputs
            .into_iter()
            .zip(&config.input_dims)
            .map(|(data, &d)| Tensor::matrix(rows, d, data))
            .collect();
        Ok(Self {
            inputs,
            masks,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub h: Vec<Var>,
    pub aligned: Option<AlignedVars>,
    pub z: Vec<Var>,
    pub experts: Vec<ExpertVars>,
    pub fused: FusedVars,
    pub probs: Var,
}

pub fn forward(
    params: &ModelParams,
    tape: &mut Tape,
    vars: &[Var],
    batch: &Batch,
    sampling: &Sampling,
) -> ForwardOutput {
    let config = &params.config;
    let modalities = config.num_modalities();
    let h: Vec<Var> = (0..modalities)
        .map(|m| encode_modality(tape, vars, &params.encoders[m], batch, m, config.dim))
        .collect();

    let (aligned, z) = match &params.pra {
        Some(pra) => {
            let aligned = align(tape, vars, pra, &params.norm, &h, &batch.masks);
            let z = aligned.z.clone();
            (Some(aligned), z)
        }
        None => {
            let zero = tape.constant(Tensor::zeros(batch.len(), config.dim));
            let z = (0..modalities)
                .map(|m| {
                    let observed: Vec<bool> = batch.masks.iter().map(|k| k.is_observed(m)).collect();
                    let normed = params.norm.apply(tape, vars, h[m]);
                    tape.select_rows(&observed, normed, zero)
                })
                .collect();
            (None, z)
        }
    };

    let experts: Vec<ExpertVars> = z
        .iter()
        .enumerate()
        .map(|(m, &z_m)| {
            expert(
                tape,
                vars,
                &params.classifier,
                m,
                z_m,
                config.disable_uapoe_variance,
            )
        })
        .collect();
    let fused = fuse(tape, &experts);
    let probs = predict(tape, vars, &params.classifier, fused, sampling);
    ForwardOutput {
        h,
        aligned,
        z,
        experts,
        fused,
        probs,
    }
}

/// Prediction mode at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inference {
    /// Classify at the fused posterior mean.
    Mean,
    /// Average over this many posterior draws.
    MonteCarlo(usize),
}

impl Inference {
    pub fn sampling(self, rows: usize, latent_dim: usize, rng: &mut impl Rng) -> Sampling {
        match self {
            Inference::Mean => Sampling::Mean,
            Inference::MonteCarlo(l) => Sampling::monte_carlo(l, rows, latent_dim, rng),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Inference::MonteCarlo(0) => Err(Error::Config(
                "Monte Carlo draw count must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Rows per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 256;

/// Class probabilities for each sample, optionally re-masked to `mask`.
pub fn predict_samples(
    params: &ModelParams,
    samples: &[Sample],
    mask: Option<ModalityMask>,
    inference: Inference,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    inference.validate()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_CHUNK) {
        let batch = Batch::from_samples(chunk, mask, &params.config)?;
        let sampling = inference.sampling(batch.len(), params.config.latent_dim, rng);
        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let fwd = forward(params, &mut tape, &vars, &batch, &sampling);
        let probs = tape.value(fwd.probs);
        for r in 0..probs.rows() {
            out.push(probs.row_slice(r).to_vec());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            dim: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn disabling_alignment_drops_its_parameters() {
        let full = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        let cfg = ModelConfig {
            disable_pra: true,
            ..ModelConfig::default()
        };
        let ablated = ModelParams::init(&cfg, 1).unwrap();
        let pra_count: usize = full
            .store
            .names()
            .iter()
            .zip(full.store.tensors())
            .filter(|(n, _)| n.starts_with("pra."))
            .map(|(_, t)| t.len())
            .sum();
        assert!(pra_count > 0);
        assert_eq!(ablated.store.scalar_count() + pra_count, full.store.scalar_count());
        assert!(ablated.store.names().iter().all(|n| !n.starts_with("pra.")));
    }

    #[test]
    fn from_store_rejects_other_layouts() {
        let full = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        let cfg = ModelConfig {
            disable_pra: true,
            ..ModelConfig::default()
        };
        assert!(ModelParams::from_store(&cfg, full.store.clone()).is_err());
        let again = ModelParams::from_store(&ModelConfig::default(), full.store.clone()).unwrap();
        assert_eq!(again.store, full.store);
    }
}
