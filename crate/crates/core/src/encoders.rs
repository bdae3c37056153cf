//! Observation masks, samples, and the per-modality encoders that map raw
//! inputs into the shared feature space.
//!
//! Missing modalities never run through their encoder; their slot in the
//! unified feature matrix is an exact zero row.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, ModelParams};
use crate::params::{Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest number of modalities a mask can describe.
pub const MAX_MODALITIES: usize = 16;

/// Which modalities of one sample were observed. Bit `m` set means modality
/// `m` is present.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    bits: u32,
    modalities: u8,
}

impl ModalityMask {
    pub fn from_bools(observed: &[bool]) -> Self {
        assert!(observed.len() <= MAX_MODALITIES, "too many modalities");
        let bits = observed
            .iter()
            .enumerate()
            .fold(0u32, |acc, (m, &o)| if o { acc | (1 << m) } else { acc });
        Self {
            bits,
            modalities: observed.len() as u8,
        }
    }

    pub fn from_bits(bits: u32, modalities: usize) -> Result<Self> {
        if modalities == 0 || modalities > MAX_MODALITIES {
            return Err(Error::Config(format!(
                "modality count must be in 1..={MAX_MODALITIES}, got {modalities}"
            )));
        }
        if bits >> modalities != 0 {
            return Err(Error::Config(format!(
                "mask bits {bits:#b} exceed {modalities} modalities"
            )));
        }
        Ok(Self {
            bits,
            modalities: modalities as u8,
        })
    }

    pub fn full(modalities: usize) -> Self {
        Self::from_bits((1u32 << modalities) - 1, modalities).expect("valid modality count")
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn len(self) -> usize {
        self.modalities as usize
    }

    pub fn is_observed(self, m: usize) -> bool {
        m < self.len() && self.bits & (1 << m) != 0
    }

    pub fn observed_count(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn observed(self) -> impl Iterator<Item = usize> {
        (0..self.len()).filter(move |&m| self.is_observed(m))
    }

    /// Observed modalities also observed in `other`.
    pub fn intersect(self, other: ModalityMask) -> Self {
        assert_eq!(self.modalities, other.modalities);
        Self {
            bits: self.bits & other.bits,
            modalities: self.modalities,
        }
    }

    pub fn is_subset_of(self, other: ModalityMask) -> bool {
        self.bits & !other.bits == 0
    }

    /// All `2^M − 1` non-empty masks in ascending bit order.
    pub fn all_nonempty(modalities: usize) -> Vec<ModalityMask> {
        (1..(1u32 << modalities))
            .map(|b| Self::from_bits(b, modalities).expect("in range"))
            .collect()
    }

    /// One character per modality, modality 0 first: `"1010"`.
    pub fn to_bit_string(self) -> String {
        (0..self.len())
            .map(|m| if self.is_observed(m) { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        if s.is_empty() || s.len() > MAX_MODALITIES {
            return Err(Error::Data(format!("bad mask string {s:?}")));
        }
        let bools = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Data(format!("bad mask string {s:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(Self::from_bools(&bools))
    }
}

impl fmt::Debug for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModalityMask({})", self.to_bit_string())
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

/// One subject: raw features per modality (absent when unobserved) and a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    features: Vec<Option<Vec<f32>>>,
    pub label: usize,
}

impl Sample {
    pub fn new(id: u64, features: Vec<Option<Vec<f32>>>, label: usize) -> Self {
        assert!(features.len() <= MAX_MODALITIES);
        Self { id, features, label }
    }

    pub fn features(&self) -> &[Option<Vec<f32>>] {
        &self.features
    }

    pub fn feature(&self, m: usize) -> Option<&[f32]> {
        self.features.get(m).and_then(|f| f.as_deref())
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn mask(&self) -> ModalityMask {
        let observed: Vec<bool> = self.features.iter().map(Option::is_some).collect();
        ModalityMask::from_bools(&observed)
    }

    /// Drop every modality not in `mask`. Asking for a modality the sample
    /// does not have is an error.
    pub fn restricted_to(&self, mask: ModalityMask) -> Result<Sample> {
        if mask.len() != self.features.len() {
            return Err(Error::Data(format!(
                "mask covers {} modalities, sample {} has {}",
                mask.len(),
                self.id,
                self.features.len()
            )));
        }
        if !mask.is_subset_of(self.mask()) {
            return Err(Error::Data(format!(
                "sample {} lacks modalities requested by mask {mask}",
                self.id
            )));
        }
        let features = self
            .features
            .iter()
            .enumerate()
            .map(|(m, f)| if mask.is_observed(m) { f.clone() } else { None })
            .collect();
        Ok(Sample {
            id: self.id,
            features,
            label: self.label,
        })
    }

    /// Check dimensions against the configured per-modality widths and the class count.
    pub fn validate(&self, input_dims: &[usize], num_classes: usize) -> Result<()> {
        if self.features.len() != input_dims.len() {
            return Err(Error::Data(format!(
                "sample {} has {} modalities, expected {}",
                self.id,
                self.features.len(),
                input_dims.len()
            )));
        }
        for (m, (f, &d)) in self.features.iter().zip(input_dims).enumerate() {
            if let Some(values) = f {
                if values.len() != d {
                    return Err(Error::Data(format!(
                        "sample {}: modality {m} has {} features, expected {d}",
                        self.id,
                        values.len()
                    )));
                }
            }
        }
        if self.label >= num_classes {
            return Err(Error::Data(format!(
                "sample {}: label {} out of range for {num_classes} classes",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

/// Unified features of one sample; `h[m]` is all zeros when `m` is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub h: Vec<Vec<f64>>,
    pub mask: ModalityMask,
}

/// Two-layer perceptron `linear → relu → linear`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub hidden: Linear,
    pub output: Linear,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        m: usize,
        input_dim: usize,
        hidden: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("encoder.{m}.hidden"), input_dim, hidden, rng),
            output: Linear::new(store, &format!("encoder.{m}.output"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let a = self.hidden.apply(tape, vars, x);
        let a = tape.relu(a);
        self.output.apply(tape, vars, a)
    }
}

/// Encode modality `m` for a whole batch. Only observed rows are fed to the
/// encoder; the others come out as exact zeros.
pub fn encode_modality(
    tape: &mut Tape,
    vars: &[Var],
    encoder: &EncoderParams,
    batch: &Batch,
    m: usize,
    dim: usize,
) -> Var {
    let input = &batch.inputs[m];
    let rows: Vec<usize> = (0..batch.len())
        .filter(|&r| batch.masks[r].is_observed(m))
        .collect();
    if rows.is_empty() {
        return tape.constant(Tensor::zeros(batch.len(), dim));
    }
    let mut gathered = Vec::with_capacity(rows.len() * input.cols());
    for &r in &rows {
        gathered.extend_from_slice(input.row_slice(r));
    }
    let x = tape.constant(Tensor::matrix(rows.len(), input.cols(), gathered));
    let encoded = encoder.forward(tape, vars, x);
    tape.scatter_rows(encoded, &rows, batch.len())
}

/// Unified features of a single sample.
pub fn encode(sample: &Sample, params: &ModelParams) -> Result<FeatureBundle> {
    let config = &params.config;
    sample.validate(&config.input_dims, config.num_classes)?;
    let batch = Batch::from_samples(std::slice::from_ref(sample), None, config)?;
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let h = (0..config.num_modalities())
        .map(|m| {
            let v = encode_modality(&mut tape, &vars, &params.encoders[m], &batch, m, config.dim);
            tape.value(v).data().to_vec()
        })
        .collect();
    Ok(FeatureBundle {
        h,
        mask: sample.mask(),
    })
}
