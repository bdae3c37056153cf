//! Uncertainty-aware product-of-experts fusion.
//!
//! Every modality contributes a diagonal Gaussian expert over the shared
//! latent, whether its representation was observed or completed. Experts are
//! multiplied together with a standard-normal prior in closed form, so an
//! expert with a large variance contributes little precision.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Log-variance clamp applied to every expert head.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    /// `D → 2·D_s` heads emitting `(μ, log σ²)`, one per modality.
    pub heads: Vec<Linear>,
    /// `D_s → C` classifier.
    pub output: Linear,
    pub latent_dim: usize,
}

impl ClassifierParams {
    pub fn new(
        store: &mut ParamStore,
        modalities: usize,
        dim: usize,
        latent_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let heads = (0..modalities)
            .map(|m| Linear::new(store, &format!("expert.{m}"), dim, 2 * latent_dim, rng))
            .collect();
        let output = Linear::new(store, "classifier", latent_dim, num_classes, rng);
        Self {
            heads,
            output,
            latent_dim,
        }
    }
}

/// Tape handles of one expert: mean, variance and precision (`1/σ²`).
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub mu: Var,
    pub var: Var,
    pub precision: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub mu: Var,
    pub var: Var,
}

/// Apply head `G_m` to `z_m`. With `unit_variance` the log-variance half of the
/// head is ignored and every expert has variance 1.
pub fn expert(
    tape: &mut Tape,
    vars: &[Var],
    classifier: &ClassifierParams,
    m: usize,
    z_m: Var,
    unit_variance: bool,
) -> ExpertVars {
    let ds = classifier.latent_dim;
    let out = classifier.heads[m].apply(tape, vars, z_m);
    let mu = tape.slice(out, 0, ds);
    if unit_variance {
        let rows = tape.value(mu).rows();
        let one = tape.constant(Tensor::filled(rows, ds, 1.0));
        return ExpertVars {
            mu,
            var: one,
            precision: one,
        };
    }
    let raw = tape.slice(out, ds, 2 * ds);
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    let var = tape.exp(logvar);
    let neg = tape.neg(logvar);
    let precision = tape.exp(neg);
    ExpertVars { mu, var, precision }
}

/// Closed-form product of the experts and a `N(0, I)` prior:
/// `σ⁻² = 1 + Σ σ_m⁻²`, `μ = σ² ⊙ Σ μ_m σ_m⁻²`. Experts are summed in the
/// order given.
pub fn fuse(tape: &mut Tape, experts: &[ExpertVars]) -> FusedVars {
    assert!(!experts.is_empty(), "fusion needs at least one expert");
    let mut precision = experts[0].precision;
    let mut weighted = tape.mul(experts[0].mu, experts[0].precision);
    for e in &experts[1..] {
        precision = tape.add(precision, e.precision);
        let w = tape.mul(e.mu, e.precision);
        weighted = tape.add(weighted, w);
    }
    let precision = tape.add_scalar(precision, 1.0);
    let var = tape.recip(precision);
    let mu = tape.mul(var, weighted);
    FusedVars { mu, var }
}

/// How the latent is turned into class probabilities.
#[derive(Clone, Debug)]
pub enum Sampling {
    /// Classify at the posterior mean.
    Mean,
    /// Average softmax outputs over reparameterized draws `μ + σ ⊙ ε_k`; one
    /// `B × D_s` noise matrix per draw.
    MonteCarlo(Vec<Tensor>),
}

impl Sampling {
    /// Draw `draws` standard-normal noise matrices of shape `rows × latent_dim`.
    pub fn monte_carlo(draws: usize, rows: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let noise = (0..draws)
            .map(|_| {
                Tensor::matrix(
                    rows,
                    latent_dim,
                    (0..rows * latent_dim).map(|_| StandardNormal.sample(rng)).collect(),
                )
            })
            .collect();
        Sampling::MonteCarlo(noise)
    }
}

/// Class probabilities `B × C` from the fused posterior.
pub fn predict(
    tape: &mut Tape,
    vars: &[Var],
    classifier: &ClassifierParams,
    fused: FusedVars,
    sampling: &Sampling,
) -> Var {
    match sampling {
        Sampling::Mean => {
            let logits = classifier.output.apply(tape, vars, fused.mu);
            tape.softmax(logits)
        }
        Sampling::MonteCarlo(noise) => {
            assert!(!noise.is_empty(), "Monte Carlo prediction needs at least one draw");
            let std = tape.sqrt(fused.var);
            let mut total: Option<Var> = None;
            for eps in noise {
                let eps = tape.constant(eps.clone());
                let spread = tape.mul(std, eps);
                let s = tape.add(fused.mu, spread);
                let logits = classifier.output.apply(tape, vars, s);
                let p = tape.softmax(logits);
                total = Some(match total {
                    Some(acc) => tape.add(acc, p),
                    None => p,
                });
            }
            tape.scale(total.expect("non-empty"), 1.0 / noise.len() as f64)
        }
    }
}

/// Per-row `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)` as a `B × 1` column.
pub fn kl_to_prior(tape: &mut Tape, fused: FusedVars) -> Var {
    let mu2 = tape.mul(fused.mu, fused.mu);
    let logvar = tape.log(fused.var);
    let t = tape.add(mu2, fused.var);
    let t = tape.sub(t, logvar);
    let t = tape.add_scalar(t, -1.0);
    let s = tape.row_sum(t);
    tape.scale(s, 0.5)
}

/// A diagonal Gaussian expert as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianExpert {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Fused posterior as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPosterior {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Expert of modality `m` for a single aligned vector `z_m`.
pub fn expert_from_row(
    z_m: &[f64],
    m: usize,
    store: &ParamStore,
    classifier: &ClassifierParams,
) -> GaussianExpert {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let z = tape.constant(Tensor::row(z_m.to_vec()));
    let e = expert(&mut tape, &vars, classifier, m, z, false);
    GaussianExpert {
        mu: tape.value(e.mu).data().to_vec(),
        var: tape.value(e.var).data().to_vec(),
    }
}

/// Fuse experts given as values. Runs the same tape path used in training.
pub fn fuse_experts(experts: &[GaussianExpert]) -> Result<FusedPosterior> {
    fuse_experts_impl(experts, false)
}

/// Fault-injection hook for the verification suite: fusion with the sign of
/// the precision-weighted mean flipped. Never use for real predictions.
#[doc(hidden)]
pub fn fuse_experts_faulty(experts: &[GaussianExpert]) -> Result<FusedPosterior> {
    fuse_experts_impl(experts, true)
}

fn fuse_experts_impl(experts: &[GaussianExpert], flip_sign: bool) -> Result<FusedPosterior> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one expert".into()))?;
    let ds = first.mu.len();
    let mut tape = Tape::new();
    let vars = experts
        .iter()
        .map(|e| {
            if e.mu.len() != ds || e.var.len() != ds {
                return Err(Error::Dimension {
                    op: "fuse",
                    left: vec![ds],
                    right: vec![e.mu.len(), e.var.len()],
                });
            }
            if e.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Data("expert variance must be positive and finite".into()));
            }
            let mu = tape.constant(Tensor::row(e.mu.clone()));
            let var = tape.constant(Tensor::row(e.var.clone()));
            let precision = tape.recip(var);
            Ok(ExpertVars { mu, var, precision })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fused = fuse(&mut tape, &vars);
    if flip_sign {
        fused.mu = tape.neg(fused.mu);
    }
    Ok(FusedPosterior {
        mu: tape.value(fused.mu).data().to_vec(),
        var: tape.value(fused.var).data().to_vec(),
    })
}

pub fn kl_divergence_to_prior(post: &FusedPosterior) -> f64 {
    let mut tape = Tape::new();
    let fused = FusedVars {
        mu: tape.constant(Tensor::row(post.mu.clone())),
        var: tape.constant(Tensor::row(post.var.clone())),
    };
    let kl = kl_to_prior(&mut tape, fused);
    tape.value(kl).item()
}

/// Class probabilities for one posterior. `draws = None` classifies at the
/// mean; `Some(L)` averages `L` Monte Carlo draws from `rng`.
pub fn predict_proba(
    post: &FusedPosterior,
    draws: Option<usize>,
    store: &ParamStore,
    classifier: &ClassifierParams,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let sampling = match draws {
        None => Sampling::Mean,
        Some(0) => {
            return Err(Error::Config("Monte Carlo draw count must be at least 1".into()));
        }
        Some(l) => Sampling::monte_carlo(l, 1, post.mu.len(), rng),
    };
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let fused = FusedVars {
        mu: tape.constant(Tensor::row(post.mu.clone())),
        var: tape.constant(Tensor::row(post.var.clone())),
    };
    let p = predict(&mut tape, &vars, classifier, fused, &sampling);
    Ok(tape.value(p).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn g(mu: &[f64], var: &[f64]) -> GaussianExpert {
        GaussianExpert {
            mu: mu.to_vec(),
            var: var.to_vec(),
        }
    }

    fn classifier(ds: usize, c: usize) -> (ParamStore, ClassifierParams) {
        let mut store = ParamStore::new();
        let mut rng = stream(1, "cls", 0);
        let cls = ClassifierParams::new(&mut store, 2, 4, ds, c, &mut rng);
        (store, cls)
    }

    #[test]
    fn fuse_closed_form_examples() {
        let one = fuse_experts(&[g(&[0.0], &[1.0])]).unwrap();
        assert_eq!(one.var, vec![0.5]);
        assert_eq!(one.mu, vec![0.0]);

        let two = fuse_experts(&[g(&[2.0], &[1.0]), g(&[0.0], &[1.0])]).unwrap();
        assert!((two.var[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((two.mu[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_variance_expert_is_ignored_in_the_limit() {
        let a = g(&[1.0, -2.0], &[0.5, 2.0]);
        let b = g(&[0.3, 0.7], &[1.5, 0.2]);
        let noisy = g(&[50.0, -50.0], &[1e12, 1e12]);
        let with = fuse_experts(&[a.clone(), noisy, b.clone()]).unwrap();
        let without = fuse_experts(&[a, b]).unwrap();
        for d in 0..2 {
            assert!((with.mu[d] - without.mu[d]).abs() < 1e-9);
            assert!((with.var[d] - without.var[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_rejects_bad_input() {
        assert!(fuse_experts(&[]).is_err());
        assert!(fuse_experts(&[g(&[0.0], &[0.0])]).is_err());
        assert!(fuse_experts(&[g(&[0.0], &[1.0]), g(&[0.0, 1.0], &[1.0, 1.0])]).is_err());
    }

    #[test]
    fn expert_variance_clamps() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, "cls", 0);
        let cls = ClassifierParams::new(&mut store, 1, 2, 1, 2, &mut rng);
        let head = cls.heads[0];
        *store.get_mut(head.weight) = Tensor::zeros(2, 2);
        for (bias, expected) in [(0.0, 1.0), (-50.0, (-10.0f64).exp()), (50.0, 10.0f64.exp())] {
            *store.get_mut(head.bias) = Tensor::row(vec![0.0, bias]);
            let e = expert_from_row(&[0.4, -0.1], 0, &store, &cls);
            assert_eq!(e.var, vec![expected]);
        }
    }

    #[test]
    fn kl_examples() {
        let zero = kl_divergence_to_prior(&FusedPosterior {
            mu: vec![0.0; 3],
            var: vec![1.0; 3],
        });
        assert!(zero.abs() <= 1e-12);
        let half = kl_divergence_to_prior(&FusedPosterior {
            mu: vec![1.0],
            var: vec![1.0],
        });
        assert!((half - 0.5).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let (mut store, cls) = classifier(3, 4);
        let post = FusedPosterior {
            mu: vec![0.2, -1.0, 0.5],
            var: vec![0.3, 0.1, 0.8],
        };
        let mut rng = stream(3, "mc", 0);
        let p = predict_proba(&post, Some(10), &store, &cls, &mut rng).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(predict_proba(&post, Some(0), &store, &cls, &mut rng).is_err());

        // Mean mode equals softmax(W μ + b) computed directly.
        let w = store.get(cls.output.weight).clone();
        let b = store.get(cls.output.bias).clone();
        let logits: Vec<f64> = (0..4)
            .map(|c| b.data()[c] + (0..3).map(|d| post.mu[d] * w.get(d, c)).sum::<f64>())
            .collect();
        let direct = crate::tensor::softmax(&logits);
        let mean = predict_proba(&post, None, &store, &cls, &mut rng).unwrap();
        for (a, e) in mean.iter().zip(&direct) {
            assert!((a - e).abs() < 1e-15);
        }

        *store.get_mut(cls.output.weight) = Tensor::zeros(3, 4);
        *store.get_mut(cls.output.bias) = Tensor::zeros(1, 4);
        let p = predict_proba(&post, Some(7), &store, &cls, &mut rng).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
