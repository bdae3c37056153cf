//! Built-in self checks run by `missfuse verify`.
//!
//! Each check compares the implementation against an independent oracle:
//! brute-force grid integration for the Gaussian product, central finite
//! differences for gradients, direct Monte Carlo for the KL term, and
//! placeholder perturbation for masking.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{ModalityMask, Sample};
use crate::error::Result;
use crate::model::{forward, Batch, ModelConfig, ModelParams};
use crate::rng::stream;
use crate::tape::{grad_check, Tape};
use crate::training::objective;
use crate::uapoe::{fuse_experts, fuse_experts_faulty, kl_divergence_to_prior, FusedPosterior, GaussianExpert, Sampling};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed discrepancy in the check's own units.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} worst={:.3e} tol={:.1e} ({:.2}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<(f64, bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (worst, passed, detail) = match f() {
        Ok(x) => x,
        Err(e) => (f64::INFINITY, false, format!("error: {e}")),
    };
    CheckOutcome {
        name,
        passed,
        worst,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Mean and variance of the normalized product `N(0,1) · Π N(μ_m, σ²_m)`
/// integrated on a uniform grid.
pub fn grid_product_moments(experts: &[(f64, f64)], lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize + 1;
    let log_density = |x: f64| {
        -0.5 * x * x - experts.iter().map(|&(mu, var)| (x - mu) * (x - mu) / (2.0 * var)).sum::<f64>()
    };
    let peak = (0..n).map(|k| log_density(lo + k as f64 * step)).fold(f64::NEG_INFINITY, f64::max);
    let (mut w_sum, mut x_sum) = (0.0, 0.0);
    let weights: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let x = lo + k as f64 * step;
            let w = (log_density(x) - peak).exp();
            w_sum += w;
            x_sum += w * x;
            (x, w)
        })
        .collect();
    let mean = x_sum / w_sum;
    let var = weights.iter().map(|(x, w)| w * (x - mean) * (x - mean)).sum::<f64>() / w_sum;
    (mean, var)
}

pub const POE_GRID_STEP: f64 = 1e-3;
pub const POE_TOLERANCE: f64 = 1e-3;

/// Fused moments against grid integration for random one-dimensional experts.
pub fn poe_grid_oracle(configs: usize, seed: u64, inject_fault: bool) -> CheckOutcome {
    timed("poe-grid-oracle", POE_TOLERANCE, || {
        let mut rng = stream(seed, "verify-poe", 0);
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let m = rng.random_range(1..=4);
            let experts: Vec<(f64, f64)> = (0..m)
                .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-4.0f64..4.0).exp()))
                .collect();
            let values: Vec<GaussianExpert> = experts
                .iter()
                .map(|&(mu, var)| GaussianExpert { mu: vec![mu], var: vec![var] })
                .collect();
            let fused = if inject_fault {
                fuse_experts_faulty(&values)?
            } else {
                fuse_experts(&values)?
            };
            let (gm, gv) = grid_product_moments(&experts, -10.0, 10.0, POE_GRID_STEP);
            worst = worst.max((fused.mu[0] - gm).abs()).max((fused.var[0] - gv).abs());
        }
        Ok((worst, worst <= POE_TOLERANCE, format!("{configs} configurations")))
    })
}

/// Small configuration used by the gradient check.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig {
        input_dims: vec![5, 6, 7],
        num_classes: 3,
        dim: 8,
        latent_dim: 8,
        hidden: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn random_sample(id: u64, dims: &[usize], classes: usize, mask: ModalityMask, rng: &mut impl Rng) -> Sample {
    let features = dims
        .iter()
        .enumerate()
        .map(|(m, &d)| mask.is_observed(m).then(|| (0..d).map(|_| normal(rng) as f32).collect()))
        .collect();
    Sample::new(id, features, rng.random_range(0..classes))
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// KL weight used by the gradient check so the KL path carries real signal.
pub const GRADIENT_CHECK_BETA: f64 = 0.1;

/// Finite-difference check of the full objective for one seed. Returns the
/// worst relative error.
pub fn gradient_check_seed(config: &ModelConfig, seed: u64, batch_size: usize) -> Result<f64> {
    let params = ModelParams::init(config, seed)?;
    let mut rng = stream(seed, "verify-grad", 0);
    let m = config.num_modalities();
    let samples: Vec<Sample> = (0..batch_size)
        .map(|i| {
            // Cycle through masks so every check sees missing modalities.
            let bits = 1 + (rng.random_range(0..(1u32 << m) - 1));
            let mask = ModalityMask::from_bits(bits, m).expect("non-empty");
            random_sample(i as u64, &config.input_dims, config.num_classes, mask, &mut rng)
        })
        .collect();
    let batch = Batch::from_samples(&samples, None, config)?;
    let sampling = Sampling::monte_carlo(2, batch.len(), config.latent_dim, &mut rng);
    let report = grad_check(
        |tape: &mut Tape, vars| {
            let fwd = forward(&params, tape, vars, &batch, &sampling);
            objective(tape, &fwd, &batch.labels, GRADIENT_CHECK_BETA).total
        },
        params.store.tensors(),
    )?;
    Ok(report.max_rel_error)
}

pub fn gradient_fidelity(seeds: &[u64]) -> CheckOutcome {
    timed("gradient-fidelity", GRADIENT_TOLERANCE, || {
        let config = gradient_check_config();
        let mut worst: f64 = 0.0;
        for &s in seeds {
            worst = worst.max(gradient_check_seed(&config, s, 4)?);
        }
        Ok((worst, worst <= GRADIENT_TOLERANCE, format!("{} seeds, D=8 Ds=8 H=2 M=3 B=4", seeds.len())))
    })
}

pub const MASKING_TOLERANCE: f64 = 1e-12;

/// Worst attention weight on missing positions and worst output change
/// when missing placeholders are overwritten, over every non-empty mask.
pub fn masking_probe(params: &ModelParams, samples: &[Sample], rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let config = &params.config;
    let m = config.num_modalities();
    let (mut worst_mass, mut worst_delta): (f64, f64) = (0.0, 0.0);
    for mask in ModalityMask::all_nonempty(m) {
        for chunk in samples.chunks(250) {
            let batch = Batch::from_samples(chunk, Some(mask), config)?;
            let mut perturbed = batch.clone();
            for (j, input) in perturbed.inputs.iter_mut().enumerate() {
                if !mask.is_observed(j) {
                    for v in input.data_mut() {
                        *v = 100.0 * normal(rng);
                    }
                }
            }
            let run = |b: &Batch| {
                let mut tape = Tape::new();
                let vars = params.store.bind(&mut tape);
                let fwd = forward(params, &mut tape, &vars, b, &Sampling::Mean);
                let mut outputs = vec![tape.value(fwd.probs).clone(), tape.value(fwd.fused.mu).clone()];
                outputs.push(tape.value(fwd.fused.var).clone());
                let mut mass: f64 = 0.0;
                if let Some(aligned) = &fwd.aligned {
                    for (target, heads) in aligned.attention.iter().enumerate() {
                        let context = crate::pra::context_order(target, m);
                        for head in heads {
                            let w = tape.value(*head);
                            for r in 0..w.rows() {
                                for (k, &src) in context.iter().enumerate() {
                                    if !mask.is_observed(src) {
                                        mass = mass.max(w.get(r, k).abs());
                                    }
                                }
                            }
                        }
                    }
                }
                (outputs, mass)
            };
            let (a, mass) = run(&batch);
            let (b, _) = run(&perturbed);
            worst_mass = worst_mass.max(mass);
            for (x, y) in a.iter().zip(&b) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    worst_delta = worst_delta.max((p - q).abs());
                }
            }
        }
    }
    Ok((worst_mass, worst_delta))
}

pub fn masking_soundness(samples: usize, seed: u64) -> CheckOutcome {
    timed("masking-soundness", MASKING_TOLERANCE, || {
        let config = ModelConfig::default();
        let params = ModelParams::init(&config, seed)?;
        let mut rng = stream(seed, "verify-mask", 0);
        let full = ModalityMask::full(config.num_modalities());
        let data: Vec<Sample> = (0..samples)
            .map(|i| random_sample(i as u64, &config.input_dims, config.num_classes, full, &mut rng))
            .collect();
        let (mass, delta) = masking_probe(&params, &data, &mut rng)?;
        Ok((
            mass.max(delta),
            mass == 0.0 && delta <= MASKING_TOLERANCE,
            format!("{samples} samples x 15 masks, missing mass {mass:e}, output delta {delta:e}"),
        ))
    })
}

/// Monte Carlo estimate of `KL(q ‖ N(0, I))` and its standard error.
pub fn kl_monte_carlo(post: &FusedPosterior, draws: usize, rng: &mut impl Rng) -> (f64, f64) {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for (&mu, &var) in post.mu.iter().zip(&post.var) {
            let eps = normal(rng);
            let z = mu + var.sqrt() * eps;
            // log q(z) − log p(z); the 2π terms cancel.
            log_ratio += -0.5 * var.ln() - 0.5 * eps * eps + 0.5 * z * z;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub const KL_STANDARD_ERRORS: f64 = 3.0;

pub fn kl_oracle(posteriors: usize, draws: usize, seed: u64) -> CheckOutcome {
    timed("kl-monte-carlo", KL_STANDARD_ERRORS, || {
        let mut rng = stream(seed, "verify-kl", 0);
        let mut worst: f64 = 0.0;
        for _ in 0..posteriors {
            let d = rng.random_range(1..=8);
            let post = FusedPosterior {
                mu: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                var: (0..d).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect(),
            };
            let exact = kl_divergence_to_prior(&post);
            let (est, se) = kl_monte_carlo(&post, draws, &mut rng);
            worst = worst.max((exact - est).abs() / se);
        }
        Ok((
            worst,
            worst <= KL_STANDARD_ERRORS,
            format!("{posteriors} posteriors x {draws} draws, worst in standard errors"),
        ))
    })
}

pub const LIMIT_TOLERANCE: f64 = 1e-3;

/// A variance-ceiling expert is (nearly) ignored, and dropping a unit
/// expert whose mean differs from the fused mean moves the fused mean.
pub fn limit_consistency(trials: usize, seed: u64) -> CheckOutcome {
    timed("limit-consistency", LIMIT_TOLERANCE, || {
        let mut rng = stream(seed, "verify-limit", 0);
        let mut worst: f64 = 0.0;
        let mut unmoved = 0;
        for _ in 0..trials {
            let d = rng.random_range(1..=6);
            let m = rng.random_range(2..=4);
            let mut experts: Vec<GaussianExpert> = (0..m)
                .map(|_| GaussianExpert {
                    mu: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    var: (0..d).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect(),
                })
                .collect();
            let mut with_ceiling = experts.clone();
            with_ceiling[0].var = vec![10f64.exp(); d];
            let mut near_zero = experts.clone();
            near_zero[0].var = vec![1e12; d];
            let a = fuse_experts(&with_ceiling)?;
            let b = fuse_experts(&near_zero)?;
            let c = fuse_experts(&experts[1..])?;
            for (x, y) in [(&a, &b), (&a, &c)] {
                for k in 0..d {
                    worst = worst.max((x.mu[k] - y.mu[k]).abs()).max((x.var[k] - y.var[k]).abs());
                }
            }

            experts[0].var = vec![1.0; d];
            let all = fuse_experts(&experts)?;
            let rest = fuse_experts(&experts[1..])?;
            for k in 0..d {
                if (experts[0].mu[k] - all.mu[k]).abs() > 1e-9 && rest.mu[k] == all.mu[k] {
                    unmoved += 1;
                }
            }
        }
        Ok((
            worst,
            worst <= LIMIT_TOLERANCE && unmoved == 0,
            format!("{trials} trials, {unmoved} coordinates unmoved by removing a unit expert"),
        ))
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Flip a sign inside fusion so the oracle must fail.
    pub inject_fault: bool,
}

/// Run the whole suite at full size.
pub fn run_all(options: VerifyOptions) -> Vec<CheckOutcome> {
    let s = options.seed;
    vec![
        poe_grid_oracle(200, s, options.inject_fault),
        gradient_fidelity(&[s, s + 1, s + 2, s + 3, s + 4]),
        masking_soundness(1000, s),
        kl_oracle(50, 100_000, s),
        limit_consistency(200, s),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_moments_of_prior_alone() {
        let (m, v) = grid_product_moments(&[], -10.0, 10.0, 1e-3);
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn small_suite_passes_and_fault_is_caught() {
        assert!(poe_grid_oracle(10, 1, false).passed);
        assert!(!poe_grid_oracle(10, 1, true).passed);
        assert!(kl_oracle(3, 20_000, 1).passed);
        assert!(limit_consistency(20, 1).passed);
    }
}
