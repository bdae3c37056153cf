use missfuse::datagen::{generate, GenConfig};
use missfuse::model::{forward, Batch};
use missfuse::params::ParamStore;
use missfuse::rng::stream;
use missfuse::tape::Tape;
use missfuse::training::{loss, objective, train, train_from, Adam, Precision, TrainConfig};
use missfuse::uapoe::Sampling;
use missfuse::{Error, Inference, ModalityMask, ModelConfig, ModelParams, Sample};

fn small_model(input_dims: Vec<usize>, classes: usize) -> ModelConfig {
    ModelConfig {
        input_dims,
        num_classes: classes,
        dim: 8,
        latent_dim: 4,
        hidden: 8,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn samples(config: &ModelConfig, n: usize, seed: u64, mask: Option<ModalityMask>) -> Vec<Sample> {
    let cohort = generate(&GenConfig {
        num_classes: config.num_classes,
        input_dims: config.input_dims.clone(),
        latent_dim: 4,
        n_samples: n,
        split: [1.0, 0.0, 0.0],
        seed,
        ..GenConfig::default()
    })
    .unwrap();
    cohort
        .train
        .into_iter()
        .map(|s| match mask {
            Some(m) => s.restricted_to(m.intersect(s.mask())).unwrap_or(s),
            None => s,
        })
        .collect()
}

fn set_param(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn uniform_prediction_costs_ln_c() {
    let cfg = small_model(vec![3, 4], 3);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    set_param(&mut params.store, "classifier.weight", |_| 0.0);
    set_param(&mut params.store, "classifier.bias", |_| 0.0);
    let data = samples(&cfg, 12, 1, None);
    let tc = TrainConfig { beta: 0.0, ..TrainConfig::default() };
    let l = loss(&data, &params, &tc, &mut stream(1, "t", 0)).unwrap();
    assert!((l.ce - 3f64.ln()).abs() < 1e-11, "{}", l.ce);
    assert_eq!(l.total, l.ce);
}

#[test]
fn confident_correct_prediction_costs_nothing() {
    let cfg = small_model(vec![3, 4], 3);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    set_param(&mut params.store, "classifier.weight", |_| 0.0);
    set_param(&mut params.store, "classifier.bias", |i| if i == 0 { 1000.0 } else { 0.0 });
    let data: Vec<Sample> = samples(&cfg, 30, 2, None).into_iter().filter(|s| s.label == 0).collect();
    assert!(!data.is_empty());
    let tc = TrainConfig { beta: 0.0, ..TrainConfig::default() };
    let l = loss(&data, &params, &tc, &mut stream(1, "t", 0)).unwrap();
    assert!(l.ce <= 1e-10, "{}", l.ce);
}

#[test]
fn prior_posterior_adds_no_kl() {
    let cfg = small_model(vec![3, 4], 3);
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    for m in 0..2 {
        // Expert means zero and variance at the clamp ceiling: the fused
        // posterior collapses onto the prior.
        set_param(&mut params.store, &format!("expert.{m}.weight"), |_| 0.0);
        set_param(&mut params.store, &format!("expert.{m}.bias"), |i| if i < 4 { 0.0 } else { 50.0 });
    }
    let data = samples(&cfg, 12, 3, None);
    let with = loss(&data, &params, &TrainConfig { beta: 1.0, ..TrainConfig::default() }, &mut stream(1, "t", 0)).unwrap();
    assert!(with.kl < 1e-7, "{}", with.kl);
    assert!((with.total - with.ce).abs() < 1e-7);
}

#[test]
fn zero_beta_objective_is_bitwise_cross_entropy() {
    let cfg = small_model(vec![3, 4], 3);
    let params = ModelParams::init(&cfg, 4).unwrap();
    let data = samples(&cfg, 16, 4, None);
    let batch = Batch::from_samples(&data, None, &cfg).unwrap();
    let sampling = Sampling::monte_carlo(3, batch.len(), cfg.latent_dim, &mut stream(4, "eps", 0));
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let fwd = forward(&params, &mut tape, &vars, &batch, &sampling);
    let l = objective(&mut tape, &fwd, &batch.labels, 0.0);
    // CE computed independently from the probability table.
    let probs = tape.value(fwd.probs);
    let ce = -(0..batch.len())
        .map(|r| (probs.get(r, batch.labels[r]) + 1e-12).ln())
        .sum::<f64>()
        / batch.len() as f64;
    assert_eq!(tape.value(l.total).item().to_bits(), tape.value(l.ce).item().to_bits());
    assert!((tape.value(l.ce).item() - ce).abs() < 1e-14);
}

#[test]
fn loss_is_deterministic_for_a_fixed_rng() {
    let cfg = small_model(vec![3, 4], 3);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let data = samples(&cfg, 16, 5, None);
    let tc = TrainConfig::default();
    let a = loss(&data, &params, &tc, &mut stream(9, "x", 0)).unwrap();
    let b = loss(&data, &params, &tc, &mut stream(9, "x", 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_batch_is_a_data_error() {
    let cfg = small_model(vec![3, 4], 3);
    let params = ModelParams::init(&cfg, 5).unwrap();
    assert!(loss(&[], &params, &TrainConfig::default(), &mut stream(0, "x", 0)).is_err());
    let empty_mask = Sample::new(0, vec![None, None], 0);
    assert!(matches!(
        loss(&[empty_mask], &params, &TrainConfig::default(), &mut stream(0, "x", 0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn missing_modalities_receive_no_encoder_gradient() {
    let cfg = small_model(vec![3, 4, 2], 3);
    let params = ModelParams::init(&cfg, 6).unwrap();
    let only_first_two = ModalityMask::from_bools(&[true, true, false]);
    let data = samples(&cfg, 16, 6, Some(only_first_two));
    assert!(data.iter().all(|s| !s.mask().is_observed(2)));
    let batch = Batch::from_samples(&data, None, &cfg).unwrap();
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let fwd = forward(&params, &mut tape, &vars, &batch, &Sampling::Mean);
    let l = objective(&mut tape, &fwd, &batch.labels, 1e-3);
    let grads = tape.backward(l.total);
    for (name, &v) in params.store.names().iter().zip(&vars) {
        let g = grads.get(v);
        let zero = g.is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
        if name.starts_with("encoder.2.") {
            assert!(zero, "{name} received gradient");
        } else if name.starts_with("encoder.0.") {
            assert!(!zero, "{name} should be trained");
        }
    }
}

#[test]
fn one_step_moves_exactly_the_parameters_with_gradient() {
    let cfg = ModelConfig {
        disable_uapoe_variance: true,
        ..small_model(vec![3, 4], 3)
    };
    let mut params = ModelParams::init(&cfg, 7).unwrap();
    let data = samples(&cfg, 16, 7, None);
    let batch = Batch::from_samples(&data, None, &cfg).unwrap();
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let fwd = forward(&params, &mut tape, &vars, &batch, &Sampling::Mean);
    let l = objective(&mut tape, &fwd, &batch.labels, 1e-3);
    let grads = tape.backward(l.total);
    let g: Vec<Option<&missfuse::Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();
    let before = params.store.clone();
    let mut adam = Adam::new(&params.store);
    adam.step(&mut params.store, &g, 1e-3, Precision::F64);
    let mut zero_seen = 0;
    for (i, name) in before.names().iter().enumerate() {
        let old = before.tensors()[i].data();
        let new = params.store.tensors()[i].data();
        for j in 0..old.len() {
            let gij = g[i].map_or(0.0, |t| t.data()[j]);
            if gij == 0.0 {
                zero_seen += 1;
                assert_eq!(old[j], new[j], "{name}[{j}] moved without gradient");
            } else {
                assert_ne!(old[j], new[j], "{name}[{j}] did not move");
            }
        }
    }
    // The log-variance half of every expert head is unused with unit variances.
    assert!(zero_seen > 0);
}

fn tiny_run_config() -> TrainConfig {
    TrainConfig {
        warmup_epochs: 2,
        max_epochs: 6,
        batch_size: 16,
        mc_samples: 2,
        validation: Inference::MonteCarlo(2),
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_parameters_stop_after_two_epochs() {
    let cfg = small_model(vec![3, 4], 3);
    let data = samples(&cfg, 60, 8, None);
    let (train_set, val) = data.split_at(40);
    let tc = TrainConfig {
        lr: 0.0,
        patience: 1,
        ..tiny_run_config()
    };
    let out = train(train_set, val, &cfg, &tc).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.stopped_early);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn same_seed_gives_identical_history_and_parameters() {
    let cfg = small_model(vec![3, 4], 3);
    let data = samples(&cfg, 60, 9, None);
    let (train_set, val) = data.split_at(40);
    let a = train(train_set, val, &cfg, &tiny_run_config()).unwrap();
    let b = train(train_set, val, &cfg, &tiny_run_config()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params.store, b.params.store);
    // Every stored value is representable in f32 under the default precision.
    assert!(a
        .params
        .store
        .tensors()
        .iter()
        .all(|t| t.data().iter().all(|&v| v == v as f32 as f64)));
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_model() {
    let cfg = small_model(vec![3, 4], 3);
    let data = samples(&cfg, 60, 10, None);
    let (train_set, val) = data.split_at(40);
    let tc = TrainConfig {
        lr: 1e300,
        precision: Precision::F64,
        ..tiny_run_config()
    };
    let err = train(train_set, val, &cfg, &tc).unwrap_err();
    match err.source {
        Error::NonFinite { epoch, .. } => assert!(epoch >= 1),
        ref other => panic!("unexpected {other}"),
    }
    assert!(err.last_good.is_some());
    assert!(!err.history.is_empty());
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let cfg = small_model(vec![3, 4], 3);
    let data = samples(&cfg, 20, 11, None);
    let bad = TrainConfig { beta: -1.0, ..tiny_run_config() };
    assert!(matches!(train(&data, &data, &cfg, &bad).unwrap_err().source, Error::Config(_)));
    let params = ModelParams::init(&cfg, 0).unwrap();
    assert!(train_from(params, &data, &[], &tiny_run_config()).is_err());
}

fn full_mask_accuracy(cohort: &missfuse::datagen::Cohort, gen: &GenConfig, max_epochs: usize) -> (f64, f64) {
    let cfg = ModelConfig {
        input_dims: gen.input_dims.clone(),
        num_classes: gen.num_classes,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        max_epochs,
        seed: gen.seed,
        ..TrainConfig::default()
    };
    let out = train(&cohort.train, &cohort.val, &cfg, &tc).unwrap();
    let best_val = out.history.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    let probs = missfuse::model::predict_samples(
        &out.params,
        &cohort.test,
        None,
        Inference::MonteCarlo(10),
        &mut stream(gen.seed, "test", 0),
    )
    .unwrap();
    let labels: Vec<usize> = cohort.test.iter().map(|s| s.label).collect();
    let test = missfuse::evalkit::ClassificationMetrics::from_probabilities(&probs, &labels, gen.num_classes);
    (best_val, test.accuracy)
}

#[test]
fn separable_two_class_data_is_learned() {
    let gen = GenConfig {
        num_classes: 2,
        separation: 6.0,
        noise_std: 0.0,
        tabular_noise_std: 0.0,
        degraded_rate: 0.0,
        subset_weights: Some(vec![0.0; 14].into_iter().chain([1.0]).collect()),
        n_samples: 1400,
        split: [4.0, 1.0, 2.0],
        seed: 12,
        ..GenConfig::default()
    };
    let (val, test) = full_mask_accuracy(&generate(&gen).unwrap(), &gen, 50);
    assert!(val >= 0.95, "best validation accuracy {val}");
    assert!(test >= 0.99, "full-observation test accuracy {test}");
}

#[test]
fn no_separation_means_chance_accuracy() {
    let gen = GenConfig {
        separation: 0.0,
        n_samples: 900,
        seed: 13,
        ..GenConfig::default()
    };
    let (_, test) = full_mask_accuracy(&generate(&gen).unwrap(), &gen, 20);
    assert!((test - 1.0 / 3.0).abs() <= 0.05, "test accuracy {test}");
}
